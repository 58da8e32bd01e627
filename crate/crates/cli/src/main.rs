use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array1;
use rankcf::data::Part;
use rankcf::eval::{evaluate, rank_all_items};
use rankcf::model::{infer_user, load_checkpoint, Model};
use rankcf::ppr::precompute_and_store;
use rankcf::trainer::{prepare, run, Prepared, PreparedSplit, RunConfig};

#[derive(Parser)]
#[command(name = "rankcf", version, about = "Train and evaluate graph recommenders with smooth ranking losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/default")]
    out_dir: PathBuf,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalPart {
    Validation,
    Test,
}

impl From<EvalPart> for Part {
    fn from(p: EvalPart) -> Self {
        match p {
            EvalPart::Validation => Part::Validation,
            EvalPart::Test => Part::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset and write the manifest and summary.
    Split(Common),
    /// Precompute the PPR cache of every training user.
    Ppr(Common),
    /// Train and write a run directory.
    Train(Common),
    /// Re-evaluate the checkpoint of a run directory.
    Eval {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: EvalPart,
    },
    /// Print each evaluation user's top-k list as JSON.
    Topk {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: EvalPart,
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Only the first N users.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn load_run(run_dir: &Path) -> Result<(RunConfig, Prepared, Model)> {
    let cfg = RunConfig::from_file(run_dir.join("config.toml"))?;
    let prep = prepare(&cfg)?;
    let (header, model) = load_checkpoint(run_dir.join("checkpoint.bin"))?;
    if header.num_items != prep.graph.num_items() {
        bail!(
            "checkpoint has {} items but the configured split has {}",
            header.num_items,
            prep.graph.num_items()
        );
    }
    Ok((cfg, prep, model))
}

fn topk(run_dir: &Path, part: Part, k: usize, limit: Option<usize>) -> Result<serde_json::Value> {
    let (_, prep, model) = load_run(run_dir)?;
    let emb = model.embed(&prep.graph)?;
    let labels = prep.split.train().item_labels();
    let mut out = Vec::new();
    let mut push = |label: u64, vec: Array1<f64>, history: &[u32], held: &[u32]| -> Result<()> {
        let r = rank_all_items(0, vec.view(), emb.pooled.items.view(), history, held)?;
        let top: Vec<serde_json::Value> = r
            .ranked_items
            .iter()
            .zip(&r.relevance)
            .take(k)
            .map(|(&i, &hit)| serde_json::json!({ "item": labels[i as usize], "hit": hit }))
            .collect();
        out.push(serde_json::json!({ "user": label, "history": history.len(), "held_out": held.len(), "top": top }));
        Ok(())
    };
    match &prep.split {
        PreparedSplit::Transductive(s) => {
            let train = s.train.items_by_user();
            let held = if part == Part::Validation { s.validation.items_by_user() } else { s.test.items_by_user() };
            let users = s.train.user_labels();
            for u in (0..train.len()).take(limit.unwrap_or(usize::MAX)) {
                push(users[u], emb.pooled.users.row(u).to_owned(), &train[u], &held[u])?;
            }
        }
        PreparedSplit::Inductive(s) => {
            let users = if part == Part::Validation { &s.val_users } else { &s.test_users };
            for h in users.iter().take(limit.unwrap_or(usize::MAX)) {
                let v = infer_user(&h.fold_in, &emb.layers, &prep.graph, &model.config)?;
                push(h.label, v, &h.fold_in, &h.fold_out)?;
            }
        }
    }
    Ok(serde_json::Value::Array(out))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Split(c) => {
            let cfg = c.load()?;
            let prep = prepare(&cfg)?;
            fs::create_dir_all(&c.out_dir).with_context(|| format!("creating {}", c.out_dir.display()))?;
            let manifest = c.out_dir.join("split.tsv");
            let w = BufWriter::new(fs::File::create(&manifest)?);
            let summary = match &prep.split {
                PreparedSplit::Transductive(s) => {
                    s.write_manifest(w)?;
                    s.summary()
                }
                PreparedSplit::Inductive(s) => {
                    s.write_manifest(w)?;
                    s.summary()
                }
            };
            let text = serde_json::to_string_pretty(&summary)?;
            fs::write(c.out_dir.join("split.json"), &text)?;
            println!("{text}");
        }
        Command::Ppr(c) => {
            let cfg = c.load()?;
            let prep = prepare(&cfg)?;
            fs::create_dir_all(&c.out_dir)?;
            let path = cfg.sampling.cache.clone().unwrap_or_else(|| c.out_dir.join("ppr.bin"));
            let users: Vec<u32> = (0..prep.graph.num_users() as u32)
                .filter(|&u| prep.graph.user_degree(u as usize) > 0)
                .collect();
            let header = precompute_and_store(&prep.graph, &users, &cfg.sampling.ppr, &path)?;
            log::info!("wrote {} PPR records to {}", header.records, path.display());
            println!("{}", serde_json::to_string_pretty(&header)?);
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let art = run(&cfg, &c.out_dir)?;
            let o = &art.outcome;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "run_dir": art.dir,
                    "best_epoch": o.best_epoch,
                    "validation": { "ndcg": o.validation.ndcg, "recall": o.validation.recall, "ap": o.validation.ap },
                    "test": { "ndcg": o.test.ndcg, "recall": o.test.recall, "ap": o.test.ap },
                }))?
            );
        }
        Command::Eval { run_dir, part } => {
            let (cfg, prep, model) = load_run(&run_dir)?;
            let mut report = evaluate(prep.split.as_ref(), part.into(), &model, &prep.graph, &cfg.ks)?;
            report.config_hash = Some(cfg.hash());
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Topk { run_dir, part, k, limit } => {
            if k == 0 {
                bail!("k must be at least 1");
            }
            let lists = topk(&run_dir, part.into(), k, limit)?;
            println!("{}", serde_json::to_string_pretty(&lists)?);
        }
    }
    Ok(())
}
