use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{negative_source, prepare, train_prepared, EpochRecord, PreparedSplit, RunConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::model::save_checkpoint;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.json";
pub const REPORT_FILE: &str = "report.json";
pub const SPLIT_FILE: &str = "split.json";
pub const LOG_FILE: &str = "train.log";

#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub outcome: TrainOutcome,
}

#[derive(Serialize)]
struct FinalReport<'a> {
    config_hash: &'a str,
    best_epoch: usize,
    validation: &'a MetricReport,
    test: &'a MetricReport,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `cfg` and writes the run directory: config copy, split summary,
/// best checkpoint, per-epoch history, final report and a plain-text log.
pub fn run(cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let dir = out_dir.as_ref().to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;

    let log_path = dir.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log_line = |line: String| -> Result<()> {
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))
    };

    let prep = prepare(cfg)?;
    let summary = match &prep.split {
        PreparedSplit::Transductive(s) => s.summary(),
        PreparedSplit::Inductive(s) => s.summary(),
    };
    write_json(&dir.join(SPLIT_FILE), &summary)?;
    log_line(format!(
        "graph: {} users, {} items, {} edges",
        prep.graph.num_users(),
        prep.graph.num_items(),
        prep.graph.num_edges()
    ))?;
    let negatives = negative_source(cfg, &prep)?;

    let mut lines = Vec::new();
    let result = train_prepared(cfg, &prep, &negatives, |r: &EpochRecord| {
        let mut line = format!("epoch {} loss {:.6} steps {}", r.epoch, r.loss, r.steps);
        if let Some(v) = &r.validation {
            for (k, x) in &v.ndcg {
                line.push_str(&format!(" ndcg@{k} {x:.6}"));
            }
            for (k, x) in &v.recall {
                line.push_str(&format!(" recall@{k} {x:.6}"));
            }
        }
        lines.push(line);
    });
    for line in lines {
        log_line(line)?;
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            log_line(format!("aborted: {e}"))?;
            return Err(e);
        }
    };
    log_line(format!(
        "best epoch {}; test ndcg@{} {:.6}",
        outcome.best_epoch,
        cfg.select_k,
        outcome.test.ndcg_at(cfg.select_k).unwrap_or(f64::NAN)
    ))?;

    save_checkpoint(dir.join(CHECKPOINT_FILE), &outcome.best, prep.graph.num_users())?;
    write_json(&dir.join(HISTORY_FILE), &outcome.history)?;
    write_json(
        &dir.join(REPORT_FILE),
        &FinalReport {
            config_hash: &outcome.config_hash,
            best_epoch: outcome.best_epoch,
            validation: &outcome.validation,
            test: &outcome.test,
        },
    )?;
    Ok(RunArtifacts { dir, outcome })
}
