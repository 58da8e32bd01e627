//! Batch construction, the optimisation loop and run orchestration.

mod batch;
mod config;
mod run;

pub use batch::{build_batch, NegativeSource, TrainingBatch, UserBatch};
pub use config::{
    DatasetConfig, LossParams, ModelParams, OptimizerConfig, RunConfig, SamplingConfig, SamplingKind, SplitConfig,
};
pub use run::{run, RunArtifacts};

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{filter_min_interactions, load_interactions, split_inductive, split_transductive, Dataset, Part};
use crate::data::{InductiveSplit, TransductiveSplit};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport, SplitRef};
use crate::losses::{loss_grad, BatchScores, LossConfig, LossGrad};
use crate::model::{add_row_decay, adam_step, build_graph, AdamState, BipartiteGraph, EmbeddingTable, Mode, Model};
use crate::model::{Params, Propagator};
use crate::ppr::{load_cache, precompute, samplers_from_records};

#[derive(Debug, Clone)]
pub enum PreparedSplit {
    Transductive(TransductiveSplit),
    Inductive(InductiveSplit),
}

impl PreparedSplit {
    pub fn as_ref(&self) -> SplitRef<'_> {
        match self {
            Self::Transductive(s) => SplitRef::Transductive(s),
            Self::Inductive(s) => SplitRef::Inductive(s),
        }
    }

    pub fn train(&self) -> &Dataset {
        match self {
            Self::Transductive(s) => &s.train,
            Self::Inductive(s) => &s.train,
        }
    }
}

/// A split and its training graph, reusable across runs that differ only in
/// model, loss or sampling settings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: PreparedSplit,
    pub graph: BipartiteGraph,
}

/// Loads, filters and splits the configured dataset.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let raw = load_interactions(&cfg.dataset.path, cfg.dataset.rating_threshold)?;
    let d = filter_min_interactions(raw, cfg.dataset.min_interactions.max(1))?;
    log::info!(
        "dataset {}: {} users, {} items, {} interactions",
        cfg.dataset.path.display(),
        d.num_users(),
        d.num_items(),
        d.len()
    );
    prepare_dataset(cfg, &d)
}

pub fn prepare_dataset(cfg: &RunConfig, d: &Dataset) -> Result<Prepared> {
    let split = match cfg.protocol {
        Mode::Transductive => PreparedSplit::Transductive(split_transductive(d, cfg.split.rho, cfg.seed)?),
        Mode::Inductive => PreparedSplit::Inductive(split_inductive(d, cfg.split.mu, cfg.split.eta, cfg.seed)?),
    };
    let graph = build_graph(split.train())?;
    Ok(Prepared { split, graph })
}

/// Builds the configured negative sampler for every training user.
pub fn negative_source(cfg: &RunConfig, prep: &Prepared) -> Result<NegativeSource> {
    match cfg.sampling.kind {
        SamplingKind::Uniform => NegativeSource::uniform(&prep.graph),
        SamplingKind::Ppr => {
            let samplers = match &cfg.sampling.cache {
                Some(path) => {
                    if !path.exists() {
                        return Err(Error::Config(format!("PPR cache {} does not exist", path.display())));
                    }
                    let (header, samplers) = load_cache(path, &prep.graph)?;
                    if header.scale != cfg.sampling.ppr.scale {
                        log::warn!(
                            "PPR cache scale {} differs from configured {}; using the cache",
                            header.scale,
                            cfg.sampling.ppr.scale
                        );
                    }
                    samplers
                }
                None => {
                    let users: Vec<u32> = (0..prep.graph.num_users() as u32)
                        .filter(|&u| prep.graph.user_degree(u as usize) > 0)
                        .collect();
                    let records = precompute(&prep.graph, &users, &cfg.sampling.ppr)?;
                    samplers_from_records(&prep.graph, &records, cfg.sampling.ppr.scale)?
                }
            };
            NegativeSource::ppr(&prep.graph, samplers)
        }
    }
}

/// Shuffles `users` in place and cuts them into consecutive batches.
pub fn epoch_batches<'u, R: rand::Rng + ?Sized>(
    users: &'u mut [u32],
    batch_users: usize,
    rng: &mut R,
) -> std::slice::Chunks<'u, u32> {
    users.shuffle(rng);
    users.chunks(batch_users.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the best value (earliest on ties) is `patience` or more
/// evaluations old.
pub fn early_stop(history: &[f64], patience: usize) -> StopDecision {
    let mut best = 0;
    for (k, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = k;
        }
    }
    if !history.is_empty() && history.len() - 1 - best >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the users visited this epoch, without the L2 term.
    pub loss: f64,
    pub steps: usize,
    /// Validation report (per-user table omitted) when evaluated.
    pub validation: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters, rounded to checkpoint precision.
    pub best: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub validation: MetricReport,
    pub test: MetricReport,
    pub config_hash: String,
}

/// Everything one optimisation step needs besides the parameters.
struct StepContext<'a> {
    loss: &'a LossConfig,
    l2: f64,
    mode: Mode,
}

/// Loss of the batch, and the gradient pushed into the pooled table.
fn batch_loss_and_pooled_grad(
    batch: &TrainingBatch,
    pooled: &EmbeddingTable,
    loss: &LossConfig,
) -> std::result::Result<(f64, EmbeddingTable), String> {
    let per_user: Vec<std::result::Result<LossGrad, String>> = batch
        .users
        .par_iter()
        .map(|ub| {
            let uvec = pooled.users.row(ub.user as usize);
            let dot = |i: &u32| pooled.items.row(*i as usize).dot(&uvec);
            let pos: Vec<f64> = ub.positives.iter().map(dot).collect();
            let neg: Vec<f64> = ub.negatives.iter().map(dot).collect();
            let bs = BatchScores::new(&pos, &neg).map_err(|e| batch_dump(ub.user, &pos, &neg, &e.to_string()))?;
            let g = loss_grad(loss, &bs);
            if !g.value.is_finite() || g.pos.iter().chain(&g.neg).any(|x| !x.is_finite()) {
                return Err(batch_dump(ub.user, &pos, &neg, &format!("loss {}", g.value)));
            }
            Ok(g)
        })
        .collect();
    let n = batch.users.len() as f64;
    let mut grad = EmbeddingTable::zeros(pooled.users.nrows(), pooled.items.nrows(), pooled.dim());
    let mut total = 0.0;
    for (ub, g) in batch.users.iter().zip(per_user) {
        let g = g?;
        total += g.value;
        let u = ub.user as usize;
        let uvec = pooled.users.row(u);
        let mut gu = Array1::<f64>::zeros(pooled.dim());
        let pairs = ub.positives.iter().zip(&g.pos).chain(ub.negatives.iter().zip(&g.neg));
        for (&i, &gs) in pairs {
            let w = gs / n;
            grad.items.row_mut(i as usize).scaled_add(w, &uvec);
            gu.scaled_add(w, &pooled.items.row(i as usize));
        }
        let mut row = grad.users.row_mut(u);
        row += &gu;
    }
    Ok((total / n, grad))
}

fn batch_dump(user: u32, pos: &[f64], neg: &[f64], what: &str) -> String {
    serde_json::json!({
        "user": user,
        "problem": what,
        "positive_scores": pos,
        "negative_scores": neg,
    })
    .to_string()
}

/// One Adam step on `batch`; returns the mean data loss.
fn train_step(
    params: &mut Params,
    adam: &mut AdamState,
    prop: &mut Propagator,
    batch: &TrainingBatch,
    ctx: &StepContext,
) -> Result<f64> {
    if batch.users.is_empty() {
        return Ok(0.0);
    }
    let cache = prop.forward(params)?;
    let (loss, pooled_grad) = batch_loss_and_pooled_grad(batch, &cache.pooled, ctx.loss).map_err(|dump| {
        let (un, inn) = params.norms();
        Error::Numerical {
            block: "loss".into(),
            detail: format!("non-finite loss; batch {dump}; parameter norms users={un:?} items={inn}"),
        }
    })?;
    let mut grads = prop.backward(&pooled_grad)?;
    if ctx.l2 > 0.0 {
        let b = batch.users.len() as f64;
        let items: BTreeSet<u32> = batch
            .users
            .iter()
            .flat_map(|ub| ub.positives.iter().chain(&ub.negatives).copied())
            .collect();
        let items: Vec<u32> = items.into_iter().collect();
        add_row_decay(&mut grads.items, &params.items, &items, ctx.l2 / b);
        if ctx.mode == Mode::Transductive {
            if let (Some(gu), Some(pu)) = (grads.users.as_mut(), params.users.as_ref()) {
                let mut users: Vec<u32> = batch.users.iter().map(|ub| ub.user).collect();
                users.sort_unstable();
                users.dedup();
                add_row_decay(gu, pu, &users, ctx.l2 / b);
            }
        }
    }
    adam_step(params, &grads, adam)?;
    Ok(loss)
}

fn summary_only(mut r: MetricReport) -> MetricReport {
    r.per_user.clear();
    r
}

/// Trains on a prepared split; `on_epoch` observes every finished epoch.
pub fn train_prepared(
    cfg: &RunConfig,
    prep: &Prepared,
    negatives: &NegativeSource,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = cfg.model_config();
    let lcfg = cfg.loss_config();
    let g = &prep.graph;
    if prep.split.as_ref().mode() != mcfg.mode {
        return Err(Error::Config("prepared split does not match the configured protocol".into()));
    }
    let config_hash = cfg.hash();
    let mut params = Params::init(&mcfg, g.num_users(), g.num_items(), cfg.model.init_std, cfg.seed);
    let mut adam = AdamState::new(cfg.optimizer.adam(), &params);
    let mut prop = Propagator::new(g, mcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let users: Vec<u32> = (0..g.num_users() as u32)
        .filter(|&u| g.user_degree(u as usize) > 0)
        .collect();
    let ctx = StepContext {
        loss: &lcfg,
        l2: cfg.optimizer.l2,
        mode: mcfg.mode,
    };
    let snapshot = |p: &Params| Model {
        config: mcfg,
        params: p.rounded_to_f32(),
        seed: cfg.seed,
    };
    let validate = |m: &Model| -> Result<MetricReport> {
        let mut r = evaluate(prep.split.as_ref(), Part::Validation, m, g, &cfg.ks)?;
        r.config_hash = Some(config_hash.clone());
        Ok(r)
    };

    let mut history = Vec::new();
    let mut scores = Vec::new();
    let mut best: Option<(Model, usize, MetricReport)> = None;
    for epoch in 1..=cfg.max_epochs {
        let mut order = users.clone();
        let mut total = 0.0;
        let mut visited = 0usize;
        let mut steps = 0;
        for chunk in epoch_batches(&mut order, cfg.batch_users, &mut rng) {
            let batch = build_batch(chunk, g, negatives, cfg.sampling.n_pos, cfg.sampling.n_neg, &mut rng)?;
            let loss = train_step(&mut params, &mut adam, &mut prop, &batch, &ctx)?;
            total += loss * batch.users.len() as f64;
            visited += batch.users.len();
            steps += 1;
        }
        let mut record = EpochRecord {
            epoch,
            loss: if visited == 0 { 0.0 } else { total / visited as f64 },
            steps,
            validation: None,
        };
        let mut stop = false;
        if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let model = snapshot(&params);
            let report = validate(&model)?;
            let value = report.ndcg_at(cfg.select_k).expect("select_k is validated");
            log::info!(
                "epoch {epoch}: loss {:.6}, validation ndcg@{} {:.4}",
                record.loss,
                cfg.select_k,
                value
            );
            if best.as_ref().is_none_or(|(_, _, b)| value > b.ndcg_at(cfg.select_k).unwrap()) {
                best = Some((model, epoch, report.clone()));
            }
            scores.push(value);
            record.validation = Some(summary_only(report));
            stop = early_stop(&scores, cfg.patience) == StopDecision::Stop;
        } else {
            log::debug!("epoch {epoch}: loss {:.6}", record.loss);
        }
        on_epoch(&record);
        history.push(record);
        if stop {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }
    let (best, best_epoch, validation) = match best {
        Some(b) => b,
        None => {
            let m = snapshot(&params);
            let r = validate(&m)?;
            (m, 0, r)
        }
    };
    let mut test = evaluate(prep.split.as_ref(), Part::Test, &best, g, &cfg.ks)?;
    test.config_hash = Some(config_hash.clone());
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        validation,
        test,
        config_hash,
    })
}

/// Loads data, builds samplers and trains.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let negatives = negative_source(cfg, &prep)?;
    train_prepared(cfg, &prep, &negatives, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossVariant;

    #[test]
    fn early_stop_rules() {
        assert_eq!(early_stop(&[0.1, 0.2, 0.3, 0.4], 2), StopDecision::Continue);
        assert_eq!(early_stop(&[0.5; 4], 3), StopDecision::Stop);
        assert_eq!(early_stop(&[0.5; 3], 3), StopDecision::Continue);
        // best at index 1, current index 4, patience 3
        assert_eq!(early_stop(&[0.1, 0.9, 0.2, 0.3, 0.4], 3), StopDecision::Stop);
        assert_eq!(early_stop(&[0.1, 0.9, 0.2, 0.3], 3), StopDecision::Continue);
        assert_eq!(early_stop(&[], 1), StopDecision::Continue);
    }

    fn single_pair_setup(variant: LossVariant) -> (RunConfig, Prepared) {
        // user 0 likes item 0, item 1 is the only negative
        let d = Dataset::from_pairs(1, 2, [(0, 0)]).unwrap();
        let mut cfg = RunConfig {
            protocol: Mode::Transductive,
            ..RunConfig::default()
        };
        cfg.model.layers = 0;
        cfg.model.dim = Some(4);
        cfg.loss.variant = variant;
        cfg.sampling.n_pos = 1;
        cfg.sampling.n_neg = 1;
        cfg.optimizer.lr = 0.01;
        cfg.optimizer.l2 = 0.0;
        let graph = build_graph(&d).unwrap();
        let split = TransductiveSplit {
            train: d.clone(),
            validation: Dataset::from_pairs(1, 2, std::iter::empty()).unwrap(),
            test: Dataset::from_pairs(1, 2, std::iter::empty()).unwrap(),
            rho: 0.8,
            seed: 0,
            moved_to_train: 0,
        };
        (
            cfg,
            Prepared {
                split: PreparedSplit::Transductive(split),
                graph,
            },
        )
    }

    #[test]
    fn scalar_case_learns_to_separate() {
        let (cfg, prep) = single_pair_setup(LossVariant::Ndcg);
        let neg = NegativeSource::uniform(&prep.graph).unwrap();
        let mcfg = cfg.model_config();
        let lcfg = cfg.loss_config();
        let mut params = Params::init(&mcfg, 1, 2, 0.1, 3);
        let mut adam = AdamState::new(cfg.optimizer.adam(), &params);
        let mut prop = Propagator::new(&prep.graph, mcfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctx = StepContext {
            loss: &lcfg,
            l2: 0.0,
            mode: Mode::Transductive,
        };
        let margin = |p: &Params| {
            let u = p.users.as_ref().unwrap().row(0).to_owned();
            p.items.row(0).dot(&u) - p.items.row(1).dot(&u)
        };
        for _ in 0..200 {
            let batch = build_batch(&[0], &prep.graph, &neg, 1, 1, &mut rng).unwrap();
            train_step(&mut params, &mut adam, &mut prop, &batch, &ctx).unwrap();
        }
        assert!(margin(&params) > 0.0, "margin {}", margin(&params));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut cfg, prep) = single_pair_setup(LossVariant::Ap);
        cfg.optimizer.lr = 0.0;
        let mcfg = cfg.model_config();
        let lcfg = cfg.loss_config();
        let neg = NegativeSource::uniform(&prep.graph).unwrap();
        let mut params = Params::init(&mcfg, 1, 2, 0.1, 3);
        let before = params.clone();
        let mut adam = AdamState::new(cfg.optimizer.adam(), &params);
        let mut prop = Propagator::new(&prep.graph, mcfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctx = StepContext {
            loss: &lcfg,
            l2: 0.0,
            mode: Mode::Transductive,
        };
        for _ in 0..5 {
            let batch = build_batch(&[0], &prep.graph, &neg, 1, 1, &mut rng).unwrap();
            train_step(&mut params, &mut adam, &mut prop, &batch, &ctx).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn non_finite_scores_abort_with_diagnostics() {
        let (cfg, prep) = single_pair_setup(LossVariant::Ndcg);
        let mcfg = cfg.model_config();
        let lcfg = cfg.loss_config();
        let neg = NegativeSource::uniform(&prep.graph).unwrap();
        let mut params = Params::init(&mcfg, 1, 2, 0.1, 3);
        params.items[[0, 0]] = f64::NAN;
        let mut adam = AdamState::new(cfg.optimizer.adam(), &params);
        let mut prop = Propagator::new(&prep.graph, mcfg).unwrap();
        let batch = build_batch(&[0], &prep.graph, &neg, 1, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ctx = StepContext {
            loss: &lcfg,
            l2: 0.0,
            mode: Mode::Transductive,
        };
        match train_step(&mut params, &mut adam, &mut prop, &batch, &ctx) {
            Err(Error::Numerical { block, detail }) => {
                assert_eq!(block, "loss");
                assert!(detail.contains("positive_scores") && detail.contains("norms"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }
}
