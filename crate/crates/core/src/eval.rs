//! All-ranking evaluation: every item the user has not interacted with at
//! training (or fold-in) time is a candidate, and the held-out items are the
//! relevant ones.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{InductiveSplit, Part, TransductiveSplit};
use crate::error::{Error, Result};
use crate::losses::ideal_dcg;
use crate::model::{infer_user, score, BipartiteGraph, Mode, Model};

/// Candidates of one user in descending score order, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub user: u32,
    pub ranked_items: Vec<u32>,
    pub relevance: Vec<bool>,
}

impl RankingResult {
    pub fn num_relevant(&self) -> usize {
        self.relevance.iter().filter(|&&r| r).count()
    }
}

/// Scores every item except `exclusions` and sorts.
pub fn rank_all_items(
    user: u32,
    user_vec: ArrayView1<f64>,
    item_embs: ArrayView2<f64>,
    exclusions: &[u32],
    positives: &[u32],
) -> Result<RankingResult> {
    let n = item_embs.nrows();
    let mut excluded = vec![false; n];
    for &i in exclusions {
        *excluded
            .get_mut(i as usize)
            .ok_or_else(|| Error::Argument(format!("excluded item {i} outside {n} items")))? = true;
    }
    let scores = score(user_vec, item_embs)?;
    let mut ranked: Vec<u32> = (0..n as u32).filter(|&i| !excluded[i as usize]).collect();
    if ranked.is_empty() {
        return Err(Error::Argument(format!("user {user} has no candidate items")));
    }
    if let Some(&i) = ranked.iter().find(|&&i| !scores[i as usize].is_finite()) {
        return Err(Error::Numerical {
            block: "evaluation scores".into(),
            detail: format!("user {user}, item {i}: {}", scores[i as usize]),
        });
    }
    ranked.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    let mut is_pos = vec![false; n];
    for &p in positives {
        if let Some(slot) = is_pos.get_mut(p as usize) {
            *slot = true;
        }
    }
    let relevance = ranked.iter().map(|&i| is_pos[i as usize]).collect();
    Ok(RankingResult {
        user,
        ranked_items: ranked,
        relevance,
    })
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("cut-off k must be at least 1".into()));
    }
    Ok(())
}

/// DCG of the top `k` positions over the ideal DCG of `min(|V⁺|, k)` hits.
/// Zero when the user has no relevant items.
pub fn ndcg_at_k(r: &RankingResult, k: usize) -> Result<f64> {
    check_k(k)?;
    let n_rel = r.num_relevant();
    if n_rel == 0 {
        return Ok(0.0);
    }
    let dcg: f64 = r
        .relevance
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &rel)| rel)
        .map(|(pos, _)| 1.0 / (pos as f64 + 2.0).log2())
        .sum();
    Ok(dcg / ideal_dcg(n_rel.min(k)))
}

/// NDCG over the whole ranking.
pub fn ndcg(r: &RankingResult) -> f64 {
    ndcg_at_k(r, r.relevance.len().max(1)).expect("k is positive")
}

/// Hits in the top `k` over `min(|V⁺|, k)`.
pub fn recall_at_k(r: &RankingResult, k: usize) -> Result<f64> {
    check_k(k)?;
    let n_rel = r.num_relevant();
    if n_rel == 0 {
        return Ok(0.0);
    }
    let hits = r.relevance.iter().take(k).filter(|&&rel| rel).count();
    Ok(hits as f64 / n_rel.min(k) as f64)
}

/// Mean over relevant items of (relevant items at or above it) / position.
pub fn average_precision(r: &RankingResult) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &rel) in r.relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: u64,
    /// Aligned with [`MetricReport::k`].
    pub ndcg: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
    pub ndcg_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub part: String,
    pub k: Vec<usize>,
    pub ndcg: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub ap: f64,
    pub ndcg_full: f64,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub config_hash: Option<String>,
    pub per_user: Vec<UserMetrics>,
}

impl MetricReport {
    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k).copied()
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    /// Macro-averages of `per_user` in table order.
    fn from_users(part: &str, ks: &[usize], per_user: Vec<UserMetrics>, skipped: usize) -> Self {
        let n = per_user.len();
        let mean = |f: &dyn Fn(&UserMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_user.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let ndcg = ks
            .iter()
            .enumerate()
            .map(|(j, &k)| (k, mean(&|u: &UserMetrics| u.ndcg[j])))
            .collect();
        let recall = ks
            .iter()
            .enumerate()
            .map(|(j, &k)| (k, mean(&|u: &UserMetrics| u.recall[j])))
            .collect();
        Self {
            part: part.to_string(),
            k: ks.to_vec(),
            ndcg,
            recall,
            ap: mean(&|u: &UserMetrics| u.ap),
            ndcg_full: mean(&|u: &UserMetrics| u.ndcg_full),
            users_evaluated: n,
            users_skipped: skipped,
            config_hash: None,
            per_user,
        }
    }
}

/// One user to evaluate. `history` is what the model may see (training or
/// fold-in items); `positives` are only used to mark relevance.
#[derive(Debug, Clone)]
pub struct EvalCase<'a> {
    pub user: u32,
    pub label: u64,
    pub history: &'a [u32],
    pub positives: &'a [u32],
}

/// Ranks every case and averages. `user_vec` is given the user index and
/// its history only, never the held-out items.
pub fn evaluate_cases<F>(
    part: &str,
    cases: &[EvalCase],
    user_vec: F,
    items: ArrayView2<f64>,
    ks: &[usize],
) -> Result<MetricReport>
where
    F: Fn(u32, &[u32]) -> Result<Array1<f64>> + Sync,
{
    if ks.is_empty() {
        return Err(Error::Argument("need at least one cut-off".into()));
    }
    for &k in ks {
        check_k(k)?;
    }
    let rows: Vec<Option<UserMetrics>> = cases
        .par_iter()
        .map(|c| {
            if c.positives.is_empty() {
                return Ok(None);
            }
            let v = user_vec(c.user, c.history)?;
            let r = rank_all_items(c.user, v.view(), items, c.history, c.positives)?;
            Ok(Some(UserMetrics {
                user: c.label,
                ndcg: ks.iter().map(|&k| ndcg_at_k(&r, k)).collect::<Result<_>>()?,
                recall: ks.iter().map(|&k| recall_at_k(&r, k)).collect::<Result<_>>()?,
                ap: average_precision(&r),
                ndcg_full: ndcg(&r),
            }))
        })
        .collect::<Result<_>>()?;
    let skipped = rows.iter().filter(|r| r.is_none()).count();
    let per_user: Vec<UserMetrics> = rows.into_iter().flatten().collect();
    if skipped > 0 {
        log::info!("{part}: {skipped} users without held-out items skipped");
    }
    Ok(MetricReport::from_users(part, ks, per_user, skipped))
}

#[derive(Debug, Clone, Copy)]
pub enum SplitRef<'a> {
    Transductive(&'a TransductiveSplit),
    Inductive(&'a InductiveSplit),
}

impl SplitRef<'_> {
    pub fn mode(&self) -> Mode {
        match self {
            SplitRef::Transductive(_) => Mode::Transductive,
            SplitRef::Inductive(_) => Mode::Inductive,
        }
    }
}

/// Full-ranking report on the validation or test part. `g` is the training
/// graph the model was fit on.
pub fn evaluate(split: SplitRef, part: Part, model: &Model, g: &BipartiteGraph, ks: &[usize]) -> Result<MetricReport> {
    if split.mode() != model.config.mode {
        return Err(Error::Config(format!(
            "{:?} split cannot be evaluated with a {:?} model",
            split.mode(),
            model.config.mode
        )));
    }
    if !matches!(part, Part::Validation | Part::Test) {
        return Err(Error::Argument(format!("cannot evaluate on the {} part", part.as_str())));
    }
    let emb = model.embed(g)?;
    match split {
        SplitRef::Transductive(s) => {
            let train = s.train.items_by_user();
            let held = match part {
                Part::Validation => s.validation.items_by_user(),
                _ => s.test.items_by_user(),
            };
            let labels = s.train.user_labels();
            let cases: Vec<EvalCase> = (0..train.len())
                .map(|u| EvalCase {
                    user: u as u32,
                    label: labels[u],
                    history: &train[u],
                    positives: &held[u],
                })
                .collect();
            let users = &emb.pooled.users;
            evaluate_cases(
                part.as_str(),
                &cases,
                |u, _| Ok(users.row(u as usize).to_owned()),
                emb.pooled.items.view(),
                ks,
            )
        }
        SplitRef::Inductive(s) => {
            let held = match part {
                Part::Validation => &s.val_users,
                _ => &s.test_users,
            };
            let cases: Vec<EvalCase> = held
                .iter()
                .map(|h| EvalCase {
                    user: h.user,
                    label: h.label,
                    history: &h.fold_in,
                    positives: &h.fold_out,
                })
                .collect();
            let cfg = model.config;
            evaluate_cases(
                part.as_str(),
                &cases,
                |_, fold_in| infer_user(fold_in, &emb.layers, g, &cfg),
                emb.pooled.items.view(),
                ks,
            )
        }
    }
}
