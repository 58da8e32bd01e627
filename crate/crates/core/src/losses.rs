//! Smooth ranking losses over one user's sampled positives and negatives.
//!
//! The rank of a positive `p` is `1 + Σ_j H(s_j − s_p)`; replacing the step
//! `H` by a temperature sigmoid gives a differentiable rank, and plugging it
//! into NDCG, AP or recall@k gives the losses below. Each loss comes with an
//! exact gradient on the batch scores.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic function of an already-scaled argument, without overflow.
#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `1 / (1 + exp(-x / tau))`, saturating to exactly 0 or 1 for large `|x/tau|`.
pub fn sigmoid_temp(x: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    Ok(sigmoid(x / tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Ndcg,
    Ap,
    RecallAtK,
    Bpr,
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ndcg" | "item" => Ok(Self::Ndcg),
            "ap" => Ok(Self::Ap),
            "recall_at_k" | "recall" | "r@k" => Ok(Self::RecallAtK),
            "bpr" => Ok(Self::Bpr),
            other => Err(Error::Argument(format!("unknown loss variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub tau: f64,
    /// Temperature of the outer sigmoid in the recall loss; `None` reuses `tau`.
    pub tau_star: Option<f64>,
    pub recall_levels: Vec<usize>,
    /// Rank positives against negatives only, ignoring the other positives.
    /// Used by the NDCG and recall losses; AP always needs both.
    pub negatives_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Ndcg,
            tau: 1.0,
            tau_star: None,
            recall_levels: vec![10, 20],
            negatives_only: false,
        }
    }
}

impl LossConfig {
    pub fn tau_star(&self) -> f64 {
        self.tau_star.unwrap_or(self.tau)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.tau_star() > 0.0) {
            return Err(Error::Config(format!(
                "tau_star must be positive, got {}",
                self.tau_star()
            )));
        }
        if self.variant == LossVariant::RecallAtK {
            if self.recall_levels.is_empty() || self.recall_levels.contains(&0) {
                return Err(Error::Config(
                    "recall loss needs a non-empty set of positive cut-offs".into(),
                ));
            }
            if self.recall_levels.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("recall cut-offs must be strictly ascending".into()));
            }
        }
        Ok(())
    }
}

/// Scores of one user's sampled positives and negatives.
#[derive(Debug, Clone, Copy)]
pub struct BatchScores<'a> {
    pub pos: &'a [f64],
    pub neg: &'a [f64],
}

impl<'a> BatchScores<'a> {
    pub fn new(pos: &'a [f64], neg: &'a [f64]) -> Result<Self> {
        if pos.is_empty() {
            return Err(Error::Argument("batch needs at least one positive".into()));
        }
        if pos.iter().chain(neg).any(|s| !s.is_finite()) {
            return Err(Error::Numerical {
                block: "batch scores".into(),
                detail: "non-finite score".into(),
            });
        }
        Ok(Self { pos, neg })
    }
}

/// `1 + Σ_{j ≠ p} σ(s_j − s_p; τ)` over positives and negatives.
pub fn smooth_rank(p: usize, batch: &BatchScores, tau: f64) -> f64 {
    smooth_rank_pos(p, batch, tau) + smooth_rank_neg_part(p, batch, tau)
}

/// Smooth rank among the positives only. Self term excluded.
pub fn smooth_rank_pos(p: usize, batch: &BatchScores, tau: f64) -> f64 {
    let sp = batch.pos[p];
    1.0 + batch
        .pos
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != p)
        .map(|(_, &sj)| sigmoid((sj - sp) / tau))
        .sum::<f64>()
}

fn smooth_rank_neg_part(p: usize, batch: &BatchScores, tau: f64) -> f64 {
    let sp = batch.pos[p];
    batch.neg.iter().map(|&sj| sigmoid((sj - sp) / tau)).sum()
}

fn rank_for(p: usize, batch: &BatchScores, tau: f64, negatives_only: bool) -> f64 {
    if negatives_only {
        1.0 + smooth_rank_neg_part(p, batch, tau)
    } else {
        smooth_rank(p, batch, tau)
    }
}

/// Ideal DCG of `n` relevant items, untruncated.
pub fn ideal_dcg(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / (1.0 + i as f64).log2()).sum()
}

/// Smooth NDCG loss `1 − DCG_s / iDCG` with the exact iDCG.
pub fn loss_ndcg(batch: &BatchScores, tau: f64) -> f64 {
    ndcg_with(batch, tau, false)
}

fn ndcg_with(batch: &BatchScores, tau: f64, negatives_only: bool) -> f64 {
    let dcg: f64 = (0..batch.pos.len())
        .map(|p| 1.0 / (1.0 + rank_for(p, batch, tau, negatives_only)).log2())
        .sum();
    1.0 - dcg / ideal_dcg(batch.pos.len())
}

/// Smooth AP loss `1 − mean_p rank⁺_s(p) / rank_s(p)`.
pub fn loss_ap(batch: &BatchScores, tau: f64) -> f64 {
    let n = batch.pos.len() as f64;
    let sum: f64 = (0..batch.pos.len())
        .map(|p| smooth_rank_pos(p, batch, tau) / smooth_rank(p, batch, tau))
        .sum();
    1.0 - sum / n
}

/// Smooth multi-level recall loss.
pub fn loss_recall_at_k(batch: &BatchScores, tau: f64, tau_star: f64, levels: &[usize]) -> f64 {
    recall_with(batch, tau, tau_star, levels, false)
}

fn recall_with(batch: &BatchScores, tau: f64, tau_star: f64, levels: &[usize], negatives_only: bool) -> f64 {
    let ranks: Vec<f64> = (0..batch.pos.len())
        .map(|p| rank_for(p, batch, tau, negatives_only))
        .collect();
    let n = batch.pos.len();
    let mut total = 0.0;
    for &k in levels {
        let denom = n.min(k) as f64;
        let hits: f64 = ranks.iter().map(|&r| sigmoid((k as f64 - r) / tau_star)).sum();
        total += hits / denom;
    }
    1.0 - total / levels.len() as f64
}

/// `−ln σ(s_p − s_j)`.
pub fn loss_bpr(s_p: f64, s_j: f64) -> f64 {
    softplus(s_j - s_p)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean BPR loss over every (positive, negative) pair of the batch.
pub fn loss_bpr_batch(batch: &BatchScores) -> f64 {
    if batch.neg.is_empty() {
        return 0.0;
    }
    let pairs = (batch.pos.len() * batch.neg.len()) as f64;
    batch
        .pos
        .iter()
        .flat_map(|&sp| batch.neg.iter().map(move |&sj| loss_bpr(sp, sj)))
        .sum::<f64>()
        / pairs
}

/// Loss value for the configured variant.
pub fn loss_value(cfg: &LossConfig, batch: &BatchScores) -> f64 {
    match cfg.variant {
        LossVariant::Ndcg => ndcg_with(batch, cfg.tau, cfg.negatives_only),
        LossVariant::Ap => loss_ap(batch, cfg.tau),
        LossVariant::RecallAtK => {
            recall_with(batch, cfg.tau, cfg.tau_star(), &cfg.recall_levels, cfg.negatives_only)
        }
        LossVariant::Bpr => loss_bpr_batch(batch),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

/// Accumulates `weight · ∂rank(p)/∂s` for a rank over `pos` (excluding `p`)
/// and optionally `neg`.
fn push_rank_grad(
    p: usize,
    batch: &BatchScores,
    tau: f64,
    weight: f64,
    include_pos: bool,
    include_neg: bool,
    gpos: &mut [f64],
    gneg: &mut [f64],
) {
    if weight == 0.0 {
        return;
    }
    let sp = batch.pos[p];
    let mut self_term = 0.0;
    if include_pos {
        for (j, &sj) in batch.pos.iter().enumerate() {
            if j == p {
                continue;
            }
            let s = sigmoid((sj - sp) / tau);
            let d = weight * s * (1.0 - s) / tau;
            gpos[j] += d;
            self_term += d;
        }
    }
    if include_neg {
        for (j, &sj) in batch.neg.iter().enumerate() {
            let s = sigmoid((sj - sp) / tau);
            let d = weight * s * (1.0 - s) / tau;
            gneg[j] += d;
            self_term += d;
        }
    }
    gpos[p] -= self_term;
}

/// Exact gradient of the configured loss with respect to every batch score.
pub fn loss_grad(cfg: &LossConfig, batch: &BatchScores) -> LossGrad {
    let n = batch.pos.len();
    let mut gpos = vec![0.0; n];
    let mut gneg = vec![0.0; batch.neg.len()];
    let tau = cfg.tau;
    let ln2 = std::f64::consts::LN_2;
    let value = match cfg.variant {
        LossVariant::Ndcg => {
            let idcg = ideal_dcg(n);
            let mut dcg = 0.0;
            for p in 0..n {
                let r = rank_for(p, batch, tau, cfg.negatives_only);
                let lg = (1.0 + r).log2();
                dcg += 1.0 / lg;
                // d/dr [−1/(iDCG·log2(1+r))]
                let w = 1.0 / (idcg * (1.0 + r) * ln2 * lg * lg);
                push_rank_grad(p, batch, tau, w, !cfg.negatives_only, true, &mut gpos, &mut gneg);
            }
            1.0 - dcg / idcg
        }
        LossVariant::Ap => {
            let nf = n as f64;
            let mut sum = 0.0;
            for p in 0..n {
                let rp = smooth_rank_pos(p, batch, tau);
                let r = smooth_rank(p, batch, tau);
                sum += rp / r;
                // L contains −rp/(n·r)
                let w_rank = rp / (nf * r * r);
                let w_pos = -1.0 / (nf * r);
                push_rank_grad(p, batch, tau, w_rank, true, true, &mut gpos, &mut gneg);
                push_rank_grad(p, batch, tau, w_pos, true, false, &mut gpos, &mut gneg);
            }
            1.0 - sum / nf
        }
        LossVariant::RecallAtK => {
            let ts = cfg.tau_star();
            let m = cfg.recall_levels.len() as f64;
            let mut total = 0.0;
            for p in 0..n {
                let r = rank_for(p, batch, tau, cfg.negatives_only);
                let mut w = 0.0;
                for &k in &cfg.recall_levels {
                    let denom = n.min(k) as f64;
                    let s = sigmoid((k as f64 - r) / ts);
                    total += s / denom;
                    // d/dr [−σ((k − r)/τ*)] / (m·denom)
                    w += s * (1.0 - s) / (ts * denom * m);
                }
                push_rank_grad(p, batch, tau, w, !cfg.negatives_only, true, &mut gpos, &mut gneg);
            }
            1.0 - total / m
        }
        LossVariant::Bpr => {
            if batch.neg.is_empty() {
                0.0
            } else {
                let pairs = (n * batch.neg.len()) as f64;
                let mut v = 0.0;
                for (p, &sp) in batch.pos.iter().enumerate() {
                    for (j, &sj) in batch.neg.iter().enumerate() {
                        v += loss_bpr(sp, sj);
                        // d/dx softplus(x) = σ(x), x = s_j − s_p
                        let s = sigmoid(sj - sp) / pairs;
                        gneg[j] += s;
                        gpos[p] -= s;
                    }
                }
                v / pairs
            }
        }
    };
    LossGrad {
        value,
        pos: gpos,
        neg: gneg,
    }
}
