use rand::distr::Distribution;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;

use super::PprVector;
use crate::error::{Error, Result};

/// Softmax distribution over one user's non-positive items.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    user: u32,
    candidates: Vec<u32>,
    probs: Vec<f64>,
    alias: WeightedAliasIndex<f64>,
}

impl PartialEq for NegativeSampler {
    fn eq(&self, other: &Self) -> bool {
        // the alias table is a pure function of `probs`
        self.user == other.user && self.candidates == other.candidates && self.probs == other.probs
    }
}

impl NegativeSampler {
    /// `entries` are `(item, mass)` pairs; items absent from it get mass 0.
    /// Positives listed in `entries` are ignored.
    pub fn from_mass(
        user: u32,
        entries: &[(u32, f64)],
        positives: &[u32],
        num_items: usize,
        scale: f64,
    ) -> Result<Self> {
        let mut is_pos = vec![false; num_items];
        for &p in positives {
            let slot = is_pos
                .get_mut(p as usize)
                .ok_or_else(|| Error::Argument(format!("positive item {p} outside {num_items} items")))?;
            *slot = true;
        }
        let mut mass = vec![0.0; num_items];
        for &(i, m) in entries {
            if i as usize >= num_items || !(m >= 0.0 && m.is_finite()) {
                return Err(Error::Argument(format!("bad mass entry ({i}, {m}) for user {user}")));
            }
            mass[i as usize] = m;
        }
        let candidates: Vec<u32> = (0..num_items as u32).filter(|&i| !is_pos[i as usize]).collect();
        if candidates.is_empty() {
            return Err(Error::Ppr(format!("user {user} has no negative candidates")));
        }
        let logits: Vec<f64> = candidates.iter().map(|&i| scale * mass[i as usize]).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|&z| (z - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        if probs.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Numerical {
                block: "negative sampler".into(),
                detail: format!("user {user}: scale {scale} underflows some candidate probabilities"),
            });
        }
        let alias = WeightedAliasIndex::new(probs.clone())
            .map_err(|e| Error::Ppr(format!("alias table for user {user}: {e}")))?;
        Ok(Self {
            user,
            candidates,
            probs,
            alias,
        })
    }

    pub fn user(&self) -> u32 {
        self.user
    }

    /// Sorted candidate items.
    pub fn candidates(&self) -> &[u32] {
        &self.candidates
    }

    /// Probability of each candidate, aligned with [`Self::candidates`].
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob_of(&self, item: u32) -> f64 {
        self.candidates.binary_search(&item).map_or(0.0, |k| self.probs[k])
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<u32> {
        (0..n).map(|_| self.candidates[self.alias.sample(rng)]).collect()
    }
}

/// Sampler over every item except `positives`, weighted by `exp(scale · mass)`.
pub fn build_sampler(ppr: &PprVector, positives: &[u32], num_items: usize, scale: f64) -> Result<NegativeSampler> {
    let entries: Vec<(u32, f64)> = ppr.item_mass().collect();
    NegativeSampler::from_mass(ppr.user, &entries, positives, num_items, scale)
}

/// `n` independent draws with replacement.
pub fn sample_negatives<R: Rng + ?Sized>(s: &NegativeSampler, n: usize, rng: &mut R) -> Vec<u32> {
    s.sample(n, rng)
}

/// Uniform draws over the non-positive items by rejection.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformSampler {
    positives: Vec<u32>,
    num_items: usize,
}

impl UniformSampler {
    pub fn new(positives: &[u32], num_items: usize) -> Result<Self> {
        let mut positives = positives.to_vec();
        positives.sort_unstable();
        positives.dedup();
        if positives.last().is_some_and(|&p| p as usize >= num_items) {
            return Err(Error::Argument(format!("positive item outside {num_items} items")));
        }
        if positives.len() >= num_items {
            return Err(Error::Ppr("no negative candidates".into()));
        }
        Ok(Self { positives, num_items })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<u32> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let i = rng.random_range(0..self.num_items as u32);
            if self.positives.binary_search(&i).is_err() {
                out.push(i);
            }
        }
        out
    }
}
