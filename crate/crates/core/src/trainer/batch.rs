use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::BipartiteGraph;
use crate::ppr::{NegativeSampler, UniformSampler};

/// Negative sampler of every training user, indexed by graph user id.
#[derive(Debug, Clone)]
pub enum NegativeSource {
    Uniform(Vec<Option<UniformSampler>>),
    Ppr(Vec<Option<NegativeSampler>>),
}

impl NegativeSource {
    pub fn uniform(g: &BipartiteGraph) -> Result<Self> {
        let samplers = (0..g.num_users())
            .map(|u| {
                let pos = g.user_items(u);
                if pos.is_empty() {
                    Ok(None)
                } else {
                    UniformSampler::new(pos, g.num_items()).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self::Uniform(samplers))
    }

    pub fn ppr(g: &BipartiteGraph, samplers: Vec<NegativeSampler>) -> Result<Self> {
        let mut slots: Vec<Option<NegativeSampler>> = vec![None; g.num_users()];
        for s in samplers {
            let slot = slots
                .get_mut(s.user() as usize)
                .ok_or_else(|| Error::Cache(format!("sampler for unknown user {}", s.user())))?;
            *slot = Some(s);
        }
        Ok(Self::Ppr(slots))
    }

    fn draw<R: Rng + ?Sized>(&self, user: u32, n: usize, rng: &mut R) -> Result<Vec<u32>> {
        let missing = || Error::Config(format!("no negative sampler for user {user}"));
        match self {
            Self::Uniform(s) => Ok(s.get(user as usize).and_then(Option::as_ref).ok_or_else(missing)?.sample(n, rng)),
            Self::Ppr(s) => Ok(s.get(user as usize).and_then(Option::as_ref).ok_or_else(missing)?.sample(n, rng)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserBatch {
    pub user: u32,
    pub positives: Vec<u32>,
    pub negatives: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBatch {
    pub users: Vec<UserBatch>,
    /// Requested users that had no training items.
    pub skipped: usize,
}

/// Samples `n_pos` training items (without replacement when the user has
/// enough) and `n_neg` negatives for each user.
pub fn build_batch<R: Rng + ?Sized>(
    users: &[u32],
    g: &BipartiteGraph,
    negatives: &NegativeSource,
    n_pos: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let mut batch = TrainingBatch::default();
    for &u in users {
        let items = g.user_items(u as usize);
        if items.is_empty() {
            batch.skipped += 1;
            continue;
        }
        let positives = if items.len() >= n_pos {
            index::sample(rng, items.len(), n_pos)
                .into_iter()
                .map(|k| items[k])
                .collect()
        } else {
            (0..n_pos).map(|_| items[rng.random_range(0..items.len())]).collect()
        };
        let negatives = negatives.draw(u, n_neg, rng)?;
        batch.users.push(UserBatch {
            user: u,
            positives,
            negatives,
        });
    }
    if batch.skipped > 0 {
        log::debug!("batch skipped {} users without training items", batch.skipped);
    }
    Ok(batch)
}
