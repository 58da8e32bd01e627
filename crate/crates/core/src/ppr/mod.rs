//! Personalized PageRank on the user–item graph and the negative samplers
//! derived from it.

mod cache;
mod sampler;

pub use cache::{
    load_cache, precompute, precompute_and_store, read_cache, samplers_from_records, truncate_entries,
    write_cache, CacheHeader, CacheRecord,
};
pub use sampler::{build_sampler, sample_negatives, NegativeSampler, UniformSampler};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BipartiteGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PprConfig {
    /// Teleport probability back to the source user.
    pub alpha: f64,
    /// Stop once the L1 change between iterates drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Item entries kept per user in the cache; `None` keeps all.
    pub top_t: Option<usize>,
    /// Multiplier on the mass before the softmax.
    pub scale: f64,
}

impl Default for PprConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            tol: 1e-9,
            max_iter: 1000,
            top_t: Some(1000),
            scale: 1.0,
        }
    }
}

impl PprConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config(format!("scale must be finite, got {}", self.scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Node {
    User(u32),
    Item(u32),
}

/// Stationary mass of a random walk restarting at `user`. Only non-zero
/// entries are kept, users before items, each in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct PprVector {
    pub user: u32,
    pub mass: Vec<(Node, f64)>,
    pub iterations: usize,
    /// L1 change of the final iteration.
    pub residual: f64,
    pub converged: bool,
}

impl PprVector {
    pub fn get(&self, node: Node) -> f64 {
        self.mass
            .binary_search_by(|(n, _)| n.cmp(&node))
            .map_or(0.0, |k| self.mass[k].1)
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().map(|(_, m)| m).sum()
    }

    pub fn item_mass(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.mass.iter().filter_map(|&(n, m)| match n {
            Node::Item(i) => Some((i, m)),
            Node::User(_) => None,
        })
    }
}

/// Power iteration `p ← α·e_u + (1 − α)·W·p` where `W` moves mass from a
/// node to each neighbour uniformly.
pub fn compute_ppr(g: &BipartiteGraph, user: u32, cfg: &PprConfig) -> Result<PprVector> {
    cfg.validate()?;
    let u = user as usize;
    if u >= g.num_users() {
        return Err(Error::Ppr(format!("user {user} outside {} users", g.num_users())));
    }
    if g.user_degree(u) == 0 {
        return Err(Error::Ppr(format!("user {user} has no edges")));
    }
    let (nu, ni) = (g.num_users(), g.num_items());
    let damp = 1.0 - cfg.alpha;
    let mut pu = vec![0.0; nu];
    let mut pi = vec![0.0; ni];
    pu[u] = 1.0;
    let mut next_u = vec![0.0; nu];
    let mut next_i = vec![0.0; ni];
    // outgoing share per unit of mass, precomputed per node
    let inv_udeg: Vec<f64> = (0..nu)
        .map(|v| g.user_degree(v).max(1) as f64)
        .map(|d| 1.0 / d)
        .collect();
    let inv_ideg: Vec<f64> = (0..ni)
        .map(|i| g.item_degree(i).max(1) as f64)
        .map(|d| 1.0 / d)
        .collect();

    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        for (i, out) in next_i.iter_mut().enumerate() {
            let s: f64 = g.item_users(i).iter().map(|&v| pu[v as usize] * inv_udeg[v as usize]).sum();
            *out = damp * s;
        }
        for (v, out) in next_u.iter_mut().enumerate() {
            let s: f64 = g.user_items(v).iter().map(|&i| pi[i as usize] * inv_ideg[i as usize]).sum();
            *out = damp * s;
        }
        next_u[u] += cfg.alpha;
        residual = l1_diff(&pu, &next_u) + l1_diff(&pi, &next_i);
        std::mem::swap(&mut pu, &mut next_u);
        std::mem::swap(&mut pi, &mut next_i);
        debug_assert!((pu.iter().sum::<f64>() + pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        if residual < cfg.tol {
            break;
        }
    }
    let converged = residual < cfg.tol;
    if !converged {
        log::warn!(
            "ppr for user {user} stopped after {iterations} iterations with residual {residual:.3e} (tol {:.3e})",
            cfg.tol
        );
    }
    let mass = pu
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(v, &m)| (Node::User(v as u32), m))
        .chain(
            pi.iter()
                .enumerate()
                .filter(|(_, &m)| m > 0.0)
                .map(|(i, &m)| (Node::Item(i as u32), m)),
        )
        .collect();
    Ok(PprVector {
        user,
        mass,
        iterations,
        residual,
        converged,
    })
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
