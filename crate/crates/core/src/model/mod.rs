//! LightGCN-style propagation over the user–item graph.
//!
//! The only trainable parameters are the layer-0 embeddings. Propagation is
//! linear, so the backward pass is the same sparse operator applied to the
//! pooled score gradients (the normalised adjacency is symmetric).

mod adam;
mod checkpoint;
mod graph;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointHeader};
pub use graph::{build_graph, BipartiteGraph};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Users own trainable embeddings.
    Transductive,
    /// Users are represented only through message passing from their items.
    Inductive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub pooling: Pooling,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 3,
            pooling: Pooling::Mean,
            mode: Mode::Transductive,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be at least 1".into()));
        }
        if self.mode == Mode::Inductive && self.layers == 0 {
            return Err(Error::Config(
                "inductive mode needs at least one propagation layer".into(),
            ));
        }
        Ok(())
    }

    /// Per-layer pooling weights for users and items.
    pub fn layer_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.layers + 1;
        let item_w = match self.pooling {
            Pooling::Mean => vec![1.0 / n as f64; n],
            Pooling::Sum => vec![1.0; n],
        };
        let user_w = match self.mode {
            Mode::Transductive => item_w.clone(),
            Mode::Inductive => {
                let mut w = vec![0.0; n];
                let v = match self.pooling {
                    Pooling::Mean if self.layers > 0 => 1.0 / self.layers as f64,
                    Pooling::Mean => 0.0,
                    Pooling::Sum => 1.0,
                };
                w[1..].iter_mut().for_each(|x| *x = v);
                w
            }
        };
        (user_w, item_w)
    }
}

/// Dense per-node vectors for both sides of the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl EmbeddingTable {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            users: Array2::zeros((num_users, dim)),
            items: Array2::zeros((num_items, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.items.ncols()
    }

    fn scaled_add(&mut self, user_w: f64, item_w: f64, other: &EmbeddingTable) {
        self.users.scaled_add(user_w, &other.users);
        self.items.scaled_add(item_w, &other.items);
    }
}

/// Trainable layer-0 embeddings. `users` is `None` in inductive mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub users: Option<Array2<f64>>,
    pub items: Array2<f64>,
}

impl Params {
    /// Gaussian initialisation with the given standard deviation.
    pub fn init(cfg: &ModelConfig, num_users: usize, num_items: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let items = Array2::from_shape_simple_fn((num_items, cfg.dim), || normal.sample(&mut rng));
        let users = match cfg.mode {
            Mode::Transductive => Some(Array2::from_shape_simple_fn((num_users, cfg.dim), || {
                normal.sample(&mut rng)
            })),
            Mode::Inductive => None,
        };
        Self { users, items }
    }

    pub fn dim(&self) -> usize {
        self.items.ncols()
    }

    /// Rounds every entry to the nearest `f32`, matching checkpoint precision.
    pub fn rounded_to_f32(&self) -> Self {
        let r = |a: &Array2<f64>| a.mapv(|x| x as f32 as f64);
        Self {
            users: self.users.as_ref().map(r),
            items: r(&self.items),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.items.iter().all(|x| x.is_finite())
            && self
                .users
                .as_ref()
                .is_none_or(|u| u.iter().all(|x| x.is_finite()))
    }

    pub fn norms(&self) -> (Option<f64>, f64) {
        let n = |a: &Array2<f64>| a.iter().map(|x| x * x).sum::<f64>().sqrt();
        (self.users.as_ref().map(n), n(&self.items))
    }
}

/// Gradients on the trainable parameters; `users` mirrors [`Params::users`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub users: Option<Array2<f64>>,
    pub items: Array2<f64>,
}

fn layer_zero(g: &BipartiteGraph, params: &Params) -> Result<EmbeddingTable> {
    let dim = params.dim();
    if params.items.nrows() != g.num_items() {
        return Err(Error::Shape(format!(
            "item table has {} rows, graph has {} items",
            params.items.nrows(),
            g.num_items()
        )));
    }
    let users = match &params.users {
        Some(u) => {
            if u.dim() != (g.num_users(), dim) {
                return Err(Error::Shape(format!(
                    "user table is {:?}, expected ({}, {dim})",
                    u.dim(),
                    g.num_users()
                )));
            }
            u.clone()
        }
        None => Array2::zeros((g.num_users(), dim)),
    };
    Ok(EmbeddingTable {
        users,
        items: params.items.clone(),
    })
}

fn propagation_step(g: &BipartiteGraph, prev: &EmbeddingTable) -> EmbeddingTable {
    let mut next = EmbeddingTable::zeros(g.num_users(), g.num_items(), prev.dim());
    g.gather_to_users(&prev.items, &mut next.users);
    g.gather_to_items(&prev.users, &mut next.items);
    next
}

/// Returns `layers + 1` tables; index 0 is the input (zero users when
/// inductive).
pub fn propagate(g: &BipartiteGraph, params: &Params, layers: usize) -> Result<Vec<EmbeddingTable>> {
    let mut out = vec![layer_zero(g, params)?];
    for k in 0..layers {
        let next = propagation_step(g, &out[k]);
        out.push(next);
    }
    Ok(out)
}

/// Weighted combination of the layer stack according to `cfg`.
pub fn pool(layers: &[EmbeddingTable], cfg: &ModelConfig) -> Result<EmbeddingTable> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Argument("cannot pool an empty layer list".into()))?;
    let cfg = ModelConfig {
        layers: layers.len() - 1,
        ..*cfg
    };
    let (user_w, item_w) = cfg.layer_weights();
    let mut out = EmbeddingTable::zeros(first.users.nrows(), first.items.nrows(), first.dim());
    for (k, layer) in layers.iter().enumerate() {
        out.scaled_add(user_w[k], item_w[k], layer);
    }
    Ok(out)
}

/// Dot product of `user_row` with every row of `item_rows`.
pub fn score(user_row: ArrayView1<f64>, item_rows: ArrayView2<f64>) -> Result<Array1<f64>> {
    if user_row.len() != item_rows.ncols() {
        return Err(Error::Shape(format!(
            "user vector has {} entries, items have {}",
            user_row.len(),
            item_rows.ncols()
        )));
    }
    Ok(item_rows.dot(&user_row))
}

/// Embeds an unseen user from its fold-in items, as a node attached to them
/// with degree `|fold_in|`. Item degrees are those of the training graph, so
/// the new user does not perturb item representations.
pub fn infer_user(
    fold_in: &[u32],
    layers: &[EmbeddingTable],
    g: &BipartiteGraph,
    cfg: &ModelConfig,
) -> Result<Array1<f64>> {
    if fold_in.is_empty() {
        return Err(Error::Inference("fold-in set is empty".into()));
    }
    let first = layers
        .first()
        .ok_or_else(|| Error::State("no propagated layers available".into()))?;
    let dim = first.dim();
    let n = fold_in.len() as f64;
    let mut coeffs = Vec::with_capacity(fold_in.len());
    for &i in fold_in {
        if i as usize >= g.num_items() {
            return Err(Error::Inference(format!("fold-in item {i} is not in the training graph")));
        }
        let deg = g.item_degree(i as usize);
        coeffs.push(if deg == 0 { 0.0 } else { 1.0 / (n * deg as f64).sqrt() });
    }
    let pool_cfg = ModelConfig {
        layers: layers.len() - 1,
        mode: Mode::Inductive,
        ..*cfg
    };
    let (user_w, _) = pool_cfg.layer_weights();
    let mut out = Array1::zeros(dim);
    for k in 1..layers.len() {
        if user_w[k] == 0.0 {
            continue;
        }
        let prev = &layers[k - 1].items;
        let mut h = Array1::zeros(dim);
        for (&i, &c) in fold_in.iter().zip(&coeffs) {
            h.scaled_add(c, &prev.row(i as usize));
        }
        out.scaled_add(user_w[k], &h);
    }
    Ok(out)
}

/// Transposed propagation: maps gradients on the pooled table to gradients on
/// the layer-0 inputs.
fn backpropagate(g: &BipartiteGraph, cfg: &ModelConfig, pooled_grad: &EmbeddingTable) -> EmbeddingTable {
    let (user_w, item_w) = cfg.layer_weights();
    let weighted = |k: usize| EmbeddingTable {
        users: &pooled_grad.users * user_w[k],
        items: &pooled_grad.items * item_w[k],
    };
    let mut acc = weighted(cfg.layers);
    for k in (0..cfg.layers).rev() {
        let mut next = propagation_step(g, &acc);
        next.scaled_add(user_w[k], item_w[k], pooled_grad);
        acc = next;
    }
    acc
}

/// Output of a forward pass retained for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<EmbeddingTable>,
    pub pooled: EmbeddingTable,
}

/// Graph + configuration bound together; holds the cache between forward and
/// backward.
#[derive(Debug)]
pub struct Propagator<'g> {
    graph: &'g BipartiteGraph,
    cfg: ModelConfig,
    cache: Option<ForwardCache>,
}

impl<'g> Propagator<'g> {
    pub fn new(graph: &'g BipartiteGraph, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            graph,
            cfg,
            cache: None,
        })
    }

    pub fn graph(&self) -> &BipartiteGraph {
        self.graph
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&mut self, params: &Params) -> Result<&ForwardCache> {
        self.check_mode(params)?;
        let layers = propagate(self.graph, params, self.cfg.layers)?;
        let pooled = pool(&layers, &self.cfg)?;
        self.cache = Some(ForwardCache { layers, pooled });
        Ok(self.cache.as_ref().expect("just stored"))
    }

    pub fn cache(&self) -> Option<&ForwardCache> {
        self.cache.as_ref()
    }

    /// Consumes the forward cache.
    pub fn backward(&mut self, pooled_grad: &EmbeddingTable) -> Result<Gradients> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a forward pass".into()))?;
        if pooled_grad.users.dim() != cache.pooled.users.dim()
            || pooled_grad.items.dim() != cache.pooled.items.dim()
        {
            return Err(Error::Shape("pooled gradient does not match forward output".into()));
        }
        let input = backpropagate(self.graph, &self.cfg, pooled_grad);
        Ok(Gradients {
            users: match self.cfg.mode {
                Mode::Transductive => Some(input.users),
                Mode::Inductive => None,
            },
            items: input.items,
        })
    }

    fn check_mode(&self, params: &Params) -> Result<()> {
        match (self.cfg.mode, &params.users) {
            (Mode::Transductive, None) => Err(Error::Config(
                "transductive model requires user embeddings".into(),
            )),
            (Mode::Inductive, Some(_)) => Err(Error::Config(
                "inductive model must not carry user embeddings".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// A trained model: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub seed: u64,
}

impl Model {
    /// Pooled embeddings and the per-layer stack (needed for fold-in
    /// inference).
    pub fn embed(&self, g: &BipartiteGraph) -> Result<ForwardCache> {
        let mut p = Propagator::new(g, self.config)?;
        p.forward(&self.params)?;
        Ok(p.cache.take().expect("forward stores cache"))
    }
}

/// Sum of squared entries per selected row, used by the L2 penalty.
pub(crate) fn add_row_decay(grad: &mut Array2<f64>, params: &Array2<f64>, rows: &[u32], coeff: f64) -> f64 {
    let mut penalty = 0.0;
    for &r in rows {
        let p = params.index_axis(Axis(0), r as usize);
        penalty += p.dot(&p);
        grad.row_mut(r as usize).scaled_add(coeff, &p);
    }
    0.5 * coeff * penalty
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(layers: usize, pooling: Pooling, mode: Mode) -> ModelConfig {
        ModelConfig {
            dim: 2,
            layers,
            pooling,
            mode,
        }
    }

    fn random_params(nu: usize, ni: usize, dim: usize, seed: u64, users: bool) -> Params {
        let c = ModelConfig {
            dim,
            layers: 1,
            pooling: Pooling::Mean,
            mode: if users { Mode::Transductive } else { Mode::Inductive },
        };
        Params::init(&c, nu, ni, 1.0, seed)
    }

    #[test]
    fn zero_layers_is_identity() {
        let g = BipartiteGraph::from_edges(2, 2, &[(0, 0), (1, 1)]).unwrap();
        let p = random_params(2, 2, 3, 1, true);
        let layers = propagate(&g, &p, 0).unwrap();
        assert_eq!(layers.len(), 1);
        assert_eq!(&layers[0].users, p.users.as_ref().unwrap());
        assert_eq!(layers[0].items, p.items);
    }

    #[test]
    fn single_edge_one_layer() {
        let g = BipartiteGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let p = Params {
            users: Some(array![[0.0, 0.0]]),
            items: array![[1.5, -2.0]],
        };
        let layers = propagate(&g, &p, 1).unwrap();
        assert_eq!(layers[1].users, array![[1.5, -2.0]]);
    }

    #[test]
    fn inductive_layer_zero_is_zero() {
        let g = BipartiteGraph::from_edges(2, 1, &[(0, 0), (1, 0)]).unwrap();
        let p = random_params(2, 1, 2, 3, false);
        let layers = propagate(&g, &p, 2).unwrap();
        assert!(layers[0].users.iter().all(|&x| x == 0.0));
        assert!(layers[1].items.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pool_mean_and_sum() {
        let x = EmbeddingTable {
            users: array![[1.0, 2.0]],
            items: array![[3.0, 4.0]],
        };
        let single = pool(std::slice::from_ref(&x), &cfg(0, Pooling::Mean, Mode::Transductive)).unwrap();
        assert_eq!(single, x);
        let three_x = EmbeddingTable {
            users: &x.users * 3.0,
            items: &x.items * 3.0,
        };
        let two = [x.clone(), three_x];
        let mean = pool(&two, &cfg(1, Pooling::Mean, Mode::Transductive)).unwrap();
        assert_eq!(mean.users, &x.users * 2.0);
        assert_eq!(mean.items, &x.items * 2.0);
        let sum = pool(&two, &cfg(1, Pooling::Sum, Mode::Transductive)).unwrap();
        assert_eq!(sum.items, &x.items * 4.0);
        assert!(matches!(
            pool(&[], &cfg(0, Pooling::Mean, Mode::Transductive)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn inductive_pool_skips_user_layer_zero() {
        // single edge, item embedding x; users get x at odd layers, 0 at even.
        let g = BipartiteGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let p = Params {
            users: None,
            items: array![[2.0, -4.0]],
        };
        let c = cfg(2, Pooling::Mean, Mode::Inductive);
        let pooled = pool(&propagate(&g, &p, 2).unwrap(), &c).unwrap();
        // users: (layer1 + layer2) / 2 = (x + 0) / 2
        assert_eq!(pooled.users, array![[1.0, -2.0]]);
        // items: (x + 0 + x) / 3
        let third = 2.0 / 3.0;
        assert!((pooled.items[[0, 0]] - 2.0 * third).abs() < 1e-15);
    }

    #[test]
    fn score_cases() {
        let s = score(array![1.0, 0.0].view(), array![[0.0, 1.0], [1.0, 0.0]].view()).unwrap();
        assert_eq!(s, array![0.0, 1.0]);
        let u = array![0.3, -1.2, 2.0];
        let items = array![[1.0, 2.0, 3.0], [-0.5, 0.25, 4.0]];
        let s = score(u.view(), items.view()).unwrap();
        for r in 0..2 {
            let mut oracle = 0.0;
            for c in 0..3 {
                oracle += u[c] * items[[r, c]];
            }
            assert!((s[r] - oracle).abs() < 1e-15);
        }
        assert!(score(array![1.0].view(), items.view()).is_err());
    }

    #[test]
    fn infer_user_cases() {
        let g = BipartiteGraph::from_edges(1, 2, &[(0, 0)]).unwrap();
        let p = Params {
            users: None,
            items: array![[1.0, 3.0], [5.0, 5.0]],
        };
        let c = cfg(1, Pooling::Mean, Mode::Inductive);
        let layers = propagate(&g, &p, 1).unwrap();
        let v = infer_user(&[0], &layers, &g, &c).unwrap();
        assert_eq!(v, array![1.0, 3.0]);
        assert!(matches!(infer_user(&[], &layers, &g, &c), Err(Error::Inference(_))));
        assert!(matches!(infer_user(&[9], &layers, &g, &c), Err(Error::Inference(_))));

        // two items with identical embeddings -> collinear
        let g2 = BipartiteGraph::from_edges(2, 2, &[(0, 0), (1, 1), (1, 0)]).unwrap();
        let p2 = Params {
            users: None,
            items: array![[0.5, -1.0], [0.5, -1.0]],
        };
        let layers = propagate(&g2, &p2, 1).unwrap();
        let v = infer_user(&[0, 1], &layers, &g2, &c).unwrap();
        assert!((v[0] * -1.0 - v[1] * 0.5).abs() < 1e-15);
        assert!(v[0] > 0.0);
    }

    #[test]
    fn infer_user_matches_training_user() {
        let edges = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2), (2, 3)];
        let g = BipartiteGraph::from_edges(3, 4, &edges).unwrap();
        let c = ModelConfig {
            dim: 3,
            layers: 3,
            pooling: Pooling::Mean,
            mode: Mode::Inductive,
        };
        let p = Params::init(&c, 3, 4, 1.0, 8);
        let layers = propagate(&g, &p, 3).unwrap();
        let pooled = pool(&layers, &c).unwrap();
        for u in 0..3 {
            let v = infer_user(g.user_items(u), &layers, &g, &c).unwrap();
            for d in 0..3 {
                assert!((v[d] - pooled.users[[u, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_requires_forward() {
        let g = BipartiteGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let c = cfg(1, Pooling::Mean, Mode::Transductive);
        let mut prop = Propagator::new(&g, c).unwrap();
        let grad = EmbeddingTable::zeros(1, 1, 2);
        assert!(matches!(prop.backward(&grad), Err(Error::State(_))));
    }

    #[test]
    fn mode_mismatch_rejected() {
        let g = BipartiteGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let mut prop = Propagator::new(&g, cfg(1, Pooling::Mean, Mode::Inductive)).unwrap();
        let p = random_params(1, 1, 2, 0, true);
        assert!(matches!(prop.forward(&p), Err(Error::Config(_))));
        assert!(Propagator::new(&g, cfg(0, Pooling::Mean, Mode::Inductive)).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = BipartiteGraph::from_edges(1, 2, &[(0, 0)]).unwrap();
        let p = random_params(1, 3, 2, 0, true);
        assert!(matches!(propagate(&g, &p, 1), Err(Error::Shape(_))));
    }
}
