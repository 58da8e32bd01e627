use ndarray::Array2;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Undirected user–item graph stored as two CSR halves.
///
/// `user_coeff[k]` and `item_coeff[k]` hold `1 / sqrt(deg(u) * deg(i))` for the
/// k-th entry of the respective adjacency, so an edge carries the same
/// coefficient from both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    num_users: usize,
    num_items: usize,
    user_ptr: Vec<usize>,
    user_idx: Vec<u32>,
    user_coeff: Vec<f64>,
    item_ptr: Vec<usize>,
    item_idx: Vec<u32>,
    item_coeff: Vec<f64>,
}

fn csr(n_rows: usize, edges: &[(u32, u32)]) -> (Vec<usize>, Vec<u32>) {
    let mut ptr = vec![0usize; n_rows + 1];
    for &(r, _) in edges {
        ptr[r as usize + 1] += 1;
    }
    for r in 0..n_rows {
        ptr[r + 1] += ptr[r];
    }
    let mut fill = ptr.clone();
    let mut idx = vec![0u32; edges.len()];
    for &(r, c) in edges {
        idx[fill[r as usize]] = c;
        fill[r as usize] += 1;
    }
    for r in 0..n_rows {
        idx[ptr[r]..ptr[r + 1]].sort_unstable();
    }
    (ptr, idx)
}

impl BipartiteGraph {
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(u32, u32)]) -> Result<Self> {
        for &(u, i) in edges {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(Error::Graph(format!(
                    "edge ({u}, {i}) outside {num_users} users x {num_items} items"
                )));
            }
        }
        let mut edges = edges.to_vec();
        edges.sort_unstable();
        edges.dedup();
        let (user_ptr, user_idx) = csr(num_users, &edges);
        let flipped: Vec<(u32, u32)> = edges.iter().map(|&(u, i)| (i, u)).collect();
        let (item_ptr, item_idx) = csr(num_items, &flipped);
        let udeg = |u: usize| (user_ptr[u + 1] - user_ptr[u]) as f64;
        let ideg = |i: usize| (item_ptr[i + 1] - item_ptr[i]) as f64;
        let mut user_coeff = vec![0.0; user_idx.len()];
        for u in 0..num_users {
            for k in user_ptr[u]..user_ptr[u + 1] {
                user_coeff[k] = 1.0 / (udeg(u) * ideg(user_idx[k] as usize)).sqrt();
            }
        }
        let mut item_coeff = vec![0.0; item_idx.len()];
        for i in 0..num_items {
            for k in item_ptr[i]..item_ptr[i + 1] {
                item_coeff[k] = 1.0 / (udeg(item_idx[k] as usize) * ideg(i)).sqrt();
            }
        }
        Ok(Self {
            num_users,
            num_items,
            user_ptr,
            user_idx,
            user_coeff,
            item_ptr,
            item_idx,
            item_coeff,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.user_idx.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_ptr[u + 1] - self.user_ptr[u]
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_ptr[i + 1] - self.item_ptr[i]
    }

    /// Sorted item neighbours of `u`.
    pub fn user_items(&self, u: usize) -> &[u32] {
        &self.user_idx[self.user_ptr[u]..self.user_ptr[u + 1]]
    }

    pub fn user_coeffs(&self, u: usize) -> &[f64] {
        &self.user_coeff[self.user_ptr[u]..self.user_ptr[u + 1]]
    }

    pub fn item_users(&self, i: usize) -> &[u32] {
        &self.item_idx[self.item_ptr[i]..self.item_ptr[i + 1]]
    }

    pub fn item_coeffs(&self, i: usize) -> &[f64] {
        &self.item_coeff[self.item_ptr[i]..self.item_ptr[i + 1]]
    }

    /// Normalisation coefficient of edge `(u, i)`, `None` when absent.
    pub fn coeff(&self, u: usize, i: usize) -> Option<f64> {
        let items = self.user_items(u);
        items
            .binary_search(&(i as u32))
            .ok()
            .map(|k| self.user_coeffs(u)[k])
    }

    /// Rebuilds the item-side CSR from the user side.
    pub fn transpose_from_users(&self) -> (Vec<usize>, Vec<u32>) {
        let edges: Vec<(u32, u32)> = (0..self.num_users)
            .flat_map(|u| self.user_items(u).iter().map(move |&i| (i, u as u32)))
            .collect();
        csr(self.num_items, &edges)
    }

    pub fn item_csr(&self) -> (&[usize], &[u32]) {
        (&self.item_ptr, &self.item_idx)
    }

    /// `out[u] = Σ_i coeff(u, i) · items[i]`.
    pub fn gather_to_users(&self, items: &Array2<f64>, out: &mut Array2<f64>) {
        spmm(&self.user_ptr, &self.user_idx, &self.user_coeff, items, out);
    }

    /// `out[i] = Σ_u coeff(u, i) · users[u]`.
    pub fn gather_to_items(&self, users: &Array2<f64>, out: &mut Array2<f64>) {
        spmm(&self.item_ptr, &self.item_idx, &self.item_coeff, users, out);
    }

    /// Stable content hash of the edge set, used to pair caches with graphs.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_users as u64).to_le_bytes());
        h.update((self.num_items as u64).to_le_bytes());
        for p in &self.user_ptr {
            h.update((*p as u64).to_le_bytes());
        }
        for i in &self.user_idx {
            h.update(i.to_le_bytes());
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Dense symmetric normalised adjacency over users then items. Oracle use
    /// only; quadratic in node count.
    pub fn dense_normalized_adjacency(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let mut a = Array2::zeros((n, n));
        for u in 0..self.num_users {
            for (&i, &c) in self.user_items(u).iter().zip(self.user_coeffs(u)) {
                let j = self.num_users + i as usize;
                a[[u, j]] = c;
                a[[j, u]] = c;
            }
        }
        a
    }
}

fn spmm(ptr: &[usize], idx: &[u32], coeff: &[f64], src: &Array2<f64>, out: &mut Array2<f64>) {
    let dim = src.ncols();
    let src = src.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let out = out.as_slice_mut().expect("output must be standard layout");
    out.par_chunks_mut(dim.max(1)).enumerate().for_each(|(r, row)| {
        row.iter_mut().for_each(|x| *x = 0.0);
        for k in ptr[r]..ptr[r + 1] {
            let c = coeff[k];
            let s = &src[idx[k] as usize * dim..(idx[k] as usize + 1) * dim];
            for (o, v) in row.iter_mut().zip(s) {
                *o += c * v;
            }
        }
    });
}

/// Builds the training graph from every interaction of `train`.
pub fn build_graph(train: &Dataset) -> Result<BipartiteGraph> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training graph has no edges".into()));
    }
    let edges: Vec<(u32, u32)> = train.pairs().collect();
    BipartiteGraph::from_edges(train.num_users(), train.num_items(), &edges)
}
