//! Smooth ranking losses for graph collaborative filtering.
//!
//! The crate loads implicit-feedback interactions, builds a LightGCN-style
//! propagation model, trains it with differentiable surrogates of NDCG, AP
//! and recall (or BPR), and evaluates it with the full-ranking protocol.
//! Negatives can be drawn uniformly or from a personalized-PageRank proposal.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod ppr;
pub mod trainer;

pub use error::{Error, Result};
