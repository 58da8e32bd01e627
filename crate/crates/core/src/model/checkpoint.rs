//! Checkpoint layout: one line of compact JSON ([`CheckpointHeader`]) ended by
//! `\n`, then the item table and (transductive only) the user table as
//! row-major little-endian `f32`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Mode, Model, ModelConfig, Params, Pooling};
use crate::error::{Error, Result};

const FORMAT: &str = "rankcf-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub dim: usize,
    pub layers: usize,
    pub pooling: Pooling,
    pub mode: Mode,
    pub num_users: usize,
    pub num_items: usize,
    pub seed: u64,
}

fn push_f32(out: &mut Vec<u8>, a: &Array2<f64>) {
    for &x in a.iter() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn checkpoint_bytes(model: &Model, num_users: usize) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        dim: model.config.dim,
        layers: model.config.layers,
        pooling: model.config.pooling,
        mode: model.config.mode,
        num_users,
        num_items: model.params.items.nrows(),
        seed: model.seed,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    push_f32(&mut out, &model.params.items);
    if let Some(u) = &model.params.users {
        push_f32(&mut out, u);
    }
    Ok(out)
}

/// `num_users` is recorded in the header; in inductive mode it is the number
/// of training users even though no user table is stored.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, num_users: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model, num_users)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_table(bytes: &[u8], rows: usize, cols: usize) -> Result<(Array2<f64>, &[u8])> {
    let need = rows * cols * 4;
    if bytes.len() < need {
        return Err(Error::Checkpoint(format!(
            "truncated table: need {need} bytes, have {}",
            bytes.len()
        )));
    }
    let (head, rest) = bytes.split_at(need);
    let data: Vec<f64> = head
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let a = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((a, rest))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Model)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", header.format)));
    }
    let (items, rest) = read_table(&bytes[nl + 1..], header.num_items, header.dim)?;
    let (users, rest) = match header.mode {
        Mode::Transductive => {
            let (u, r) = read_table(rest, header.num_users, header.dim)?;
            (Some(u), r)
        }
        Mode::Inductive => (None, rest),
    };
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    let model = Model {
        config: ModelConfig {
            dim: header.dim,
            layers: header.layers,
            pooling: header.pooling,
            mode: header.mode,
        },
        params: Params { users, items },
        seed: header.seed,
    };
    Ok((header, model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Model)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
