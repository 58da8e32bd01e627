//! Cache layout: one line of compact JSON ([`CacheHeader`]) ended by `\n`,
//! then one record per user: `u32` user id, `u32` entry count, the item ids
//! as `u32`, then the masses as `f32`, all little-endian.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_ppr, NegativeSampler, PprConfig, PprVector};
use crate::error::{Error, Result};
use crate::model::BipartiteGraph;

const FORMAT: &str = "rankcf-ppr/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub format: String,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub top_t: Option<usize>,
    pub scale: f64,
    pub graph_hash: String,
    pub num_users: usize,
    pub num_items: usize,
    pub records: usize,
}

/// Truncated item masses of one user, sorted by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    pub user: u32,
    pub entries: Vec<(u32, f32)>,
}

/// Keeps the `top_t` heaviest non-positive items (ties to the lower id),
/// rounded to `f32`.
pub fn truncate_entries(ppr: &PprVector, positives: &[u32], top_t: Option<usize>) -> Vec<(u32, f32)> {
    let mut entries: Vec<(u32, f64)> = ppr
        .item_mass()
        .filter(|(i, _)| !positives.contains(i))
        .collect();
    if let Some(t) = top_t {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        entries.truncate(t);
        entries.sort_by_key(|e| e.0);
    }
    entries
        .into_iter()
        .map(|(i, m)| (i, m as f32))
        .filter(|&(_, m)| m > 0.0)
        .collect()
}

/// PPR records for `users`, positives taken from their graph neighbours.
pub fn precompute(g: &BipartiteGraph, users: &[u32], cfg: &PprConfig) -> Result<Vec<CacheRecord>> {
    cfg.validate()?;
    users
        .par_iter()
        .map(|&u| {
            let ppr = compute_ppr(g, u, cfg)?;
            Ok(CacheRecord {
                user: u,
                entries: truncate_entries(&ppr, g.user_items(u as usize), cfg.top_t),
            })
        })
        .collect()
}

pub fn samplers_from_records(g: &BipartiteGraph, records: &[CacheRecord], scale: f64) -> Result<Vec<NegativeSampler>> {
    records
        .par_iter()
        .map(|r| {
            if r.user as usize >= g.num_users() {
                return Err(Error::Cache(format!("record for unknown user {}", r.user)));
            }
            let entries: Vec<(u32, f64)> = r.entries.iter().map(|&(i, m)| (i, m as f64)).collect();
            NegativeSampler::from_mass(r.user, &entries, g.user_items(r.user as usize), g.num_items(), scale)
        })
        .collect()
}

pub fn write_cache(path: impl AsRef<Path>, header: &CacheHeader, records: &[CacheRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    for r in records {
        out.extend_from_slice(&r.user.to_le_bytes());
        out.extend_from_slice(&(r.entries.len() as u32).to_le_bytes());
        for (i, _) in &r.entries {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for (_, m) in &r.entries {
            out.extend_from_slice(&m.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn precompute_and_store(
    g: &BipartiteGraph,
    users: &[u32],
    cfg: &PprConfig,
    path: impl AsRef<Path>,
) -> Result<CacheHeader> {
    let records = precompute(g, users, cfg)?;
    let header = CacheHeader {
        format: FORMAT.into(),
        alpha: cfg.alpha,
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        top_t: cfg.top_t,
        scale: cfg.scale,
        graph_hash: g.content_hash(),
        num_users: g.num_users(),
        num_items: g.num_items(),
        records: records.len(),
    };
    write_cache(path, &header, &records)?;
    Ok(header)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, record: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Cache(format!("record {record} is truncated")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn u32_at(b: &[u8], k: usize) -> u32 {
    u32::from_le_bytes([b[4 * k], b[4 * k + 1], b[4 * k + 2], b[4 * k + 3]])
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<(CacheHeader, Vec<CacheRecord>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Cache("missing header line".into()))?;
    let header: CacheHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Cache(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Cache(format!("unsupported format {:?}", header.format)));
    }
    let mut rest = &bytes[nl + 1..];
    let mut records = Vec::with_capacity(header.records);
    for k in 0..header.records {
        let head = take(&mut rest, 8, k)?;
        let user = u32_at(head, 0);
        let count = u32_at(head, 1) as usize;
        if user as usize >= header.num_users || count > header.num_items {
            return Err(Error::Cache(format!("record {k} (user {user}) has an invalid header")));
        }
        let ids = take(&mut rest, 4 * count, k)?;
        let masses = take(&mut rest, 4 * count, k)?;
        let mut entries = Vec::with_capacity(count);
        for j in 0..count {
            let item = u32_at(ids, j);
            let m = f32::from_bits(u32_at(masses, j));
            if item as usize >= header.num_items || !(m.is_finite() && m >= 0.0) {
                return Err(Error::Cache(format!("record {k} (user {user}) has a bad entry ({item}, {m})")));
            }
            entries.push((item, m));
        }
        records.push(CacheRecord { user, entries });
    }
    if !rest.is_empty() {
        return Err(Error::Cache(format!(
            "{} trailing bytes after {} records",
            rest.len(),
            header.records
        )));
    }
    Ok((header, records))
}

/// Reads a cache and rebuilds its samplers against `g`, which must be the
/// graph the cache was computed on.
pub fn load_cache(path: impl AsRef<Path>, g: &BipartiteGraph) -> Result<(CacheHeader, Vec<NegativeSampler>)> {
    let (header, records) = read_cache(path)?;
    if header.graph_hash != g.content_hash() {
        return Err(Error::Cache("cache was computed on a different graph".into()));
    }
    let samplers = samplers_from_records(g, &records, header.scale)?;
    Ok((header, samplers))
}
