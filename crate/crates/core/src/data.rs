//! Interaction ingestion, implicit-feedback filtering and the two split
//! protocols.
//!
//! Every dataset carries dense `u32` indices for users and items plus the raw
//! labels read from disk, so manifests and top-k dumps can be traced back to
//! the source file.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Guards `floor(frac * n)` against products like 0.29 * 100 = 28.999...
const FLOOR_SLACK: f64 = 1e-9;

fn floor_frac(frac: f64, n: usize) -> usize {
    (frac * n as f64 + FLOOR_SLACK).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub rating: Option<f32>,
}

/// A deduplicated set of implicit interactions over dense ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    interactions: Vec<Interaction>,
    num_users: usize,
    num_items: usize,
    user_labels: Vec<u64>,
    item_labels: Vec<u64>,
}

impl Dataset {
    /// Builds a dataset with identity labels. Interactions are sorted and
    /// duplicate `(user, item)` pairs collapsed to their first occurrence.
    pub fn from_pairs(
        num_users: usize,
        num_items: usize,
        pairs: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let interactions = pairs
            .into_iter()
            .map(|(user, item)| Interaction {
                user,
                item,
                rating: None,
            })
            .collect();
        Self::with_labels(
            interactions,
            (0..num_users as u64).collect(),
            (0..num_items as u64).collect(),
        )
    }

    pub fn with_labels(
        mut interactions: Vec<Interaction>,
        user_labels: Vec<u64>,
        item_labels: Vec<u64>,
    ) -> Result<Self> {
        let num_users = user_labels.len();
        let num_items = item_labels.len();
        for it in &interactions {
            if it.user as usize >= num_users || it.item as usize >= num_items {
                return Err(Error::Argument(format!(
                    "interaction ({}, {}) outside {}x{} id space",
                    it.user, it.item, num_users, num_items
                )));
            }
        }
        interactions.sort_by_key(|it| (it.user, it.item));
        interactions.dedup_by_key(|it| (it.user, it.item));
        Ok(Self {
            interactions,
            num_users,
            num_items,
            user_labels,
            item_labels,
        })
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn user_labels(&self) -> &[u64] {
        &self.user_labels
    }

    pub fn item_labels(&self) -> &[u64] {
        &self.item_labels
    }

    /// Sorted item lists, one per user (empty for users without interactions).
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_users];
        for it in &self.interactions {
            out[it.user as usize].push(it.item);
        }
        out
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.interactions.iter().map(|it| (it.user, it.item))
    }

    /// Drops users and items without interactions and renumbers the rest,
    /// keeping relative label order.
    fn densified(self) -> Result<Self> {
        let mut user_used = vec![false; self.num_users];
        let mut item_used = vec![false; self.num_items];
        for it in &self.interactions {
            user_used[it.user as usize] = true;
            item_used[it.item as usize] = true;
        }
        let (user_map, user_labels) = remap(&user_used, &self.user_labels);
        let (item_map, item_labels) = remap(&item_used, &self.item_labels);
        let interactions = self
            .interactions
            .into_iter()
            .map(|it| Interaction {
                user: user_map[it.user as usize],
                item: item_map[it.item as usize],
                rating: it.rating,
            })
            .collect();
        Self::with_labels(interactions, user_labels, item_labels)
    }
}

fn remap(used: &[bool], labels: &[u64]) -> (Vec<u32>, Vec<u64>) {
    let mut map = vec![u32::MAX; used.len()];
    let mut kept = Vec::new();
    for (old, &u) in used.iter().enumerate() {
        if u {
            map[old] = kept.len() as u32;
            kept.push(labels[old]);
        }
    }
    (map, kept)
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains("::") {
        line.split("::").map(str::trim).collect()
    } else if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Reads `user, item[, rating[, timestamp]]` rows separated by tabs, commas,
/// `::` or whitespace. A first line whose id columns are not integers is
/// treated as a header.
///
/// With a threshold, rows whose rating is below it are discarded; rows without
/// a rating column are kept. Ids are renumbered densely in ascending raw-id
/// order.
pub fn load_interactions(path: impl AsRef<Path>, rating_threshold: Option<f64>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let mut rows: Vec<(u64, u64, Option<f32>)> = Vec::new();
    let mut seen_data = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = split_fields(line);
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected at least 2 columns, found {}", fields.len()),
            });
        }
        let ids = (fields[0].parse::<u64>(), fields[1].parse::<u64>());
        let (user, item) = match ids {
            (Ok(u), Ok(i)) => (u, i),
            _ if !seen_data => {
                // header row
                seen_data = true;
                continue;
            }
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("non-integer id in {:?}", line),
                })
            }
        };
        seen_data = true;
        let rating = match fields.get(2) {
            Some(f) if !f.is_empty() => Some(f.parse::<f32>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad rating {f:?}: {e}"),
            })?),
            _ => None,
        };
        if let (Some(t), Some(r)) = (rating_threshold, rating) {
            if (r as f64) < t {
                continue;
            }
        }
        rows.push((user, item, rating));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no interactions left in {}",
            path.display()
        )));
    }

    let mut user_labels: Vec<u64> = rows.iter().map(|r| r.0).collect();
    let mut item_labels: Vec<u64> = rows.iter().map(|r| r.1).collect();
    user_labels.sort_unstable();
    user_labels.dedup();
    item_labels.sort_unstable();
    item_labels.dedup();
    let user_index: HashMap<u64, u32> = user_labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i as u32))
        .collect();
    let item_index: HashMap<u64, u32> = item_labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i as u32))
        .collect();
    let interactions = rows
        .into_iter()
        .map(|(u, i, rating)| Interaction {
            user: user_index[&u],
            item: item_index[&i],
            rating,
        })
        .collect();
    Dataset::with_labels(interactions, user_labels, item_labels)
}

/// Removes users with fewer than `min_n` interactions, and items left without
/// any, until nothing changes.
pub fn filter_min_interactions(d: Dataset, min_n: usize) -> Result<Dataset> {
    if min_n == 0 {
        return Err(Error::Argument("min_n must be at least 1".into()));
    }
    let mut current = d;
    loop {
        let mut counts = vec![0usize; current.num_users];
        for it in &current.interactions {
            counts[it.user as usize] += 1;
        }
        let before = current.interactions.len();
        current
            .interactions
            .retain(|it| counts[it.user as usize] >= min_n);
        let shrunk = current.interactions.len() != before;
        current = current.densified()?;
        if current.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "no user has at least {min_n} interactions"
            )));
        }
        if !shrunk {
            return Ok(current);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Validation,
    Test,
    FoldIn,
    FoldOut,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Validation => "validation",
            Part::Test => "test",
            Part::FoldIn => "fold_in",
            Part::FoldOut => "fold_out",
        }
    }
}

/// Interaction split: every user appears in training, with a fraction `rho`
/// of its interactions.
#[derive(Debug, Clone)]
pub struct TransductiveSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub rho: f64,
    pub seed: u64,
    /// Held-out interactions moved into training for item coverage.
    pub moved_to_train: usize,
}

pub fn split_transductive(d: &Dataset, rho: f64, seed: u64) -> Result<TransductiveSplit> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(format!("rho must lie in (0, 1), got {rho}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (user, items) in d.items_by_user().into_iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        let n = items.len();
        let n_train = floor_frac(rho, n);
        if n_train == 0 || n_train == n {
            return Err(Error::Config(format!(
                "user {} ({} interactions) gets an empty {} part at rho={rho}",
                d.user_labels[user],
                n,
                if n_train == 0 { "training" } else { "held-out" }
            )));
        }
        let mut items = items;
        items.shuffle(&mut rng);
        let held = n - n_train;
        let n_val = held / 2;
        let u = user as u32;
        train.extend(items[..n_train].iter().map(|&i| (u, i)));
        val.extend(items[n_train..n_train + n_val].iter().map(|&i| (u, i)));
        test.extend(items[n_train + n_val..].iter().map(|&i| (u, i)));
    }

    let mut covered = vec![false; d.num_items];
    for &(_, i) in &train {
        covered[i as usize] = true;
    }
    let mut moved = 0;
    for part in [&mut val, &mut test] {
        part.retain(|&(u, i)| {
            if covered[i as usize] {
                true
            } else {
                covered[i as usize] = true;
                train.push((u, i));
                moved += 1;
                false
            }
        });
    }
    if moved > 0 {
        log::info!("transductive split: moved {moved} held-out interactions into train for item coverage");
    }

    let build = |pairs: Vec<(u32, u32)>| {
        Dataset::with_labels(
            pairs
                .into_iter()
                .map(|(user, item)| Interaction {
                    user,
                    item,
                    rating: None,
                })
                .collect(),
            d.user_labels.clone(),
            d.item_labels.clone(),
        )
    };
    Ok(TransductiveSplit {
        train: build(train)?,
        validation: build(val)?,
        test: build(test)?,
        rho,
        seed,
        moved_to_train: moved,
    })
}

/// An evaluation user of the inductive protocol. Item ids index the training
/// item space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOutUser {
    /// Index in the source dataset.
    pub user: u32,
    pub label: u64,
    pub fold_in: Vec<u32>,
    pub fold_out: Vec<u32>,
}

/// User split: training users keep their whole history, evaluation users are
/// represented only through their fold-in items.
#[derive(Debug, Clone)]
pub struct InductiveSplit {
    /// Training users only, renumbered `0..train_users.len()`, over the items
    /// that occur in training histories.
    pub train: Dataset,
    /// Source-dataset index of each training user.
    pub train_users: Vec<u32>,
    pub val_users: Vec<HeldOutUser>,
    pub test_users: Vec<HeldOutUser>,
    pub mu: f64,
    pub eta: f64,
    pub seed: u64,
    /// Evaluation interactions on items absent from every training history.
    pub dropped_interactions: usize,
    /// Evaluation users left with an empty fold-in or fold-out.
    pub dropped_users: usize,
}

pub fn split_inductive(d: &Dataset, mu: f64, eta: f64, seed: u64) -> Result<InductiveSplit> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Config(format!("mu must lie in (0, 1), got {mu}")));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Config(format!("eta must lie in (0, 1), got {eta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_user = d.items_by_user();
    let mut users: Vec<u32> = (0..d.num_users as u32)
        .filter(|&u| !by_user[u as usize].is_empty())
        .collect();
    users.shuffle(&mut rng);
    let n_train = floor_frac(mu, users.len());
    if n_train == 0 {
        return Err(Error::Config(format!(
            "mu={mu} leaves no training users out of {}",
            users.len()
        )));
    }
    let n_val = (users.len() - n_train) / 2;
    let mut train_users = users[..n_train].to_vec();
    let mut val_ids = users[n_train..n_train + n_val].to_vec();
    let mut test_ids = users[n_train + n_val..].to_vec();
    train_users.sort_unstable();
    val_ids.sort_unstable();
    test_ids.sort_unstable();

    let mut covered = vec![false; d.num_items];
    for &u in &train_users {
        for &i in &by_user[u as usize] {
            covered[i as usize] = true;
        }
    }
    let (item_map, item_labels) = remap(&covered, &d.item_labels);

    let train_interactions = train_users
        .iter()
        .enumerate()
        .flat_map(|(new_u, &u)| {
            by_user[u as usize].iter().map(move |&i| Interaction {
                user: new_u as u32,
                item: i,
                rating: None,
            })
        })
        .map(|mut it| {
            it.item = item_map[it.item as usize];
            it
        })
        .collect();
    let train = Dataset::with_labels(
        train_interactions,
        train_users.iter().map(|&u| d.user_labels[u as usize]).collect(),
        item_labels,
    )?;

    let mut dropped_interactions = 0;
    let mut dropped_users = 0;
    let mut held_out = |ids: &[u32], rng: &mut ChaCha8Rng| {
        let mut out = Vec::new();
        for &u in ids {
            let all = &by_user[u as usize];
            let mut items: Vec<u32> = all
                .iter()
                .filter(|&&i| covered[i as usize])
                .map(|&i| item_map[i as usize])
                .collect();
            dropped_interactions += all.len() - items.len();
            items.shuffle(rng);
            let n_in = floor_frac(eta, items.len());
            if n_in == 0 || n_in == items.len() {
                dropped_users += 1;
                continue;
            }
            let fold_out = items.split_off(n_in);
            out.push(HeldOutUser {
                user: u,
                label: d.user_labels[u as usize],
                fold_in: items,
                fold_out,
            });
        }
        out
    };
    let val_users = held_out(&val_ids, &mut rng);
    let test_users = held_out(&test_ids, &mut rng);
    if dropped_interactions > 0 || dropped_users > 0 {
        log::info!(
            "inductive split: dropped {dropped_interactions} uncovered interactions and {dropped_users} users with an empty fold"
        );
    }

    Ok(InductiveSplit {
        train,
        train_users,
        val_users,
        test_users,
        mu,
        eta,
        seed,
        dropped_interactions,
        dropped_users,
    })
}

/// Counts written alongside a split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub protocol: String,
    pub seed: u64,
    pub users: usize,
    pub items: usize,
    pub counts: BTreeMap<String, usize>,
    pub dropped_interactions: usize,
    pub dropped_users: usize,
    pub moved_to_train: usize,
}

impl TransductiveSplit {
    /// One `user<TAB>item<TAB>part` line per interaction, raw labels.
    pub fn write_manifest(&self, mut w: impl Write) -> std::io::Result<()> {
        for (part, ds) in [
            (Part::Train, &self.train),
            (Part::Validation, &self.validation),
            (Part::Test, &self.test),
        ] {
            for (u, i) in ds.pairs() {
                writeln!(
                    w,
                    "{}\t{}\t{}",
                    ds.user_labels[u as usize],
                    ds.item_labels[i as usize],
                    part.as_str()
                )?;
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> SplitSummary {
        let counts = [
            ("train", self.train.len()),
            ("validation", self.validation.len()),
            ("test", self.test.len()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        SplitSummary {
            protocol: "transductive".into(),
            seed: self.seed,
            users: self.train.num_users(),
            items: self.train.num_items(),
            counts,
            dropped_interactions: 0,
            dropped_users: 0,
            moved_to_train: self.moved_to_train,
        }
    }
}

impl InductiveSplit {
    /// Same line format as the transductive manifest; evaluation users are
    /// tagged `validation_fold_in`, `test_fold_out`, etc.
    pub fn write_manifest(&self, mut w: impl Write) -> std::io::Result<()> {
        let items = self.train.item_labels();
        for (u, i) in self.train.pairs() {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.train.user_labels()[u as usize],
                items[i as usize],
                Part::Train.as_str()
            )?;
        }
        for (prefix, users) in [("validation", &self.val_users), ("test", &self.test_users)] {
            for h in users {
                for (part, list) in [(Part::FoldIn, &h.fold_in), (Part::FoldOut, &h.fold_out)] {
                    for &i in list.iter() {
                        writeln!(
                            w,
                            "{}\t{}\t{}_{}",
                            h.label,
                            items[i as usize],
                            prefix,
                            part.as_str()
                        )?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> SplitSummary {
        let fold = |users: &[HeldOutUser], f: fn(&HeldOutUser) -> usize| -> usize {
            users.iter().map(f).sum()
        };
        let counts = [
            ("train_users", self.train_users.len()),
            ("train", self.train.len()),
            ("validation_users", self.val_users.len()),
            ("validation_fold_in", fold(&self.val_users, |h| h.fold_in.len())),
            ("validation_fold_out", fold(&self.val_users, |h| h.fold_out.len())),
            ("test_users", self.test_users.len()),
            ("test_fold_in", fold(&self.test_users, |h| h.fold_in.len())),
            ("test_fold_out", fold(&self.test_users, |h| h.fold_out.len())),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        SplitSummary {
            protocol: "inductive".into(),
            seed: self.seed,
            users: self.train_users.len() + self.val_users.len() + self.test_users.len(),
            items: self.train.num_items(),
            counts,
            dropped_interactions: self.dropped_interactions,
            dropped_users: self.dropped_users,
            moved_to_train: 0,
        }
    }
}
