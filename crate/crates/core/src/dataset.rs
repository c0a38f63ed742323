//! Interaction ingestion, id remapping, the normalized bipartite graph, and
//! uniform triplet sampling.
//!
//! Input files are UTF-8 text with one record per line: ASCII-whitespace
//! separated non-negative integers where the first token is a raw user id and
//! the remaining tokens are raw item ids (adjacency-list format). A file in
//! which every record has exactly two tokens is the pair-per-line special
//! case of the same grammar. Lines starting with `#` are ignored.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{MixRecError, Result};

/// One sampled training triplet: user, observed item, unobserved item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

/// Id-remapped train/test interactions for `num_users` users and
/// `num_items` items.
///
/// Indices are dense and assigned in first-appearance order over the train
/// records followed by the test records. Users or items that only occur in
/// test keep degree 0; they never enter propagation and are not ranking
/// candidates.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    pub user_degree: Vec<u32>,
    pub item_degree: Vec<u32>,
    /// Sorted train items per user, for O(log n) membership checks.
    user_items: Vec<Vec<u32>>,
}

/// Counters reported after a load; printed by the CLI as `key=value` lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadSummary {
    pub users: usize,
    pub items: usize,
    pub train: usize,
    pub test: usize,
    /// Duplicate pairs dropped (within train, within test, or test pairs
    /// already present in train).
    pub dedup: usize,
    /// Users plus items seen only in test (degree 0).
    pub cold: usize,
}

impl fmt::Display for LoadSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users={}", self.users)?;
        writeln!(f, "items={}", self.items)?;
        writeln!(f, "train={}", self.train)?;
        writeln!(f, "test={}", self.test)?;
        writeln!(f, "dedup={}", self.dedup)?;
        write!(f, "cold={}", self.cold)
    }
}

impl InteractionDataset {
    /// Assembles a dataset from raw-id pairs, remapping ids densely in
    /// first-appearance order over `train_raw` then `test_raw`. Duplicates
    /// are dropped and counted; test pairs that also occur in train are
    /// treated as duplicates.
    pub fn from_raw_pairs(
        train_raw: &[(u64, u64)],
        test_raw: &[(u64, u64)],
    ) -> Result<(Self, LoadSummary)> {
        if train_raw.is_empty() {
            return Err(MixRecError::EmptyDataset);
        }

        let mut user_ids: HashMap<u64, u32> = HashMap::new();
        let mut item_ids: HashMap<u64, u32> = HashMap::new();
        let remap = |map: &mut HashMap<u64, u32>, raw: u64| -> u32 {
            let next = map.len() as u32;
            *map.entry(raw).or_insert(next)
        };

        let mut dedup = 0usize;
        let mut train: Vec<(u32, u32)> = Vec::with_capacity(train_raw.len());
        let mut train_set: HashSet<(u32, u32)> = HashSet::with_capacity(train_raw.len());
        for &(u_raw, i_raw) in train_raw {
            let u = remap(&mut user_ids, u_raw);
            let i = remap(&mut item_ids, i_raw);
            if train_set.insert((u, i)) {
                train.push((u, i));
            } else {
                dedup += 1;
            }
        }

        let users_in_train = user_ids.len();
        let items_in_train = item_ids.len();

        let mut test: Vec<(u32, u32)> = Vec::with_capacity(test_raw.len());
        let mut test_set: HashSet<(u32, u32)> = HashSet::with_capacity(test_raw.len());
        for &(u_raw, i_raw) in test_raw {
            let u = remap(&mut user_ids, u_raw);
            let i = remap(&mut item_ids, i_raw);
            if train_set.contains(&(u, i)) || !test_set.insert((u, i)) {
                dedup += 1;
            } else {
                test.push((u, i));
            }
        }

        let num_users = user_ids.len();
        let num_items = item_ids.len();
        let cold = (num_users - users_in_train) + (num_items - items_in_train);

        let ds = Self::from_pairs(num_users, num_items, train, test)?;
        let summary = LoadSummary {
            users: num_users,
            items: num_items,
            train: ds.train.len(),
            test: ds.test.len(),
            dedup,
            cold,
        };
        Ok((ds, summary))
    }

    /// Builds a dataset from already-dense index pairs. Pairs must be
    /// duplicate-free with train and test disjoint.
    pub fn from_pairs(
        num_users: usize,
        num_items: usize,
        train: Vec<(u32, u32)>,
        test: Vec<(u32, u32)>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(MixRecError::EmptyDataset);
        }
        let mut user_degree = vec![0u32; num_users];
        let mut item_degree = vec![0u32; num_items];
        let mut user_items = vec![Vec::new(); num_users];
        for &(u, i) in &train {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(MixRecError::Config(format!(
                    "train pair ({u}, {i}) out of range for {num_users} users x {num_items} items"
                )));
            }
            user_degree[u as usize] += 1;
            item_degree[i as usize] += 1;
            user_items[u as usize].push(i);
        }
        for &(u, i) in &test {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(MixRecError::Config(format!(
                    "test pair ({u}, {i}) out of range for {num_users} users x {num_items} items"
                )));
            }
        }
        for items in &mut user_items {
            items.sort_unstable();
        }
        Ok(Self {
            num_users,
            num_items,
            train,
            test,
            user_degree,
            item_degree,
            user_items,
        })
    }

    /// Sorted train items of user `u`.
    pub fn train_items(&self, u: u32) -> &[u32] {
        &self.user_items[u as usize]
    }

    pub fn has_train(&self, u: u32, i: u32) -> bool {
        self.user_items[u as usize].binary_search(&i).is_ok()
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = File::open(path).map_err(|source| MixRecError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(BufReader::new(file).lines())
}

/// Parses one interaction file into raw (user, item) pairs.
pub fn parse_interaction_file(path: &Path) -> Result<Vec<(u64, u64)>> {
    let mut pairs = Vec::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| MixRecError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_ascii_whitespace();
        let user_tok = tokens.next().expect("nonempty line has a token");
        let user: u64 = user_tok.parse().map_err(|_| MixRecError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("malformed token `{user_tok}`"),
        })?;
        for tok in tokens {
            let item: u64 = tok.parse().map_err(|_| MixRecError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("malformed token `{tok}`"),
            })?;
            pairs.push((user, item));
        }
    }
    Ok(pairs)
}

/// Loads pre-split train/test interaction files.
pub fn load_dataset(train_path: &Path, test_path: &Path) -> Result<(InteractionDataset, LoadSummary)> {
    let train_raw = parse_interaction_file(train_path)?;
    let test_raw = parse_interaction_file(test_path)?;
    InteractionDataset::from_raw_pairs(&train_raw, &test_raw)
}

/// Per-user random split of raw pairs into train/test halves.
///
/// Each user's interactions are shuffled once; the last
/// `floor(test_fraction * n_u)` go to test, capped so that every user with
/// at least 2 interactions keeps at least 1 in train. Duplicate input pairs
/// are dropped first. Deterministic for a fixed seed.
pub fn split_pairs<R: Rng>(
    pairs: &[(u64, u64)],
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<(u64, u64)>, Vec<(u64, u64)>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(MixRecError::Config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut seen = HashSet::new();
    let mut by_user: Vec<(u64, Vec<u64>)> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    for &(u, i) in pairs {
        if !seen.insert((u, i)) {
            continue;
        }
        let idx = *slot.entry(u).or_insert_with(|| {
            by_user.push((u, Vec::new()));
            by_user.len() - 1
        });
        by_user[idx].1.push(i);
    }
    if seen.is_empty() {
        return Err(MixRecError::EmptyDataset);
    }
    if test_fraction * (seen.len() as f64) < 1.0 {
        return Err(MixRecError::Config(format!(
            "test_fraction {test_fraction} of {} pairs yields no test interactions",
            seen.len()
        )));
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (u, items) in &mut by_user {
        items.shuffle(rng);
        let n = items.len();
        let want = (test_fraction * n as f64).floor() as usize;
        let take = if n >= 2 { want.min(n - 1) } else { 0 };
        let cut = n - take;
        for &i in &items[..cut] {
            train.push((*u, i));
        }
        for &i in &items[cut..] {
            test.push((*u, i));
        }
    }
    Ok((train, test))
}

/// [`split_pairs`] followed by dense remapping into an [`InteractionDataset`].
pub fn random_split(
    pairs: &[(u64, u64)],
    test_fraction: f64,
    seed: u64,
) -> Result<InteractionDataset> {
    let mut rng = crate::seeded_rng(seed);
    let (train, test) = split_pairs(pairs, test_fraction, &mut rng)?;
    let (ds, _) = InteractionDataset::from_raw_pairs(&train, &test)?;
    Ok(ds)
}

/// Sparse symmetric-normalized bipartite adjacency in CSR layout over
/// `num_users + num_items` nodes, users first. Each train pair (u, i) is
/// stored twice, as (u, M+i) and (M+i, u), with weight
/// `1 / sqrt(|N_u| * |N_i|)` on both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGraph {
    pub num_users: usize,
    pub num_items: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl NormalizedGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Undirected edge count |E| (half the stored entry count).
    pub fn num_edges(&self) -> usize {
        self.indices.len() / 2
    }

    /// Stored CSR entries (2|E|).
    pub fn num_entries(&self) -> usize {
        self.indices.len()
    }

    pub fn neighbors(&self, node: usize) -> (&[u32], &[f64]) {
        let lo = self.indptr[node];
        let hi = self.indptr[node + 1];
        (&self.indices[lo..hi], &self.weights[lo..hi])
    }

    pub fn degree(&self, node: usize) -> usize {
        self.indptr[node + 1] - self.indptr[node]
    }
}

/// Builds the normalized adjacency. Rows of zero-degree nodes are empty;
/// neighbor lists are sorted, so identical datasets produce bit-identical
/// structures.
pub fn build_graph(ds: &InteractionDataset) -> NormalizedGraph {
    let m = ds.num_users;
    let n = ds.num_items;
    let nodes = m + n;

    let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); nodes];
    for &(u, i) in &ds.train {
        let du = ds.user_degree[u as usize] as f64;
        let di = ds.item_degree[i as usize] as f64;
        let w = 1.0 / (du * di).sqrt();
        adj[u as usize].push((m as u32 + i, w));
        adj[m + i as usize].push((u, w));
    }

    let mut indptr = Vec::with_capacity(nodes + 1);
    let mut indices = Vec::with_capacity(2 * ds.train.len());
    let mut weights = Vec::with_capacity(2 * ds.train.len());
    indptr.push(0);
    for row in &mut adj {
        row.sort_unstable_by_key(|&(v, _)| v);
        for &(v, w) in row.iter() {
            indices.push(v);
            weights.push(w);
        }
        indptr.push(indices.len());
    }

    NormalizedGraph {
        num_users: m,
        num_items: n,
        indptr,
        indices,
        weights,
    }
}

/// Draws `batch_size` uniform (user, positive, negative) triplets.
///
/// Positives are drawn uniformly from the train pairs with replacement;
/// negatives uniformly from all items, rejection-resampled on collision
/// with an observed pair. A user interacting with every item makes the
/// negative unreachable and aborts with a diagnostic (checked exactly via
/// the user's degree, so small item sets cannot abort by bad luck).
pub fn sample_batch<R: Rng>(
    ds: &InteractionDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    if ds.train.is_empty() {
        return Err(MixRecError::EmptyDataset);
    }
    let n = ds.num_items;
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (user, pos) = ds.train[rng.random_range(0..ds.train.len())];
        if ds.user_degree[user as usize] as usize >= n {
            return Err(MixRecError::NegativeUnreachable {
                user,
                num_items: n,
            });
        }
        let neg = loop {
            let j = rng.random_range(0..n as u32);
            if !ds.has_train(user, j) {
                break j;
            }
        };
        out.push(Triplet { user, pos, neg });
    }
    Ok(out)
}
