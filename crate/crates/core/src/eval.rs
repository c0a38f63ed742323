//! All-ranking top-N evaluation (Recall@N, NDCG@N), sparsity-group
//! reporting, and ablation orchestration.
//!
//! Scores are inner products of readout embeddings. A user is evaluated when
//! it has train degree >= 1 and at least one rankable held-out item; items
//! with train degree 0 have no defined score and are excluded both from the
//! candidate set and from the relevant sets.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde_json::json;

use crate::dataset::{InteractionDataset, NormalizedGraph};
use crate::encoder::{propagate, readout, EmbeddingTable};
use crate::error::Result;
use crate::mat::{dot, kahan_sum};
use crate::real::Real;
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserMetrics {
    pub user: u32,
    pub recall: f64,
    pub ndcg: f64,
}

/// Per-user and aggregate ranking metrics at cutoff `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub n: usize,
    pub per_user: Vec<UserMetrics>,
    pub mean_recall: f64,
    pub mean_ndcg: f64,
    pub evaluated_users: usize,
}

impl RankingResult {
    /// `{"recall@N": ..., "ndcg@N": ..., "users": ...}`
    pub fn metrics_json(&self) -> serde_json::Value {
        json!({
            format!("recall@{}", self.n): self.mean_recall,
            format!("ndcg@{}", self.n): self.mean_ndcg,
            "users": self.evaluated_users,
        })
    }

    /// Aligned plain-text table.
    pub fn text_table(&self) -> String {
        format!(
            "{:<12} {:>10}\n{:<12} {:>10.6}\n{:<12} {:>10.6}\n{:<12} {:>10}",
            "metric",
            "value",
            format!("recall@{}", self.n),
            self.mean_recall,
            format!("ndcg@{}", self.n),
            self.mean_ndcg,
            "users",
            self.evaluated_users,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    score: f64,
    idx: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // higher score first, ties broken by ascending index; adding 0.0
        // folds -0.0 onto +0.0 so numerically equal scores really tie
        (self.score + 0.0)
            .total_cmp(&(other.score + 0.0))
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Top-n item indices by descending score, ties broken by ascending index;
/// `exclude` (sorted) is skipped. Returns fewer than `n` when the candidate
/// pool is smaller.
pub fn rank_items(scores: &[f64], exclude: &[u32], n: usize) -> Vec<u32> {
    debug_assert!(exclude.windows(2).all(|w| w[0] <= w[1]));
    if n == 0 {
        return Vec::new();
    }
    // min-heap of the n best seen so far (Reverse puts the worst on top)
    let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::with_capacity(n + 1);
    for (idx, &score) in scores.iter().enumerate() {
        let idx = idx as u32;
        if exclude.binary_search(&idx).is_ok() {
            continue;
        }
        let cand = Candidate { score, idx };
        if heap.len() < n {
            heap.push(std::cmp::Reverse(cand));
        } else if cand > heap.peek().unwrap().0 {
            heap.pop();
            heap.push(std::cmp::Reverse(cand));
        }
    }
    let mut out: Vec<Candidate> = heap.into_iter().map(|r| r.0).collect();
    out.sort_unstable_by(|a, b| b.cmp(a));
    out.into_iter().map(|c| c.idx).collect()
}

/// `|topn intersect relevant| / |relevant|`; `relevant` must be sorted and
/// nonempty.
pub fn recall_at_n(topn: &[u32], relevant: &[u32]) -> f64 {
    debug_assert!(!relevant.is_empty());
    let hits = topn
        .iter()
        .filter(|i| relevant.binary_search(i).is_ok())
        .count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with the ideal truncated at `min(n, |relevant|)`.
pub fn ndcg_at_n(topn: &[u32], relevant: &[u32], n: usize) -> f64 {
    debug_assert!(!relevant.is_empty());
    let mut dcg = 0.0;
    for (pos, item) in topn.iter().enumerate() {
        if relevant.binary_search(item).is_ok() {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal = n.min(relevant.len());
    let idcg: f64 = (0..ideal).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    dcg / idcg
}

fn merge_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_unstable();
    out.dedup();
    out
}

/// Scores every rankable item for every evaluable user and aggregates
/// Recall@n / NDCG@n over users with at least one rankable test item.
pub fn evaluate<T: Real>(
    table: &EmbeddingTable<T>,
    graph: &NormalizedGraph,
    ds: &InteractionDataset,
    layers: usize,
    include_layer0: bool,
    n: usize,
) -> Result<RankingResult> {
    let stack = propagate(graph, table, layers)?;
    let final_emb = readout(&stack, include_layer0);
    let m = ds.num_users;

    // items that cannot be ranked: degree 0 (their scores are undefined)
    let dead_items: Vec<u32> = (0..ds.num_items as u32)
        .filter(|&i| ds.item_degree[i as usize] == 0)
        .collect();

    let mut test_items: Vec<Vec<u32>> = vec![Vec::new(); m];
    for &(u, i) in &ds.test {
        if ds.item_degree[i as usize] > 0 {
            test_items[u as usize].push(i);
        }
    }

    let mut per_user = Vec::new();
    let mut scores = vec![0.0f64; ds.num_items];
    for u in 0..m {
        if ds.user_degree[u] == 0 || test_items[u].is_empty() {
            continue;
        }
        let relevant = {
            let mut r = test_items[u].clone();
            r.sort_unstable();
            r
        };
        let user_row = final_emb.row(u);
        for i in 0..ds.num_items {
            scores[i] = dot(user_row, final_emb.row(m + i)).into_f64();
        }
        let exclude = merge_sorted(ds.train_items(u as u32), &dead_items);
        let topn = rank_items(&scores, &exclude, n);
        per_user.push(UserMetrics {
            user: u as u32,
            recall: recall_at_n(&topn, &relevant),
            ndcg: ndcg_at_n(&topn, &relevant, n),
        });
    }

    let count = per_user.len();
    let mean = |f: fn(&UserMetrics) -> f64| {
        if count == 0 {
            0.0
        } else {
            kahan_sum(per_user.iter().map(f)) / count as f64
        }
    };
    Ok(RankingResult {
        n,
        mean_recall: mean(|u| u.recall),
        mean_ndcg: mean(|u| u.ndcg),
        evaluated_users: count,
        per_user,
    })
}

/// How users are bucketed into the four sparsity groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupBy {
    /// Each group carries ~25% of the total train interactions.
    #[default]
    Interactions,
    /// Each group holds ~25% of the users.
    Users,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupReport {
    pub users: usize,
    pub interactions: u64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Four user groups ordered from sparsest to most active.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityGroups {
    pub groups: [GroupReport; 4],
    pub n: usize,
}

impl SparsityGroups {
    /// CSV with columns group, users, interactions, recall, ndcg.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,users,interactions,recall,ndcg\n");
        for (g, r) in self.groups.iter().enumerate() {
            out.push_str(&format!(
                "U{},{},{},{},{}\n",
                g + 1,
                r.users,
                r.interactions,
                r.recall,
                r.ndcg
            ));
        }
        out
    }
}

/// Buckets evaluated users by ascending train degree into four groups whose
/// boundaries balance the grouping criterion, then averages each group's
/// metrics.
pub fn sparsity_report(
    ds: &InteractionDataset,
    result: &RankingResult,
    group_by: GroupBy,
) -> SparsityGroups {
    let mut users: Vec<&UserMetrics> = result.per_user.iter().collect();
    users.sort_by_key(|u| (ds.user_degree[u.user as usize], u.user));

    let total_mass: u64 = match group_by {
        GroupBy::Interactions => users
            .iter()
            .map(|u| ds.user_degree[u.user as usize] as u64)
            .sum(),
        GroupBy::Users => users.len() as u64,
    };

    let mut acc: u64 = 0;
    let mut group = 0usize;
    let mut sums: [(usize, u64, Vec<f64>, Vec<f64>); 4] =
        std::array::from_fn(|_| (0, 0, Vec::new(), Vec::new()));
    for u in &users {
        let w = match group_by {
            GroupBy::Interactions => ds.user_degree[u.user as usize] as u64,
            GroupBy::Users => 1,
        };
        let g = &mut sums[group];
        g.0 += 1;
        g.1 += ds.user_degree[u.user as usize] as u64;
        g.2.push(u.recall);
        g.3.push(u.ndcg);
        acc += w;
        // close the group once it reaches its share of the mass
        while group < 3 && acc * 4 >= total_mass * (group as u64 + 1) {
            group += 1;
        }
    }

    let groups = sums.map(|(users, interactions, recalls, ndcgs)| GroupReport {
        users,
        interactions,
        recall: if users == 0 { 0.0 } else { kahan_sum(recalls.iter().copied()) / users as f64 },
        ndcg: if users == 0 { 0.0 } else { kahan_sum(ndcgs.iter().copied()) / users as f64 },
    });
    SparsityGroups { groups, n: result.n }
}

/// The fixed ablation roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoDmclUser,
    NoDmclItem,
    NoIm,
    NoCm,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoDmclUser,
        AblationVariant::NoDmclItem,
        AblationVariant::NoIm,
        AblationVariant::NoCm,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoDmclUser => "w/o DMCL (user)",
            AblationVariant::NoDmclItem => "w/o DMCL (item)",
            AblationVariant::NoIm => "w/o IM",
            AblationVariant::NoCm => "w/o DM",
        }
    }

    /// Flag-style name used on the command line and in file names.
    pub fn slug(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoDmclUser => "w/o-DMCL-user",
            AblationVariant::NoDmclItem => "w/o-DMCL-item",
            AblationVariant::NoIm => "w/o-IM",
            AblationVariant::NoCm => "w/o-DM",
        }
    }

    pub fn parse_slug(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.slug().eq_ignore_ascii_case(s))
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoDmclUser => cfg.no_dmcl_user = true,
            AblationVariant::NoDmclItem => cfg.no_dmcl_item = true,
            AblationVariant::NoIm => cfg.no_im = true,
            AblationVariant::NoCm => cfg.no_cm = true,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub recall: f64,
    pub ndcg: f64,
    pub epochs: usize,
}

/// Trains and evaluates each variant under the identical seed and returns
/// one row per variant.
pub fn run_ablations(
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    variants: &[AblationVariant],
) -> Result<Vec<AblationRow>> {
    let graph = crate::dataset::build_graph(ds);
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let vcfg = variant.apply(cfg);
        let out = train(ds, &vcfg)?;
        let res = evaluate(&out.table, &graph, ds, vcfg.layers, vcfg.include_layer0, 20)?;
        rows.push(AblationRow {
            variant: *variant,
            recall: res.mean_recall,
            ndcg: res.mean_ndcg,
            epochs: out.log.len(),
        });
    }
    Ok(rows)
}

/// Aligned comparison table over ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<18} {:>10} {:>10} {:>8}\n", "variant", "recall@20", "ndcg@20", "epochs");
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:>10.6} {:>10.6} {:>8}\n",
            r.variant.label(),
            r.recall,
            r.ndcg,
            r.epochs
        ));
    }
    out
}
