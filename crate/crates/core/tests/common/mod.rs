//! Test-only oracles, all deliberately independent of the engine's
//! implementation paths: plain nested loops, no log-sum-exp shifting, no
//! row normalization, dense matrices instead of CSR.

#![allow(dead_code)]

use mixrec_core::dataset::{InteractionDataset, Triplet};
use mixrec_core::mat::Mat;
use mixrec_core::mixing::MixBatch;
use mixrec_core::objective::LossConfig;
use mixrec_core::seeded_rng;
use rand::Rng;

pub fn rows_of(m: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Straight-line scalar re-implementations of every loss.
pub mod scalar_oracle {
    use super::*;
    use std::collections::BTreeSet;

    pub fn cos(a: &[f64], b: &[f64]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for t in 0..a.len() {
            ab += a[t] * b[t];
            aa += a[t] * a[t];
            bb += b[t] * b[t];
        }
        let na = aa.sqrt();
        let nb = bb.sqrt();
        if na < 1e-12 || nb < 1e-12 {
            0.0
        } else {
            ab / (na * nb)
        }
    }

    pub fn infonce(anchor: &[Vec<f64>], partner: &[Vec<f64>], tau: f64) -> f64 {
        let b = anchor.len();
        let mut total = 0.0;
        for k in 0..b {
            let num = (cos(&anchor[k], &partner[k]) / tau).exp();
            let mut den = 0.0;
            for v in 0..b {
                den += (cos(&anchor[k], &partner[v]) / tau).exp();
            }
            total += -(num / den).ln();
        }
        total / b as f64
    }

    /// Positive mixing contrastive loss per anchor. `positive` is the
    /// individual-mix view (or the anchor itself under no_im upstream).
    pub fn pos_loss(
        e: &[Vec<f64>],
        positive: &[Vec<f64>],
        e_dis: &[Vec<f64>],
        e_cm: Option<&[Vec<f64>]>,
        tau: f64,
    ) -> Vec<f64> {
        let b = e.len();
        let mut out = Vec::with_capacity(b);
        for k in 0..b {
            let num = (cos(&e[k], &positive[k]) / tau).exp();
            let mut den = 0.0;
            for v in 0..b {
                den += (cos(&e[k], &e_dis[v]) / tau).exp();
                if let Some(cm) = e_cm {
                    den += (cos(&e[k], &cm[v]) / tau).exp();
                }
            }
            out.push(-(num / den).ln());
        }
        out
    }

    /// Negative mixing contrastive loss per anchor: the disorder view is the
    /// anchor and the original rows are the easy negatives.
    pub fn neg_loss(
        e: &[Vec<f64>],
        positive: &[Vec<f64>],
        e_dis: &[Vec<f64>],
        e_cm: Option<&[Vec<f64>]>,
        tau: f64,
    ) -> Vec<f64> {
        let b = e.len();
        let mut out = Vec::with_capacity(b);
        for k in 0..b {
            let num = (cos(&e_dis[k], &positive[k]) / tau).exp();
            let mut den = 0.0;
            for v in 0..b {
                den += (cos(&e_dis[k], &e[v]) / tau).exp();
                if let Some(cm) = e_cm {
                    den += (cos(&e_dis[k], &cm[v]) / tau).exp();
                }
            }
            out.push(-(num / den).ln());
        }
        out
    }

    pub fn dual(pos: &[f64], neg: &[f64], beta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..beta.len() {
            acc += beta[k] * pos[k] + (1.0 - beta[k]) * neg[k];
        }
        acc
    }

    fn ln_sigmoid(x: f64) -> f64 {
        (1.0 / (1.0 + (-x).exp())).ln()
    }

    pub fn bpr_pos(u: &[Vec<f64>], i: &[Vec<f64>], j: &[Vec<f64>]) -> f64 {
        let mut acc = 0.0;
        for k in 0..u.len() {
            let mut si = 0.0;
            let mut sj = 0.0;
            for t in 0..u[k].len() {
                si += u[k][t] * i[k][t];
                sj += u[k][t] * j[k][t];
            }
            acc += -ln_sigmoid(si - sj);
        }
        acc
    }

    pub fn bpr_neg_mixed(u: &[Vec<f64>], i: &[Vec<f64>], negs: &[Vec<Vec<f64>>]) -> f64 {
        let mut acc = 0.0;
        for k in 0..u.len() {
            let mut si = 0.0;
            for t in 0..u[k].len() {
                si += u[k][t] * i[k][t];
            }
            let mut sn = 0.0;
            for neg in negs {
                for t in 0..u[k].len() {
                    sn += u[k][t] * neg[k][t];
                }
            }
            acc += -ln_sigmoid(si - sn);
        }
        acc
    }

    /// The whole objective recomputed from a built batch and a table.
    pub struct OracleReport {
        pub bpr_pos: f64,
        pub bpr_neg: f64,
        pub main: f64,
        pub cl_user: f64,
        pub cl_item: f64,
        pub reg: f64,
        pub total: f64,
    }

    pub fn total(mix: &MixBatch<f64>, table: &Mat<f64>, cfg: &LossConfig) -> OracleReport {
        let b = mix.batch_size();
        let e_u = rows_of(&mix.e_user);
        let e_i = rows_of(&mix.e_item);
        let e_j = rows_of(&mix.e_neg);
        let u_dis = rows_of(&mix.e_user_dis);
        let i_dis = rows_of(&mix.e_item_dis);
        let u_im = rows_of(&mix.e_user_im);
        let i_im = rows_of(&mix.e_item_im);
        let u_cm = rows_of(&mix.e_user_cm);
        let i_cm = rows_of(&mix.e_item_cm);
        let negs: Vec<Vec<Vec<f64>>> = mix.e_neg_im.iter().map(rows_of).collect();
        let beta_u: Vec<f64> = mix.plan.beta_user.clone();
        let beta_i: Vec<f64> = mix.plan.beta_item.clone();

        let bpr_pos_v = bpr_pos(&e_u, &e_i, &e_j);
        let bpr_neg_v = if cfg.no_im {
            0.0
        } else {
            bpr_neg_mixed(&e_u, &e_i, &negs)
        };

        let main = if cfg.no_im {
            bpr_pos_v
        } else {
            let mut acc = 0.0;
            for k in 0..b {
                let w = mix.plan.main_beta.unwrap_or(beta_i[k]);
                let one_u = vec![e_u[k].clone()];
                let one_i = vec![e_i[k].clone()];
                let one_j = vec![e_j[k].clone()];
                let one_negs: Vec<Vec<Vec<f64>>> =
                    negs.iter().map(|n| vec![n[k].clone()]).collect();
                acc += w * bpr_pos(&one_u, &one_i, &one_j)
                    + (1.0 - w) * bpr_neg_mixed(&one_u, &one_i, &one_negs);
            }
            acc
        };

        let cm_u = (!cfg.no_cm).then_some(u_cm.as_slice());
        let cm_i = (!cfg.no_cm).then_some(i_cm.as_slice());
        let pos_u: &[Vec<f64>] = if cfg.no_im { &e_u } else { &u_im };
        let pos_i: &[Vec<f64>] = if cfg.no_im { &e_i } else { &i_im };
        let neg_pos_u: &[Vec<f64>] = if cfg.no_im { &u_dis } else { &u_im };
        let neg_pos_i: &[Vec<f64>] = if cfg.no_im { &i_dis } else { &i_im };

        let cl_user = if cfg.no_dmcl_user || b == 1 {
            0.0
        } else {
            let p = pos_loss(&e_u, pos_u, &u_dis, cm_u, cfg.tau);
            let n = neg_loss(&e_u, neg_pos_u, &u_dis, cm_u, cfg.tau);
            dual(&p, &n, &beta_u)
        };
        let cl_item = if cfg.no_dmcl_item || b == 1 {
            0.0
        } else {
            let p = pos_loss(&e_i, pos_i, &i_dis, cm_i, cfg.tau);
            let n = neg_loss(&e_i, neg_pos_i, &i_dis, cm_i, cfg.tau);
            dual(&p, &n, &beta_i)
        };

        let reg = {
            let mut acc = 0.0;
            if cfg.reg_full_table {
                for r in 0..table.rows() {
                    for &v in table.row(r) {
                        acc += v * v;
                    }
                }
                acc
            } else {
                let mut uniq = BTreeSet::new();
                for t in &mix.triplets {
                    uniq.insert(t.user as usize);
                    uniq.insert(mix.num_users + t.pos as usize);
                    uniq.insert(mix.num_users + t.neg as usize);
                }
                for r in uniq {
                    for &v in table.row(r) {
                        acc += v * v;
                    }
                }
                acc / b as f64
            }
        };

        let total = main + cfg.lambda1 * (cl_user + cl_item) + cfg.lambda2 * reg;
        OracleReport {
            bpr_pos: bpr_pos_v,
            bpr_neg: bpr_neg_v,
            main,
            cl_user,
            cl_item,
            reg,
            total,
        }
    }
}

/// Dense normalized adjacency built straight from the dataset's degrees,
/// independent of the CSR construction.
pub fn dense_adjacency(ds: &InteractionDataset) -> Vec<Vec<f64>> {
    let nodes = ds.num_users + ds.num_items;
    let mut a = vec![vec![0.0; nodes]; nodes];
    for &(u, i) in &ds.train {
        let w = 1.0
            / ((ds.user_degree[u as usize] as f64) * (ds.item_degree[i as usize] as f64)).sqrt();
        a[u as usize][ds.num_users + i as usize] = w;
        a[ds.num_users + i as usize][u as usize] = w;
    }
    a
}

pub fn dense_apply(a: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let d = x[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for r in 0..n {
        for c in 0..n {
            let w = a[r][c];
            if w != 0.0 {
                for t in 0..d {
                    out[r][t] += w * x[c][t];
                }
            }
        }
    }
    out
}

/// Central finite differences of a scalar function of a matrix.
pub fn central_differences(
    f: &mut dyn FnMut(&Mat<f64>) -> f64,
    at: &Mat<f64>,
    h: f64,
) -> Mat<f64> {
    let mut grad = Mat::zeros(at.rows(), at.cols());
    let mut x = at.clone();
    for r in 0..at.rows() {
        for c in 0..at.cols() {
            let orig = x.row(r)[c];
            x.row_mut(r)[c] = orig + h;
            let fp = f(&x);
            x.row_mut(r)[c] = orig - h;
            let fm = f(&x);
            x.row_mut(r)[c] = orig;
            grad.row_mut(r)[c] = (fp - fm) / (2.0 * h);
        }
    }
    grad
}

/// Full-sort ranking oracle: every non-excluded item sorted by descending
/// score with ascending-index ties, truncated to n.
pub fn brute_force_topn(scores: &[f64], exclude: &[u32], n: usize) -> Vec<u32> {
    let mut cand: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| !exclude.contains(i))
        .collect();
    cand.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    cand.truncate(n);
    cand
}

pub fn brute_recall(topn: &[u32], relevant: &[u32]) -> f64 {
    let hits = topn.iter().filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

pub fn brute_ndcg(topn: &[u32], relevant: &[u32], n: usize) -> f64 {
    let mut dcg = 0.0;
    for (pos, item) in topn.iter().enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / ((pos as f64) + 2.0).log2();
        }
    }
    let mut idcg = 0.0;
    for p in 0..n.min(relevant.len()) {
        idcg += 1.0 / ((p as f64) + 2.0).log2();
    }
    dcg / idcg
}

/// Simpson's rule.
fn simpson(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + h * k as f64);
    }
    acc * h / 3.0
}

/// Probability mass of Beta(alpha, alpha) on [lo, hi] (0 < lo < hi < 1) by
/// quadrature. The normalizing constant integrates through the substitution
/// x = s^(1/alpha), which removes the endpoint singularity.
pub fn beta_mass(alpha: f64, lo: f64, hi: f64) -> f64 {
    let density = |x: f64| x.powf(alpha - 1.0) * (1.0 - x).powf(alpha - 1.0);
    let numer = simpson(&density, lo, hi, 20_000);
    // B(alpha, alpha) = 2 * integral_0^(1/2) x^(a-1) (1-x)^(a-1) dx
    //                 = (2/alpha) * integral_0^(0.5^alpha) (1 - s^(1/alpha))^(a-1) ds
    let sub = |s: f64| (1.0 - s.powf(1.0 / alpha)).powf(alpha - 1.0);
    let norm = 2.0 / alpha * simpson(&sub, 0.0, 0.5f64.powf(alpha), 20_000);
    numer / norm
}

/// Two-sided Kolmogorov-Smirnov statistic against Uniform(0, 1).
pub fn ks_uniform(draws: &mut [f64]) -> f64 {
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = draws.len() as f64;
    let mut stat: f64 = 0.0;
    for (i, &x) in draws.iter().enumerate() {
        let upper = (i as f64 + 1.0) / n - x;
        let lower = x - i as f64 / n;
        stat = stat.max(upper.max(lower));
    }
    stat
}

/// Clustered interaction data: users and items split into `blocks` aligned
/// groups, dense within a block and sparse across, with a per-user holdout.
pub fn block_dataset(
    num_users: usize,
    num_items: usize,
    blocks: usize,
    p_in: f64,
    p_out: f64,
    test_fraction: f64,
    seed: u64,
) -> InteractionDataset {
    let mut rng = seeded_rng(seed);
    let user_block = |u: usize| u * blocks / num_users;
    let item_block = |i: usize| i * blocks / num_items;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in 0..num_users {
        let mut items = Vec::new();
        for i in 0..num_items {
            let p = if user_block(u) == item_block(i) { p_in } else { p_out };
            if rng.random_range(0.0..1.0) < p {
                items.push(i as u32);
            }
        }
        if items.is_empty() {
            // keep every user connected
            let lo = user_block(u) * num_items / blocks;
            items.push((lo + rng.random_range(0..num_items / blocks)) as u32);
        }
        // per-user holdout, keeping at least one train interaction
        for k in (1..items.len()).rev() {
            let swap = rng.random_range(0..=k);
            items.swap(k, swap);
        }
        let n_test = ((items.len() as f64) * test_fraction).floor() as usize;
        let n_test = n_test.min(items.len() - 1);
        let cut = items.len() - n_test;
        for &i in &items[..cut] {
            train.push((u as u32, i));
        }
        for &i in &items[cut..] {
            test.push((u as u32, i));
        }
    }
    InteractionDataset::from_pairs(num_users, num_items, train, test).unwrap()
}

/// Random bipartite dataset where every user has at least one interaction
/// and no user interacts with every item (so negatives always exist).
pub fn random_dataset(
    num_users: usize,
    num_items: usize,
    extra_pairs: usize,
    seed: u64,
) -> InteractionDataset {
    let mut rng = seeded_rng(seed);
    let mut seen = std::collections::HashSet::new();
    let mut degree = vec![0usize; num_users];
    let mut train = Vec::new();
    for u in 0..num_users as u32 {
        let i = rng.random_range(0..num_items as u32);
        seen.insert((u, i));
        degree[u as usize] += 1;
        train.push((u, i));
    }
    for _ in 0..extra_pairs {
        let u = rng.random_range(0..num_users as u32);
        if degree[u as usize] + 1 >= num_items {
            continue;
        }
        let i = rng.random_range(0..num_items as u32);
        if seen.insert((u, i)) {
            degree[u as usize] += 1;
            train.push((u, i));
        }
    }
    InteractionDataset::from_pairs(num_users, num_items, train, vec![]).unwrap()
}

/// Uniform random triplets over a dataset (without the engine's sampler, so
/// tests control them directly).
pub fn random_triplets(ds: &InteractionDataset, b: usize, seed: u64) -> Vec<Triplet> {
    let mut rng = seeded_rng(seed);
    (0..b)
        .map(|_| {
            let (user, pos) = ds.train[rng.random_range(0..ds.train.len())];
            let neg = loop {
                let j = rng.random_range(0..ds.num_items as u32);
                if !ds.has_train(user, j) {
                    break j;
                }
            };
            Triplet { user, pos, neg }
        })
        .collect()
}
