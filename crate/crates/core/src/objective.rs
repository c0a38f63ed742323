//! Loss functions: the positive/negative mixing contrastive pair and their
//! Beta-weighted combination per side, the two pairwise ranking terms, the
//! weighted main loss, and the regularized total, together with exact
//! gradients with respect to the batch view matrices.
//!
//! Contrastive denominators sum over the mini-batch (the anchor's own term
//! included). Softmax terms go through a max-shifted log-sum-exp and the
//! ranking losses through `-ln sigmoid(x) = softplus(-x)`, so every loss is
//! finite for finite inputs across the supported temperature range.

use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingTable;
use crate::error::{MixRecError, Result};
use crate::mat::{axpy, dot, norm_sq, Mat};
use crate::mixing::{MixBatch, ViewGrads};
use crate::real::Real;

/// Norms below this are treated as zero: the cosine is defined 0 there and
/// so is its gradient.
pub const COSINE_NORM_GUARD: f64 = 1e-12;

/// Which side of the bipartite batch a contrastive loss runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

/// Loss weights and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of the two contrastive losses.
    pub lambda1: f64,
    /// Weight of the L2 term.
    pub lambda2: f64,
    /// Drop the user-side contrastive loss.
    pub no_dmcl_user: bool,
    /// Drop the item-side contrastive loss.
    pub no_dmcl_item: bool,
    /// Remove individual mixing: the contrastive positive becomes the anchor
    /// itself and the main loss reduces to the plain ranking term.
    pub no_im: bool,
    /// Remove collective mixing from the contrastive denominators.
    pub no_cm: bool,
    /// Regularize the full table instead of the rows touched by the batch.
    pub reg_full_table: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lambda1: 0.3,
            lambda2: 1e-4,
            no_dmcl_user: false,
            no_dmcl_item: false,
            no_im: false,
            no_cm: false,
            reg_full_table: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(MixRecError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(MixRecError::Config(
                "lambda1 and lambda2 must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step loss breakdown. `total = main + lambda1 * (cl_user + cl_item)
/// + lambda2 * reg`, with ablated terms reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bpr_pos: f64,
    pub bpr_neg: f64,
    pub main: f64,
    pub cl_user: f64,
    pub cl_item: f64,
    pub reg: f64,
    pub total: f64,
}

/// One `--log-losses` line.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLossRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Cosine similarity; 0 when either norm is below the guard.
pub fn cosine_sim<T: Real>(a: &[T], b: &[T]) -> T {
    let na = norm_sq(a).sqrt();
    let nb = norm_sq(b).sqrt();
    let guard = T::from_f64(COSINE_NORM_GUARD);
    if na < guard || nb < guard {
        return T::zero();
    }
    dot(a, b) / (na * nb)
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn logsumexp<T: Real>(z: &[T]) -> T {
    let m = z.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
    if !m.is_finite() {
        return m;
    }
    let s: T = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Row-normalized matrix with per-row inverse norms; guarded rows are zeroed
/// and their inverse norm set to 0, which makes both the similarity and its
/// gradient vanish there.
struct Normalized<T> {
    rows: Mat<T>,
    inv: Vec<T>,
}

fn normalize_rows<T: Real>(m: &Mat<T>) -> Normalized<T> {
    let mut rows = m.clone();
    let mut inv = Vec::with_capacity(m.rows());
    let guard = T::from_f64(COSINE_NORM_GUARD);
    for k in 0..m.rows() {
        let n = norm_sq(m.row(k)).sqrt();
        if n < guard {
            for x in rows.row_mut(k) {
                *x = T::zero();
            }
            inv.push(T::zero());
        } else {
            let s = T::one() / n;
            for x in rows.row_mut(k) {
                *x *= s;
            }
            inv.push(s);
        }
    }
    Normalized { rows, inv }
}

/// Reference InfoNCE over matched view matrices, mean over anchors; kept for
/// comparison tests.
pub fn infonce<T: Real>(anchor: &Mat<T>, partner: &Mat<T>, tau: f64) -> f64 {
    assert_eq!(anchor.rows(), partner.rows());
    assert_eq!(anchor.cols(), partner.cols());
    let b = anchor.rows();
    let inv_tau = T::from_f64(1.0 / tau);
    let na = normalize_rows(anchor);
    let np = normalize_rows(partner);
    let mut z = vec![T::zero(); b];
    let mut total = 0.0f64;
    for k in 0..b {
        for v in 0..b {
            z[v] = dot(na.rows.row(k), np.rows.row(v)) * inv_tau;
        }
        let loss = logsumexp(&z) - z[k];
        total += loss.into_f64();
    }
    total / b as f64
}

/// The four matrices of one contrastive loss instance.
struct ClViews<'a, T> {
    anchor: &'a Mat<T>,
    positive: &'a Mat<T>,
    neg_a: &'a Mat<T>,
    neg_b: Option<&'a Mat<T>>,
}

#[derive(Clone, Copy)]
enum ClKind {
    Pos,
    Neg,
}

fn cl_views<'a, T: Real>(
    mix: &'a MixBatch<T>,
    side: Side,
    kind: ClKind,
    cfg: &LossConfig,
) -> ClViews<'a, T> {
    let (e, e_dis, e_im, e_cm) = match side {
        Side::User => (&mix.e_user, &mix.e_user_dis, &mix.e_user_im, &mix.e_user_cm),
        Side::Item => (&mix.e_item, &mix.e_item_dis, &mix.e_item_im, &mix.e_item_cm),
    };
    let neg_b = (!cfg.no_cm).then_some(e_cm);
    match kind {
        // anchor vs its individual mix, pushed from every disorder row (and
        // collective mix) in the batch
        ClKind::Pos => ClViews {
            anchor: e,
            positive: if cfg.no_im { e } else { e_im },
            neg_a: e_dis,
            neg_b,
        },
        // the disorder view as anchor, original rows as easy negatives
        ClKind::Neg => ClViews {
            anchor: e_dis,
            positive: if cfg.no_im { e_dis } else { e_im },
            neg_a: e,
            neg_b,
        },
    }
}

fn contrastive_forward<T: Real>(views: &ClViews<'_, T>, tau: f64) -> Vec<T> {
    let b = views.anchor.rows();
    let inv_tau = T::from_f64(1.0 / tau);
    let na = normalize_rows(views.anchor);
    let np = normalize_rows(views.positive);
    let n1 = normalize_rows(views.neg_a);
    let n2 = views.neg_b.map(normalize_rows);
    let terms = if n2.is_some() { 2 * b } else { b };
    let mut z = vec![T::zero(); terms];
    let mut out = Vec::with_capacity(b);
    for k in 0..b {
        let anchor = na.rows.row(k);
        let s_pos = dot(anchor, np.rows.row(k));
        for v in 0..b {
            z[v] = dot(anchor, n1.rows.row(v)) * inv_tau;
        }
        if let Some(n2) = &n2 {
            for v in 0..b {
                z[b + v] = dot(anchor, n2.rows.row(v)) * inv_tau;
            }
        }
        out.push(logsumexp(&z) - s_pos * inv_tau);
    }
    out
}

/// Per-anchor positive mixing contrastive loss; empty on degenerate batches.
pub fn pos_mix_contrastive<T: Real>(mix: &MixBatch<T>, side: Side, cfg: &LossConfig) -> Vec<T> {
    if mix.is_degenerate() {
        return Vec::new();
    }
    contrastive_forward(&cl_views(mix, side, ClKind::Pos, cfg), cfg.tau)
}

/// Per-anchor negative mixing contrastive loss; empty on degenerate batches.
pub fn neg_mix_contrastive<T: Real>(mix: &MixBatch<T>, side: Side, cfg: &LossConfig) -> Vec<T> {
    if mix.is_degenerate() {
        return Vec::new();
    }
    contrastive_forward(&cl_views(mix, side, ClKind::Neg, cfg), cfg.tau)
}

/// Beta-weighted sum of the two contrastive losses for one side; 0 when the
/// side is ablated or the batch degenerate.
pub fn dual_mix_cl<T: Real>(mix: &MixBatch<T>, side: Side, cfg: &LossConfig) -> T {
    let ablated = match side {
        Side::User => cfg.no_dmcl_user,
        Side::Item => cfg.no_dmcl_item,
    };
    if ablated || mix.is_degenerate() {
        return T::zero();
    }
    let beta = match side {
        Side::User => &mix.plan.beta_user,
        Side::Item => &mix.plan.beta_item,
    };
    let pos = pos_mix_contrastive(mix, side, cfg);
    let neg = neg_mix_contrastive(mix, side, cfg);
    let mut acc = T::zero();
    for k in 0..beta.len() {
        acc += beta[k] * pos[k] + (T::one() - beta[k]) * neg[k];
    }
    acc
}

/// Pairwise ranking loss over (user, positive, negative) rows:
/// `sum_k softplus(-(u_k . i_k - u_k . j_k))`.
pub fn bpr_pos<T: Real>(e_user: &Mat<T>, e_item: &Mat<T>, e_neg: &Mat<T>) -> T {
    let mut acc = T::zero();
    for k in 0..e_user.rows() {
        let u = e_user.row(k);
        let x = dot(u, e_item.row(k)) - dot(u, e_neg.row(k));
        acc += softplus(-x);
    }
    acc
}

/// Ranking loss against mixed negatives; the mixed-negative scores are
/// summed inside the sigmoid.
pub fn bpr_neg_mixed<T: Real>(e_user: &Mat<T>, e_item: &Mat<T>, mixed_negs: &[Mat<T>]) -> T {
    assert!(!mixed_negs.is_empty(), "at least one mixed-negative view");
    let mut acc = T::zero();
    for k in 0..e_user.rows() {
        let u = e_user.row(k);
        let mut neg_score = T::zero();
        for m in mixed_negs {
            neg_score += dot(u, m.row(k));
        }
        let y = dot(u, e_item.row(k)) - neg_score;
        acc += softplus(-y);
    }
    acc
}

fn main_weight<T: Real>(mix: &MixBatch<T>, k: usize) -> T {
    mix.plan.main_beta.unwrap_or(mix.plan.beta_item[k])
}

/// Combination of the two ranking losses, weighted per triplet by the
/// item-side mixing coefficient (or by one scalar draw per batch when the
/// plan carries one). Under `no_im` this is the plain ranking loss.
pub fn main_loss<T: Real>(mix: &MixBatch<T>, cfg: &LossConfig) -> T {
    if cfg.no_im {
        return bpr_pos(&mix.e_user, &mix.e_item, &mix.e_neg);
    }
    let mut acc = T::zero();
    for k in 0..mix.batch_size() {
        let u = mix.e_user.row(k);
        let pos_score = dot(u, mix.e_item.row(k));
        let x = pos_score - dot(u, mix.e_neg.row(k));
        let mut neg_score = T::zero();
        for m in &mix.e_neg_im {
            neg_score += dot(u, m.row(k));
        }
        let y = pos_score - neg_score;
        let w = main_weight(mix, k);
        acc += w * softplus(-x) + (T::one() - w) * softplus(-y);
    }
    acc
}

/// Distinct embedding rows touched by the batch, in ascending order (sorted
/// so that the regularizer sums in a reproducible order).
pub(crate) fn touched_rows<T: Real>(mix: &MixBatch<T>) -> Vec<u32> {
    let m = mix.num_users as u32;
    let mut rows = Vec::with_capacity(3 * mix.batch_size());
    for t in &mix.triplets {
        rows.push(t.user);
        rows.push(m + t.pos);
        rows.push(m + t.neg);
    }
    rows.sort_unstable();
    rows.dedup();
    rows
}

fn reg_term<T: Real>(mix: &MixBatch<T>, table: &EmbeddingTable<T>, cfg: &LossConfig) -> T {
    let mut acc = T::zero();
    if cfg.reg_full_table {
        for r in 0..table.rows() {
            acc += norm_sq(table.mat().row(r));
        }
        acc
    } else {
        for &r in &touched_rows(mix) {
            acc += norm_sq(table.mat().row(r as usize));
        }
        acc / T::from_f64(mix.batch_size() as f64)
    }
}

fn check_finite(name: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MixRecError::NonFinite { term: name })
    }
}

/// Full objective: `main + lambda1 * (cl_user + cl_item) + lambda2 * reg`.
pub fn total_loss<T: Real>(
    mix: &MixBatch<T>,
    table: &EmbeddingTable<T>,
    cfg: &LossConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    let bpr_pos_v = check_finite(
        "bpr_pos",
        bpr_pos(&mix.e_user, &mix.e_item, &mix.e_neg).into_f64(),
    )?;
    let bpr_neg_v = if cfg.no_im {
        0.0
    } else {
        check_finite(
            "bpr_neg",
            bpr_neg_mixed(&mix.e_user, &mix.e_item, &mix.e_neg_im).into_f64(),
        )?
    };
    let main = check_finite("main", main_loss(mix, cfg).into_f64())?;
    let cl_user = check_finite("cl_user", dual_mix_cl(mix, Side::User, cfg).into_f64())?;
    let cl_item = check_finite("cl_item", dual_mix_cl(mix, Side::Item, cfg).into_f64())?;
    let reg = check_finite("reg", reg_term(mix, table, cfg).into_f64())?;
    let total = check_finite(
        "total",
        main + cfg.lambda1 * (cl_user + cl_item) + cfg.lambda2 * reg,
    )?;
    Ok(LossReport {
        bpr_pos: bpr_pos_v,
        bpr_neg: bpr_neg_v,
        main,
        cl_user,
        cl_item,
        reg,
        total,
    })
}

/// Gradients of one contrastive instance with respect to its four matrices.
struct ClGrads<T> {
    anchor: Mat<T>,
    positive: Mat<T>,
    neg_a: Mat<T>,
    neg_b: Option<Mat<T>>,
}

/// Accumulates `weights[k] * d loss_k / d views` for every anchor.
///
/// With row-normalized matrices the cosine gradient is
/// `d s(a, b) / d a = (b_hat - s * a_hat) / |a|`, and the denominator's
/// softmax probabilities scale each pairwise term.
fn contrastive_backward<T: Real>(views: &ClViews<'_, T>, tau: f64, weights: &[T]) -> ClGrads<T> {
    let b = views.anchor.rows();
    let d = views.anchor.cols();
    let inv_tau = T::from_f64(1.0 / tau);
    let na = normalize_rows(views.anchor);
    let np = normalize_rows(views.positive);
    let n1 = normalize_rows(views.neg_a);
    let n2 = views.neg_b.map(normalize_rows);

    let mut g_anchor = Mat::zeros(b, d);
    let mut g_positive = Mat::zeros(b, d);
    let mut g_neg_a = Mat::zeros(b, d);
    let mut g_neg_b = n2.as_ref().map(|_| Mat::zeros(b, d));

    let mut s1 = vec![T::zero(); b];
    let mut s2 = vec![T::zero(); b];
    let mut z = vec![T::zero(); if n2.is_some() { 2 * b } else { b }];

    for k in 0..b {
        let w = weights[k];
        if w == T::zero() {
            continue;
        }
        let anchor = na.rows.row(k).to_vec();
        let inv_a = na.inv[k];

        // numerator: -w/tau * d s(anchor, positive_k)
        let s_pos = dot(&anchor, np.rows.row(k));
        let c = -w * inv_tau;
        {
            let ga = g_anchor.row_mut(k);
            axpy(c * inv_a, np.rows.row(k), ga);
            axpy(-c * inv_a * s_pos, &anchor, ga);
        }
        {
            let gp = g_positive.row_mut(k);
            axpy(c * np.inv[k], &anchor, gp);
            axpy(-c * np.inv[k] * s_pos, np.rows.row(k), gp);
        }

        // denominator: softmax-weighted pull toward every negative term
        for v in 0..b {
            s1[v] = dot(&anchor, n1.rows.row(v));
            z[v] = s1[v] * inv_tau;
        }
        if let Some(n2) = &n2 {
            for v in 0..b {
                s2[v] = dot(&anchor, n2.rows.row(v));
                z[b + v] = s2[v] * inv_tau;
            }
        }
        let lse = logsumexp(&z);
        for v in 0..b {
            let p = (z[v] - lse).exp();
            let c = w * inv_tau * p;
            {
                let ga = g_anchor.row_mut(k);
                axpy(c * inv_a, n1.rows.row(v), ga);
                axpy(-c * inv_a * s1[v], &anchor, ga);
            }
            let gn = g_neg_a.row_mut(v);
            axpy(c * n1.inv[v], &anchor, gn);
            axpy(-c * n1.inv[v] * s1[v], n1.rows.row(v), gn);
        }
        if let (Some(n2), Some(g_neg_b)) = (&n2, &mut g_neg_b) {
            for v in 0..b {
                let p = (z[b + v] - lse).exp();
                let c = w * inv_tau * p;
                {
                    let ga = g_anchor.row_mut(k);
                    axpy(c * inv_a, n2.rows.row(v), ga);
                    axpy(-c * inv_a * s2[v], &anchor, ga);
                }
                let gn = g_neg_b.row_mut(v);
                axpy(c * n2.inv[v], &anchor, gn);
                axpy(-c * n2.inv[v] * s2[v], n2.rows.row(v), gn);
            }
        }
    }

    ClGrads {
        anchor: g_anchor,
        positive: g_positive,
        neg_a: g_neg_a,
        neg_b: g_neg_b,
    }
}

fn apply_cl_grads<T: Real>(
    grads: &mut ViewGrads<T>,
    side: Side,
    kind: ClKind,
    cfg: &LossConfig,
    cl: ClGrads<T>,
) {
    // destination fields mirror the view selection in `cl_views`
    let (g_e, g_dis, g_im, g_cm) = match side {
        Side::User => (
            &mut grads.e_user,
            &mut grads.e_user_dis,
            &mut grads.e_user_im,
            &mut grads.e_user_cm,
        ),
        Side::Item => (
            &mut grads.e_item,
            &mut grads.e_item_dis,
            &mut grads.e_item_im,
            &mut grads.e_item_cm,
        ),
    };
    match kind {
        ClKind::Pos => {
            g_e.add_assign(&cl.anchor);
            if cfg.no_im {
                g_e.add_assign(&cl.positive);
            } else {
                g_im.add_assign(&cl.positive);
            }
            g_dis.add_assign(&cl.neg_a);
        }
        ClKind::Neg => {
            g_dis.add_assign(&cl.anchor);
            if cfg.no_im {
                g_dis.add_assign(&cl.positive);
            } else {
                g_im.add_assign(&cl.positive);
            }
            g_e.add_assign(&cl.neg_a);
        }
    }
    if let Some(nb) = cl.neg_b {
        g_cm.add_assign(&nb);
    }
}

/// Computes the loss report together with the exact gradient of the total
/// (excluding the L2 term, which acts on the raw table rather than on the
/// views) with respect to every view matrix.
pub fn total_loss_backward<T: Real>(
    mix: &MixBatch<T>,
    table: &EmbeddingTable<T>,
    cfg: &LossConfig,
) -> Result<(LossReport, ViewGrads<T>)> {
    let report = total_loss(mix, table, cfg)?;
    let mut grads = ViewGrads::zeros_like(mix);
    let b = mix.batch_size();
    let lambda1 = T::from_f64(cfg.lambda1);

    // contrastive terms
    if cfg.lambda1 > 0.0 && !mix.is_degenerate() {
        for side in [Side::User, Side::Item] {
            let ablated = match side {
                Side::User => cfg.no_dmcl_user,
                Side::Item => cfg.no_dmcl_item,
            };
            if ablated {
                continue;
            }
            let beta = match side {
                Side::User => &mix.plan.beta_user,
                Side::Item => &mix.plan.beta_item,
            };
            let w_pos: Vec<T> = beta.iter().map(|&bk| lambda1 * bk).collect();
            let w_neg: Vec<T> = beta.iter().map(|&bk| lambda1 * (T::one() - bk)).collect();
            for (kind, w) in [(ClKind::Pos, &w_pos), (ClKind::Neg, &w_neg)] {
                let views = cl_views(mix, side, kind, cfg);
                let cl = contrastive_backward(&views, cfg.tau, w);
                apply_cl_grads(&mut grads, side, kind, cfg, cl);
            }
        }
    }

    // main ranking loss
    for k in 0..b {
        let u = mix.e_user.row(k);
        let pos_score = dot(u, mix.e_item.row(k));
        let x = pos_score - dot(u, mix.e_neg.row(k));
        let w = if cfg.no_im { T::one() } else { main_weight(mix, k) };

        // w * softplus(-x): d/dx = -w * sigmoid(-x)
        let gx = -w * sigmoid(-x);
        {
            let gu = grads.e_user.row_mut(k);
            axpy(gx, mix.e_item.row(k), gu);
            axpy(-gx, mix.e_neg.row(k), gu);
        }
        axpy(gx, u, grads.e_item.row_mut(k));
        axpy(-gx, u, grads.e_neg.row_mut(k));

        if cfg.no_im {
            continue;
        }
        let mut neg_score = T::zero();
        for m in &mix.e_neg_im {
            neg_score += dot(u, m.row(k));
        }
        let y = pos_score - neg_score;
        let gy = -(T::one() - w) * sigmoid(-y);
        {
            let gu = grads.e_user.row_mut(k);
            axpy(gy, mix.e_item.row(k), gu);
            for m in &mix.e_neg_im {
                axpy(-gy, m.row(k), gu);
            }
        }
        axpy(gy, u, grads.e_item.row_mut(k));
        for (m, g_im) in mix.e_neg_im.iter().zip(&mut grads.e_neg_im) {
            let _ = m;
            axpy(-gy, u, g_im.row_mut(k));
        }
    }

    Ok((report, grads))
}
