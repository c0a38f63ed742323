//! Construction of the three auxiliary views per anchor: the disorder view
//! (batch rows gathered through a random permutation), the individual mix
//! (per-anchor Beta-weighted interpolation with the disorder view), and the
//! collective mix (a Dirichlet-weighted convex combination of the whole
//! batch, shared by all anchors of a side).
//!
//! All stochastic coefficients are drawn once per batch into a [`MixPlan`]
//! and are constants of the training step; rebuilding the views from a plan
//! with different embeddings is how gradient checks perturb the input.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Distribution;

use crate::dataset::Triplet;
use crate::error::{MixRecError, Result};
use crate::mat::{axpy, Mat};
use crate::real::Real;

/// Beta draws exactly at a boundary are clamped inward so that dual-mixing
/// weights stay strictly convex.
pub const BETA_CLAMP: f64 = 1e-12;

const DIRICHLET_MAX_RETRIES: usize = 16;

/// Knobs of the mixing stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MixParams {
    /// Shape parameter of Beta(alpha, alpha) and of the symmetric Dirichlet.
    pub alpha: f64,
    /// Mixed negatives per positive pair; each beyond the first draws a
    /// fresh permutation and fresh Beta vector.
    pub mix_neg_count: usize,
    /// Resample the collective mix per anchor instead of once per batch.
    pub cm_per_anchor: bool,
    /// Weight the two ranking losses by a single Beta draw per batch
    /// instead of per-triplet coefficients.
    pub main_beta_scalar: bool,
}

impl Default for MixParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            mix_neg_count: 1,
            cm_per_anchor: false,
            main_beta_scalar: false,
        }
    }
}

impl MixParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(MixRecError::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.mix_neg_count < 1 {
            return Err(MixRecError::Config(
                "mix_neg_count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One draw from Beta(alpha, alpha), clamped away from {0, 1}.
pub fn sample_beta<R: Rng>(alpha: f64, rng: &mut R) -> f64 {
    let dist = rand_distr::Beta::new(alpha, alpha).expect("alpha must be positive");
    dist.sample(rng).clamp(BETA_CLAMP, 1.0 - BETA_CLAMP)
}

fn sample_beta_vec<R: Rng>(n: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let dist = rand_distr::Beta::new(alpha, alpha).expect("alpha must be positive");
    (0..n)
        .map(|_| dist.sample(rng).clamp(BETA_CLAMP, 1.0 - BETA_CLAMP))
        .collect()
}

/// One draw from the symmetric Dirichlet(alpha, ..., alpha) over `n`
/// components: `n` independent Gamma(alpha, 1) draws normalized by their
/// sum. An all-zero underflow is resampled a bounded number of times.
pub fn sample_dirichlet<R: Rng>(n: usize, alpha: f64, rng: &mut R) -> Result<Vec<f64>> {
    assert!(n >= 1, "dirichlet dimension must be at least 1");
    let gamma = rand_distr::Gamma::new(alpha, 1.0).expect("alpha must be positive");
    for _ in 0..DIRICHLET_MAX_RETRIES {
        let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum.is_finite() && sum > 0.0 {
            for d in &mut draws {
                *d /= sum;
            }
            return Ok(draws);
        }
    }
    Err(MixRecError::DirichletUnderflow {
        alpha,
        retries: DIRICHLET_MAX_RETRIES,
    })
}

fn sample_perm<R: Rng>(n: usize, rng: &mut R) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    perm.shuffle(rng);
    perm
}

/// Extra mixed-negative draw (beyond the first, which reuses the plan's
/// `perm_neg` and `beta_item`).
#[derive(Debug, Clone, PartialEq)]
pub struct NegDraw<T> {
    pub perm: Vec<u32>,
    pub beta: Vec<T>,
}

/// Every stochastic coefficient of one training step.
///
/// Sampling consumes the generator in a fixed, documented order:
/// `perm_user`, `perm_item`, `perm_neg`, `beta_user`, `beta_item`,
/// `dirichlet_user`, `dirichlet_item`, then one (perm, beta) pair per extra
/// mixed negative, then the optional scalar main-loss weight. The order and
/// count of draws do not depend on ablation flags, so ablated runs consume
/// identical streams.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan<T> {
    pub perm_user: Vec<u32>,
    pub perm_item: Vec<u32>,
    pub perm_neg: Vec<u32>,
    pub beta_user: Vec<T>,
    pub beta_item: Vec<T>,
    /// One row (shared collective mix) or |B| rows (per-anchor mode); each
    /// row is a Dirichlet draw over the batch.
    pub dirichlet_user: Mat<T>,
    pub dirichlet_item: Mat<T>,
    pub extra_negs: Vec<NegDraw<T>>,
    pub main_beta: Option<T>,
    /// Set for singleton batches, whose disorder view collapses onto the
    /// anchor; contrastive terms are skipped downstream.
    pub degenerate: bool,
}

impl<T: Real> MixPlan<T> {
    pub fn sample<R: Rng>(batch_size: usize, params: &MixParams, rng: &mut R) -> Result<Self> {
        params.validate()?;
        if batch_size == 0 {
            return Err(MixRecError::Config("batch must be nonempty".into()));
        }
        let b = batch_size;
        let alpha = params.alpha;
        let to_t = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();

        let perm_user = sample_perm(b, rng);
        let perm_item = sample_perm(b, rng);
        let perm_neg = sample_perm(b, rng);
        let beta_user = to_t(sample_beta_vec(b, alpha, rng));
        let beta_item = to_t(sample_beta_vec(b, alpha, rng));

        let sample_dir_block = |rng: &mut R| -> Result<Mat<T>> {
            let rows = if params.cm_per_anchor { b } else { 1 };
            let mut data = Vec::with_capacity(rows * b);
            for _ in 0..rows {
                data.extend(to_t(sample_dirichlet(b, alpha, rng)?));
            }
            Ok(Mat::from_vec(rows, b, data))
        };
        let dirichlet_user = sample_dir_block(rng)?;
        let dirichlet_item = sample_dir_block(rng)?;

        let mut extra_negs = Vec::with_capacity(params.mix_neg_count - 1);
        for _ in 1..params.mix_neg_count {
            let perm = sample_perm(b, rng);
            let beta = to_t(sample_beta_vec(b, alpha, rng));
            extra_negs.push(NegDraw { perm, beta });
        }

        let main_beta = params
            .main_beta_scalar
            .then(|| T::from_f64(sample_beta(alpha, rng)));

        Ok(Self {
            perm_user,
            perm_item,
            perm_neg,
            beta_user,
            beta_item,
            dirichlet_user,
            dirichlet_item,
            extra_negs,
            main_beta,
            degenerate: b == 1,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.perm_user.len()
    }
}

/// Per-anchor interpolation: `out[k] = beta[k] * e[k] + (1 - beta[k]) * e_dis[k]`.
pub fn individual_mix<T: Real>(e: &Mat<T>, e_dis: &Mat<T>, beta: &[T]) -> Result<Mat<T>> {
    if e.rows() != e_dis.rows() || e.cols() != e_dis.cols() || beta.len() != e.rows() {
        return Err(MixRecError::Config(format!(
            "individual_mix shape mismatch: e {}x{}, e_dis {}x{}, beta {}",
            e.rows(),
            e.cols(),
            e_dis.rows(),
            e_dis.cols(),
            beta.len()
        )));
    }
    let mut out = Mat::zeros(e.rows(), e.cols());
    for k in 0..e.rows() {
        let b = beta[k];
        let one_m_b = T::one() - b;
        let (src, dis, dst) = (e.row(k), e_dis.row(k), out.row_mut(k));
        for ((d, &s), &x) in dst.iter_mut().zip(src).zip(dis) {
            *d = b * s + one_m_b * x;
        }
    }
    Ok(out)
}

/// Convex combination of the batch: `sum_o theta[o] * batch[o]`, a point
/// inside the convex hull of the batch rows.
pub fn collective_mix<T: Real>(batch: &Mat<T>, theta: &[T]) -> Vec<T> {
    assert_eq!(theta.len(), batch.rows(), "theta length mismatch");
    let mut out = vec![T::zero(); batch.cols()];
    for (o, &w) in theta.iter().enumerate() {
        axpy(w, batch.row(o), &mut out);
    }
    out
}

/// One sampled mini-batch with every constructed view, each |B| x d.
#[derive(Debug, Clone)]
pub struct MixBatch<T> {
    pub triplets: Vec<Triplet>,
    pub num_users: usize,
    pub plan: MixPlan<T>,
    pub e_user: Mat<T>,
    pub e_item: Mat<T>,
    pub e_neg: Mat<T>,
    pub e_user_dis: Mat<T>,
    pub e_item_dis: Mat<T>,
    pub e_neg_dis: Mat<T>,
    pub e_user_im: Mat<T>,
    pub e_item_im: Mat<T>,
    /// Mixed-negative views, one matrix per draw; draw 0 is built from
    /// `perm_neg` and `beta_item`, the rest from `plan.extra_negs`.
    pub e_neg_im: Vec<Mat<T>>,
    pub e_user_cm: Mat<T>,
    pub e_item_cm: Mat<T>,
    /// Scalar multiply/add/copy count of the view construction.
    pub element_ops: u64,
}

impl<T: Real> MixBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.triplets.len()
    }

    pub fn dim(&self) -> usize {
        self.e_user.cols()
    }

    pub fn is_degenerate(&self) -> bool {
        self.plan.degenerate
    }

    /// Builds all views from a frozen plan and the readout embeddings.
    pub fn from_plan(
        triplets: Vec<Triplet>,
        plan: MixPlan<T>,
        final_emb: &Mat<T>,
        num_users: usize,
    ) -> Result<Self> {
        let b = triplets.len();
        if b == 0 {
            return Err(MixRecError::Config("batch must be nonempty".into()));
        }
        if plan.batch_size() != b {
            return Err(MixRecError::Config(format!(
                "plan is for batch size {} but {} triplets were given",
                plan.batch_size(),
                b
            )));
        }
        let d = final_emb.cols();
        let mut ops: u64 = 0;

        let mut user_rows = Vec::with_capacity(b);
        let mut item_rows = Vec::with_capacity(b);
        let mut neg_rows = Vec::with_capacity(b);
        for t in &triplets {
            let (u, i, j) = (
                t.user as usize,
                num_users + t.pos as usize,
                num_users + t.neg as usize,
            );
            if u >= num_users || i >= final_emb.rows() || j >= final_emb.rows() {
                return Err(MixRecError::Config(format!(
                    "triplet ({}, {}, {}) out of range for the embedding table",
                    t.user, t.pos, t.neg
                )));
            }
            user_rows.push(u as u32);
            item_rows.push(i as u32);
            neg_rows.push(j as u32);
        }

        let e_user = final_emb.gather(&user_rows);
        let e_item = final_emb.gather(&item_rows);
        let e_neg = final_emb.gather(&neg_rows);
        ops += 3 * (b * d) as u64;

        let e_user_dis = e_user.gather(&plan.perm_user);
        let e_item_dis = e_item.gather(&plan.perm_item);
        let e_neg_dis = e_neg.gather(&plan.perm_neg);
        ops += 3 * (b * d) as u64;

        let e_user_im = individual_mix(&e_user, &e_user_dis, &plan.beta_user)?;
        let e_item_im = individual_mix(&e_item, &e_item_dis, &plan.beta_item)?;
        ops += 2 * 3 * (b * d) as u64;

        let mut e_neg_im = Vec::with_capacity(1 + plan.extra_negs.len());
        e_neg_im.push(individual_mix(&e_neg, &e_neg_dis, &plan.beta_item)?);
        ops += 3 * (b * d) as u64;
        for draw in &plan.extra_negs {
            let dis = e_neg.gather(&draw.perm);
            e_neg_im.push(individual_mix(&e_neg, &dis, &draw.beta)?);
            ops += 4 * (b * d) as u64;
        }

        let build_cm = |batch: &Mat<T>, theta: &Mat<T>, ops: &mut u64| -> Mat<T> {
            let mut out = Mat::zeros(b, d);
            if theta.rows() == 1 {
                let row = collective_mix(batch, theta.row(0));
                *ops += (2 * b * d) as u64;
                for k in 0..b {
                    out.row_mut(k).copy_from_slice(&row);
                }
                *ops += (b * d) as u64;
            } else {
                for k in 0..b {
                    let row = collective_mix(batch, theta.row(k));
                    out.row_mut(k).copy_from_slice(&row);
                }
                *ops += (2 * b * b * d + b * d) as u64;
            }
            out
        };
        let e_user_cm = build_cm(&e_user, &plan.dirichlet_user, &mut ops);
        let e_item_cm = build_cm(&e_item, &plan.dirichlet_item, &mut ops);

        Ok(Self {
            triplets,
            num_users,
            plan,
            e_user,
            e_item,
            e_neg,
            e_user_dis,
            e_item_dis,
            e_neg_dis,
            e_user_im,
            e_item_im,
            e_neg_im,
            e_user_cm,
            e_item_cm,
            element_ops: ops,
        })
    }

    /// Folds gradients taken with respect to the view matrices back onto the
    /// gathered base matrices (`e_user`, `e_item`, `e_neg`), applying the
    /// adjoints of the permutation gathers, interpolations, and convex
    /// combinations.
    pub fn collapse_grads(&self, g: &ViewGrads<T>) -> (Mat<T>, Mat<T>, Mat<T>) {
        let b = self.batch_size();
        let mut g_user = g.e_user.clone();
        let mut g_item = g.e_item.clone();
        let mut g_neg = g.e_neg.clone();

        let fold_side = |out: &mut Mat<T>,
                         perm: &[u32],
                         beta: &[T],
                         g_dis: &Mat<T>,
                         g_im: &Mat<T>,
                         g_cm: &Mat<T>,
                         theta: &Mat<T>| {
            for k in 0..b {
                let p = perm[k] as usize;
                // dis view: out[perm[k]] += g_dis[k]
                axpy(T::one(), g_dis.row(k), out.row_mut(p));
                // im view: beta into the anchor, 1-beta through the permutation
                axpy(beta[k], g_im.row(k), out.row_mut(k));
                axpy(T::one() - beta[k], g_im.row(k), out.row_mut(p));
            }
            // cm view: out[o] += sum_k theta[row(k)][o] * g_cm[k]
            for k in 0..b {
                let trow = theta.row(if theta.rows() == 1 { 0 } else { k });
                for o in 0..b {
                    axpy(trow[o], g_cm.row(k), out.row_mut(o));
                }
            }
        };

        fold_side(
            &mut g_user,
            &self.plan.perm_user,
            &self.plan.beta_user,
            &g.e_user_dis,
            &g.e_user_im,
            &g.e_user_cm,
            &self.plan.dirichlet_user,
        );
        fold_side(
            &mut g_item,
            &self.plan.perm_item,
            &self.plan.beta_item,
            &g.e_item_dis,
            &g.e_item_im,
            &g.e_item_cm,
            &self.plan.dirichlet_item,
        );

        for (m, g_im) in g.e_neg_im.iter().enumerate() {
            let (perm, beta) = if m == 0 {
                (&self.plan.perm_neg, &self.plan.beta_item)
            } else {
                let draw = &self.plan.extra_negs[m - 1];
                (&draw.perm, &draw.beta)
            };
            for k in 0..b {
                let p = perm[k] as usize;
                axpy(beta[k], g_im.row(k), g_neg.row_mut(k));
                axpy(T::one() - beta[k], g_im.row(k), g_neg.row_mut(p));
            }
        }

        (g_user, g_item, g_neg)
    }
}

/// Gradients of a loss with respect to each view matrix of a [`MixBatch`].
#[derive(Debug, Clone)]
pub struct ViewGrads<T> {
    pub e_user: Mat<T>,
    pub e_item: Mat<T>,
    pub e_neg: Mat<T>,
    pub e_user_dis: Mat<T>,
    pub e_item_dis: Mat<T>,
    pub e_user_im: Mat<T>,
    pub e_item_im: Mat<T>,
    pub e_neg_im: Vec<Mat<T>>,
    pub e_user_cm: Mat<T>,
    pub e_item_cm: Mat<T>,
}

impl<T: Real> ViewGrads<T> {
    pub fn zeros_like(mix: &MixBatch<T>) -> Self {
        let z = || Mat::zeros(mix.batch_size(), mix.dim());
        Self {
            e_user: z(),
            e_item: z(),
            e_neg: z(),
            e_user_dis: z(),
            e_item_dis: z(),
            e_user_im: z(),
            e_item_im: z(),
            e_neg_im: mix.e_neg_im.iter().map(|_| z()).collect(),
            e_user_cm: z(),
            e_item_cm: z(),
        }
    }
}

/// Samples a fresh plan and builds all views for one batch.
pub fn build_mix_batch<T: Real, R: Rng>(
    triplets: &[Triplet],
    final_emb: &Mat<T>,
    num_users: usize,
    params: &MixParams,
    rng: &mut R,
) -> Result<MixBatch<T>> {
    let plan = MixPlan::sample(triplets.len(), params, rng)?;
    MixBatch::from_plan(triplets.to_vec(), plan, final_emb, num_users)
}
