//! Parameter initialization, exact gradients of the total objective with
//! respect to the embedding table, Adam updates, and the epoch loop with
//! early stopping on Recall@20.
//!
//! Backpropagation through the encoder uses the symmetry of the normalized
//! adjacency: the gradient of a layer-sum readout with respect to layer 0 is
//! the same layer-sum readout applied to the upstream gradient.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_graph, sample_batch, InteractionDataset, NormalizedGraph};
use crate::encoder::{propagate, propagate_mat, readout, EmbeddingTable};
use crate::error::{MixRecError, Result};
use crate::mat::{axpy, Mat};
use crate::mixing::{build_mix_batch, MixBatch, MixParams, ViewGrads};
use crate::objective::{total_loss_backward, touched_rows, LossConfig, StepLossRecord};
use crate::real::{Precision, Real};

/// Sampler stream salt: decorrelates the batch-sampling generator from the
/// initializer, which consumes `seed` directly.
const SAMPLER_STREAM: u64 = 0x9e3779b97f4a7c15;

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub embed_dim: usize,
    /// Propagation layers L; 0 trains plain matrix factorization.
    pub layers: usize,
    pub tau: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Evaluations without Recall@20 improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub mix_neg_count: usize,
    pub precision: Precision,
    pub include_layer0: bool,
    pub cm_per_anchor: bool,
    pub main_beta_scalar: bool,
    pub reg_full_table: bool,
    pub no_dmcl_user: bool,
    pub no_dmcl_item: bool,
    pub no_im: bool,
    pub no_cm: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Collect a per-step loss breakdown.
    pub log_losses: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            embed_dim: 64,
            layers: 3,
            tau: 0.2,
            alpha: 0.1,
            lambda1: 0.3,
            lambda2: 1e-4,
            learning_rate: 0.001,
            max_epochs: 500,
            patience: 10,
            eval_every: 1,
            seed: 42,
            mix_neg_count: 1,
            precision: Precision::F64,
            include_layer0: false,
            cm_per_anchor: false,
            main_beta_scalar: false,
            reg_full_table: false,
            no_dmcl_user: false,
            no_dmcl_item: false,
            no_im: false,
            no_cm: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            log_losses: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("embed_dim", self.embed_dim as f64),
            ("tau", self.tau),
            ("alpha", self.alpha),
            ("learning_rate", self.learning_rate),
            ("patience", self.patience as f64),
            ("eval_every", self.eval_every as f64),
            ("mix_neg_count", self.mix_neg_count as f64),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(MixRecError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if v < 0.0 {
                return Err(MixRecError::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(MixRecError::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            no_dmcl_user: self.no_dmcl_user,
            no_dmcl_item: self.no_dmcl_item,
            no_im: self.no_im,
            no_cm: self.no_cm,
            reg_full_table: self.reg_full_table,
        }
    }

    pub fn mix_params(&self) -> MixParams {
        MixParams {
            alpha: self.alpha,
            mix_neg_count: self.mix_neg_count,
            cm_per_anchor: self.cm_per_anchor,
            main_beta_scalar: self.main_beta_scalar,
        }
    }
}

/// Bias-corrected Adam accumulators, shaped like the embedding table.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    m: Mat<T>,
    v: Mat<T>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(rows: usize, cols: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: Mat::zeros(rows, cols),
            v: Mat::zeros(rows, cols),
            step: 0,
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// Xavier-uniform initialization: i.i.d. on
/// `[-sqrt(6 / (rows + cols)), +sqrt(6 / (rows + cols))]`.
pub fn xavier_init<T: Real>(rows: usize, cols: usize, seed: u64) -> EmbeddingTable<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = crate::seeded_rng(seed);
    EmbeddingTable::new(Mat::from_fn(rows, cols, |_, _| {
        T::from_f64(rng.random_range(-bound..bound))
    }))
}

/// One bias-corrected Adam update over the whole table.
pub fn adam_step<T: Real>(state: &mut OptimizerState<T>, table: &mut EmbeddingTable<T>, grad: &Mat<T>) {
    assert_eq!(table.rows(), grad.rows());
    assert_eq!(table.dim(), grad.cols());
    state.step += 1;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let bc1 = one - T::from_f64(state.beta1.powi(state.step as i32));
    let bc2 = one - T::from_f64(state.beta2.powi(state.step as i32));
    let lr = T::from_f64(state.learning_rate);
    let eps = T::from_f64(state.eps);

    let params = table.mat_mut().data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    let g = grad.data();
    for (((p, m), v), &g) in params.iter_mut().zip(m).zip(v).zip(g) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Folds per-view gradients back to the embedding table: mixing adjoint,
/// scatter onto touched node rows, encoder transpose (the propagation
/// itself, by symmetry), and the L2 term.
fn backward_from_views<T: Real>(
    mix: &MixBatch<T>,
    view_grads: &ViewGrads<T>,
    graph: &NormalizedGraph,
    table: &EmbeddingTable<T>,
    cfg: &TrainConfig,
) -> Result<Mat<T>> {
    let (g_user, g_item, g_neg) = mix.collapse_grads(view_grads);
    let m = mix.num_users;
    let mut d_final = Mat::zeros(table.rows(), table.dim());
    for (k, t) in mix.triplets.iter().enumerate() {
        axpy(T::one(), g_user.row(k), d_final.row_mut(t.user as usize));
        axpy(T::one(), g_item.row(k), d_final.row_mut(m + t.pos as usize));
        axpy(T::one(), g_neg.row(k), d_final.row_mut(m + t.neg as usize));
    }

    let stack = propagate_mat(graph, &d_final, cfg.layers)?;
    let mut grad = readout(&stack, cfg.include_layer0);

    if cfg.lambda2 > 0.0 {
        if cfg.reg_full_table {
            let scale = T::from_f64(2.0 * cfg.lambda2);
            for r in 0..table.rows() {
                axpy(scale, table.mat().row(r), grad.row_mut(r));
            }
        } else {
            let scale = T::from_f64(2.0 * cfg.lambda2 / mix.batch_size() as f64);
            for &r in &touched_rows(mix) {
                axpy(scale, table.mat().row(r as usize), grad.row_mut(r as usize));
            }
        }
    }

    if !grad.is_finite() {
        return Err(MixRecError::NonFinite { term: "gradient" });
    }
    Ok(grad)
}

/// Exact gradient of the total objective with respect to every entry of the
/// embedding table, with the batch's sampled coefficients held constant.
pub fn compute_gradients<T: Real>(
    mix: &MixBatch<T>,
    graph: &NormalizedGraph,
    table: &EmbeddingTable<T>,
    cfg: &TrainConfig,
) -> Result<Mat<T>> {
    let (_report, view_grads) = total_loss_backward(mix, table, &cfg.loss_config())?;
    backward_from_views(mix, &view_grads, graph, table, cfg)
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of per-step totals across the epoch.
    pub total_loss: f64,
    pub recall20: Option<f64>,
    pub ndcg20: Option<f64>,
    pub elapsed_s: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-by-validation embedding table (the initial table when training
    /// never evaluated).
    pub table: EmbeddingTable<f64>,
    pub log: Vec<EpochRecord>,
    /// Per-step loss breakdown, populated when `log_losses` is set.
    pub loss_steps: Vec<StepLossRecord>,
    pub steps: u64,
    /// CSR entries visited by training propagation (2|E| per layer per step).
    pub train_edge_visits: u64,
    /// Total seconds spent inside `build_mix_batch`, for cost profiling.
    pub mixing_elapsed_s: f64,
}

/// Runs the full training loop at the configured precision.
pub fn train(ds: &InteractionDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(ds, cfg),
        Precision::F64 => train_typed::<f64>(ds, cfg),
    }
}

fn train_typed<T: Real>(ds: &InteractionDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let graph = build_graph(ds);
    let rows = ds.num_users + ds.num_items;
    let mut table = xavier_init::<T>(rows, cfg.embed_dim, cfg.seed);
    let mut opt = OptimizerState::new(rows, cfg.embed_dim, cfg);
    let mut rng = crate::seeded_rng(cfg.seed ^ SAMPLER_STREAM);
    let loss_cfg = cfg.loss_config();
    let params = cfg.mix_params();

    let num_train = ds.train.len();
    let steps_per_epoch = num_train.div_ceil(cfg.batch_size);
    let remainder = num_train - cfg.batch_size * (steps_per_epoch.saturating_sub(1));

    let mut outcome = TrainOutcome {
        table: table.to_f64(),
        log: Vec::new(),
        loss_steps: Vec::new(),
        steps: 0,
        train_edge_visits: 0,
        mixing_elapsed_s: 0.0,
    };
    let mut best_recall = f64::NEG_INFINITY;
    let mut strikes = 0usize;
    let mut evaluated = false;

    for epoch in 1..=cfg.max_epochs {
        let epoch_start = Instant::now();
        let mut loss_sum = 0.0f64;
        for step in 0..steps_per_epoch {
            let bsize = if step + 1 == steps_per_epoch { remainder } else { cfg.batch_size };
            let triplets = sample_batch(ds, bsize, &mut rng)?;

            let stack = propagate(&graph, &table, cfg.layers)?;
            outcome.train_edge_visits += stack.edge_visits();
            let final_emb = readout(&stack, cfg.include_layer0);

            let mix_start = Instant::now();
            let mix = build_mix_batch(&triplets, &final_emb, ds.num_users, &params, &mut rng)?;
            outcome.mixing_elapsed_s += mix_start.elapsed().as_secs_f64();

            let (report, view_grads) = total_loss_backward(&mix, &table, &loss_cfg)?;
            let grad = backward_from_views(&mix, &view_grads, &graph, &table, cfg)?;
            adam_step(&mut opt, &mut table, &grad);

            outcome.steps += 1;
            loss_sum += report.total;
            if cfg.log_losses {
                outcome.loss_steps.push(StepLossRecord {
                    step: outcome.steps,
                    losses: report,
                });
            }
        }

        let (recall, ndcg) = if epoch % cfg.eval_every == 0 {
            let res = crate::eval::evaluate(&table, &graph, ds, cfg.layers, cfg.include_layer0, 20)?;
            (Some(res.mean_recall), Some(res.mean_ndcg))
        } else {
            (None, None)
        };
        if let Some(r) = recall {
            evaluated = true;
            if r > best_recall {
                best_recall = r;
                outcome.table = table.to_f64();
                strikes = 0;
            } else {
                strikes += 1;
            }
        }

        outcome.log.push(EpochRecord {
            epoch,
            total_loss: loss_sum / steps_per_epoch as f64,
            recall20: recall,
            ndcg20: ndcg,
            elapsed_s: epoch_start.elapsed().as_secs_f64(),
            best_so_far: if evaluated { best_recall } else { 0.0 },
        });

        if evaluated && strikes >= cfg.patience {
            break;
        }
    }

    if !evaluated {
        // no checkpointing ever happened; return the final parameters
        outcome.table = table.to_f64();
    }
    Ok(outcome)
}
