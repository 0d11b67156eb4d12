//! Truncated simulation-error training: subsequence batching, loss assembly
//! with the stability barrier and weight decay, Adam with the piecewise
//! learning-rate schedule, early stopping, and divergence containment.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, TensorRef};
use crate::bla::BlaError;
use crate::config::{RunConfig, TauMode};
use crate::data::{DataError, EvalSplit, PreparedData, Scaler, Signal, SignalPair};
use crate::nn::{ModelDims, ModelParams, NnError, TapedModel, TauMeta};
use crate::ode::{self, OdeError};

pub use crate::config::LrStage;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training failed: all {steps} optimization steps diverged")]
    Failed { steps: usize },
    #[error("training data too short: need {need} samples, got {got}")]
    DataTooShort { need: usize, got: usize },
    #[error("empty evaluation range")]
    EmptyRange,
    #[error("signal lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("linear-approximation estimate failed: {0}")]
    Bla(#[from] BlaError),
}

/// Start indices of the subsequences in one optimization step. Every start
/// leaves room for the encoder window before it and a full rollout after.
#[derive(Debug, Clone)]
pub struct Batch {
    pub starts: Vec<usize>,
}

/// Sample `count` admissible start indices uniformly without replacement.
/// When fewer admissible starts exist than requested, all of them are used.
pub fn sample_batch(
    rng: &mut ChaCha12Rng,
    data_len: usize,
    dims: &ModelDims,
    subseq_len: usize,
    count: usize,
) -> Result<Batch, TrainError> {
    let skip = dims.skip();
    let need = skip + subseq_len;
    if data_len < need {
        return Err(TrainError::DataTooShort {
            need,
            got: data_len,
        });
    }
    let admissible = data_len - need + 1;
    let take = count.min(admissible);
    let picked = rand::seq::index::sample(rng, admissible, take);
    let starts = picked.into_iter().map(|i| i + skip).collect();
    Ok(Batch { starts })
}

/// Loss components of one optimization step (simulation and auxiliary terms
/// averaged over the batch).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub sim: f64,
    pub weight_penalty: f64,
    pub stability_penalty: f64,
    pub aux_penalty: f64,
}

#[derive(Debug)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grad: Vec<f64>,
}

/// A step either produces a loss with gradients or is marked diverged
/// (some rollout left the finite, guarded region); diverged steps are
/// skipped without touching the parameters.
#[derive(Debug)]
pub enum StepOutcome {
    Loss(LossOutput),
    Diverged,
}

fn is_divergence(err: &TrainError) -> bool {
    match err {
        TrainError::Ode(OdeError::Diverged { .. }) | TrainError::Ode(OdeError::StateGuard { .. }) => {
            true
        }
        TrainError::Ode(OdeError::Autodiff(AutodiffError::NonFiniteForward { .. })) => true,
        TrainError::Autodiff(AutodiffError::NonFiniteForward { .. }) => true,
        TrainError::Nn(NnError::Autodiff(AutodiffError::NonFiniteForward { .. })) => true,
        TrainError::Ode(OdeError::Model(NnError::Autodiff(
            AutodiffError::NonFiniteForward { .. },
        ))) => true,
        _ => false,
    }
}

struct SubseqOut {
    loss: f64,
    aux: f64,
    grad: Vec<f64>,
}

fn subsequence_terms(
    params: &ModelParams,
    data: &SignalPair,
    start: usize,
    cfg: &RunConfig,
) -> Result<SubseqOut, TrainError> {
    let dims = params.dims;
    let j_len = cfg.subseq_len;
    let mut tape = Tape::with_capacity(64 + j_len * 96);
    let model = TapedModel::register(&mut tape, params);
    let w_full = model.effective_step(&mut tape, cfg.sample_time);
    let w = if cfg.substeps > 1 {
        tape.scale(w_full, 1.0 / cfg.substeps as f64)
    } else {
        w_full
    };

    let u_lags: Vec<&[f64]> = (1..=dims.input_lags).map(|l| data.u.row(start - l)).collect();
    let y_lags: Vec<&[f64]> = (1..=dims.output_lags).map(|l| data.y.row(start - l)).collect();
    let mut x = model.encode(&mut tape, &u_lags, &y_lags)?;

    let mut deriv = |tape: &mut Tape, x: TensorRef, u: TensorRef| {
        model.deriv(tape, x, u).map_err(OdeError::from)
    };

    let mut sim_acc: Option<TensorRef> = None;
    let mut aux_acc: Option<TensorRef> = None;
    for j in 0..j_len {
        let k = start + j;
        let u_j = tape.leaf(Tensor::col(data.u.row(k)));
        let y_hat = model.output(&mut tape, x, u_j)?;
        let y_tgt = tape.leaf(Tensor::col(data.y.row(k)));
        let r = tape.sub(y_hat, y_tgt)?;
        let r2 = tape.square(r);
        let rs = tape.sum(r2);
        sim_acc = Some(match sim_acc {
            Some(acc) => tape.add(acc, rs)?,
            None => rs,
        });
        if cfg.aux_weight != 0.0 {
            let d = model.aux(&mut tape, x, u_j)?;
            let d2 = tape.square(d);
            aux_acc = Some(match aux_acc {
                Some(acc) => tape.add(acc, d2)?,
                None => d2,
            });
        }
        for _ in 0..cfg.substeps.max(1) {
            x = ode::rk4_step(&mut tape, &mut deriv, x, u_j, w, cfg.divergence_guard).map_err(
                |e| match e {
                    OdeError::Diverged { stage, .. } => OdeError::Diverged { step: j, stage },
                    OdeError::StateGuard { .. } => OdeError::StateGuard { step: j },
                    other => other,
                },
            )?;
        }
    }

    let sim = sim_acc.expect("subsequence length is positive");
    let total = match aux_acc {
        Some(aux) => {
            let aux_scaled = tape.scale(aux, cfg.aux_weight);
            tape.add(sim, aux_scaled)?
        }
        None => sim,
    };

    let grads = tape.backward(total)?;
    let mut flat = vec![0.0; params.layout().total()];
    grads.scatter(&params.layout().offsets(), &mut flat);

    let aux_value = aux_acc.map_or(0.0, |a| cfg.aux_weight * tape.value(a).item());
    Ok(SubseqOut {
        loss: tape.value(total).item(),
        aux: aux_value,
        grad: flat,
    })
}

/// Differentiable stability barrier on the symmetric part of the linear
/// state matrix. Leading principal minors with the wrong alternating sign
/// are hinged and squared, so the penalty is exactly zero on the feasible
/// set and smooth elsewhere.
fn barrier_taped(
    tape: &mut Tape,
    a: TensorRef,
    n: usize,
    weight: f64,
) -> Result<TensorRef, TrainError> {
    let at = tape.transpose(a);
    let sum = tape.add(a, at)?;
    let sym = tape.scale(sum, 0.5);
    let mut acc: Option<TensorRef> = None;
    for i in 1..=n {
        let minor = tape.top_left(sym, i)?;
        let det = tape.det(minor)?;
        // Negative definite requires (-1)^i det_i > 0; penalize the
        // violation relu((-1)^(i+1) det_i).
        let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
        let signed = tape.scale(det, sign);
        let hinge = tape.leaky_relu(signed, 0.0);
        let sq = tape.square(hinge);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, sq)?,
            None => sq,
        });
    }
    Ok(tape.scale(acc.expect("n >= 1"), weight))
}

/// Stability barrier value for a square matrix.
pub fn barrier_penalty(a: &Tensor, weight: f64) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let a_ref = tape.leaf(a.clone());
    let out = barrier_taped(&mut tape, a_ref, a.rows(), weight)?;
    Ok(tape.value(out).item())
}

/// Full training loss and gradient over one batch: stability barrier plus
/// weight decay plus the batch mean of the simulation and auxiliary terms.
/// Per-subsequence rollouts run in parallel; their gradients are reduced in
/// start-index order so the result is identical to a serial evaluation.
pub fn loss(
    params: &ModelParams,
    data: &SignalPair,
    batch: &Batch,
    cfg: &RunConfig,
) -> Result<StepOutcome, TrainError> {
    let n_param = params.layout().total();
    let mut grad = vec![0.0; n_param];
    let mut breakdown = LossBreakdown::default();

    // Weight decay: lambda_w * ||theta||^2 over the network parameters.
    let decay_mask = params.decay_mask();
    if cfg.weight_decay != 0.0 {
        let mut l_w = 0.0;
        for (i, v) in params.values().iter().enumerate() {
            if decay_mask[i] {
                l_w += v * v;
                grad[i] += 2.0 * cfg.weight_decay * v;
            }
        }
        breakdown.weight_penalty = cfg.weight_decay * l_w;
    }

    // Stability barrier on the linear state matrix.
    if cfg.stability_weight != 0.0 {
        let mut tape = Tape::new();
        let a_spec_id = params
            .layout()
            .index_of("dyn.a")
            .expect("layout has linear state matrix");
        let a_ref = tape.param_leaf(params.tensor("dyn.a")?, a_spec_id);
        let pen = barrier_taped(&mut tape, a_ref, params.dims.state_dim, cfg.stability_weight)?;
        breakdown.stability_penalty = tape.value(pen).item();
        let grads = tape.backward(pen)?;
        grads.scatter(&params.layout().offsets(), &mut grad);
    }

    let outcomes: Vec<Result<SubseqOut, TrainError>> = batch
        .starts
        .par_iter()
        .map(|&start| subsequence_terms(params, data, start, cfg))
        .collect();

    let scale = 1.0 / batch.starts.len() as f64;
    let mut sim_total = 0.0;
    let mut aux_total = 0.0;
    for outcome in outcomes {
        match outcome {
            Ok(sub) => {
                sim_total += sub.loss - sub.aux;
                aux_total += sub.aux;
                for (g, s) in grad.iter_mut().zip(sub.grad.iter()) {
                    *g += scale * s;
                }
            }
            Err(e) if is_divergence(&e) => return Ok(StepOutcome::Diverged),
            Err(e) => return Err(e),
        }
    }
    breakdown.sim = sim_total * scale;
    breakdown.aux_penalty = aux_total * scale;
    breakdown.total = breakdown.sim
        + breakdown.aux_penalty
        + breakdown.weight_penalty
        + breakdown.stability_penalty;

    if !breakdown.total.is_finite() {
        return Ok(StepOutcome::Diverged);
    }
    Ok(StepOutcome::Loss(LossOutput {
        breakdown,
        grad,
    }))
}

/// Adam optimizer state (first/second moments, update count).
/// Coefficients are the unmodified defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn apply(&mut self, values: &mut [f64], grad: &[f64], lr: f64, mask: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..values.len() {
            if !mask[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One optimizer step: applies the scheduled learning rate unless the
/// gradient contains non-finite entries, in which case the parameters are
/// left untouched and `false` is returned.
pub fn adam_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    grad: &[f64],
    step_index: usize,
    cfg: &RunConfig,
) -> bool {
    if grad.iter().any(|g| !g.is_finite()) {
        return false;
    }
    let lr = cfg.lr_at(step_index);
    let mask = params.trainable_mask();
    opt.apply(params.values_mut(), grad, lr, &mask);
    true
}

/// Free-run simulation error: sqrt of the mean squared output error over
/// samples `skip..K`. Both signals must have equal length.
pub fn rmse(y: &Signal, y_hat: &Signal, skip: usize) -> Result<f64, TrainError> {
    if y.len() != y_hat.len() {
        return Err(TrainError::LengthMismatch(y.len(), y_hat.len()));
    }
    if skip >= y.len() {
        return Err(TrainError::EmptyRange);
    }
    let mut acc = 0.0;
    for k in skip..y.len() {
        for (a, b) in y.row(k).iter().zip(y_hat.row(k)) {
            let d = a - b;
            acc += d * d;
        }
    }
    Ok((acc / (y.len() - skip) as f64).sqrt())
}

/// RMSE of a prediction tail (rows `skip..K` of `y` against the entire
/// `predictions` signal).
pub fn rmse_tail(y: &Signal, predictions: &Signal, skip: usize) -> Result<f64, TrainError> {
    if skip + predictions.len() != y.len() {
        return Err(TrainError::LengthMismatch(y.len(), skip + predictions.len()));
    }
    if predictions.is_empty() {
        return Err(TrainError::EmptyRange);
    }
    let mut acc = 0.0;
    for k in 0..predictions.len() {
        for (a, b) in y.row(skip + k).iter().zip(predictions.row(k)) {
            let d = a - b;
            acc += d * d;
        }
    }
    Ok((acc / predictions.len() as f64).sqrt())
}

/// Free-run simulation in model (scaled) units: the encoder runs exactly
/// once on the history before `skip`, then the model rolls forward on the
/// inputs alone. Output has `K - skip` rows aligned with sample `skip`.
pub fn free_run(params: &ModelParams, u: &Signal, y: &Signal) -> Result<Signal, TrainError> {
    let dims = params.dims;
    let skip = dims.skip();
    let k_total = u.len();
    if y.len() < skip {
        return Err(TrainError::DataTooShort {
            need: skip,
            got: y.len(),
        });
    }
    if k_total <= skip {
        return Err(TrainError::EmptyRange);
    }
    let mut tape = Tape::with_capacity(64 + (k_total - skip) * 96);
    let model = TapedModel::register(&mut tape, params);
    let w_full = model.effective_step(&mut tape, u.sample_time());
    let substeps = params.rollout.substeps.max(1);
    let w = if substeps > 1 {
        tape.scale(w_full, 1.0 / substeps as f64)
    } else {
        w_full
    };

    let u_lags: Vec<&[f64]> = (1..=dims.input_lags).map(|l| u.row(skip - l)).collect();
    let y_lags: Vec<&[f64]> = (1..=dims.output_lags).map(|l| y.row(skip - l)).collect();
    let mut x = model.encode(&mut tape, &u_lags, &y_lags)?;

    let mut deriv = |tape: &mut Tape, x: TensorRef, u: TensorRef| {
        model.deriv(tape, x, u).map_err(OdeError::from)
    };

    let mut out = Vec::with_capacity((k_total - skip) * dims.output_dim);
    for k in skip..k_total {
        let u_k = tape.leaf(Tensor::col(u.row(k)));
        let y_hat = model.output(&mut tape, x, u_k)?;
        out.extend_from_slice(tape.value(y_hat).data());
        if k + 1 < k_total {
            for _ in 0..substeps {
                x = ode::rk4_step(&mut tape, &mut deriv, x, u_k, w, params.rollout.guard)
                    .map_err(|e| match e {
                        OdeError::Diverged { stage, .. } => OdeError::Diverged { step: k, stage },
                        OdeError::StateGuard { .. } => OdeError::StateGuard { step: k },
                        other => other,
                    })?;
            }
        }
    }
    Ok(Signal::new(
        out,
        dims.output_dim,
        u.sample_time(),
        y.names().to_vec(),
    )?)
}

#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    pub rmse: f64,
}

/// Free-run RMSE of a split in original output units.
pub fn evaluate(
    params: &ModelParams,
    split: &EvalSplit,
    y_scaler: &Scaler,
) -> Result<EvalReport, TrainError> {
    let preds_scaled = free_run(params, &split.u, &split.y_scaled)?;
    let preds = crate::data::zscore_invert(y_scaler, &preds_scaled);
    let skip = params.dims.skip();
    Ok(EvalReport {
        rmse: rmse_tail(&split.y_raw, &preds, skip)?,
    })
}

/// Like [`evaluate`] but mapping rollout divergence to an infinite RMSE
/// instead of an error.
pub fn evaluate_or_inf(params: &ModelParams, split: &EvalSplit, y_scaler: &Scaler) -> f64 {
    match evaluate(params, split, y_scaler) {
        Ok(report) => report.rmse,
        Err(e) if is_divergence(&e) => f64::INFINITY,
        Err(_) => f64::INFINITY,
    }
}

/// One line of training history.
#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_rmse: Option<f64>,
    /// Effective normalized time T_s / tau per state.
    pub ts_over_tau: Vec<f64>,
    pub diverged: bool,
}

/// Training history as delimiter-separated text (same conventions as the
/// data CSV files; missing validation entries are written as NaN).
pub fn history_to_csv(history: &[HistoryRow], state_dim: usize) -> String {
    let mut header = String::from("step,lr,loss,sim,weight_penalty,stability_penalty,aux_penalty,val_rmse,diverged");
    for i in 0..state_dim {
        header.push_str(&format!(",ts_over_tau_{i}"));
    }
    header.push('\n');
    let mut out = header;
    for row in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}",
            row.step,
            row.lr,
            row.loss.total,
            row.loss.sim,
            row.loss.weight_penalty,
            row.loss.stability_penalty,
            row.loss.aux_penalty,
            row.val_rmse.unwrap_or(f64::NAN),
            if row.diverged { 1 } else { 0 },
        ));
        for v in &row.ts_over_tau {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug)]
pub struct FitResult {
    /// Best-validation checkpoint.
    pub params: ModelParams,
    /// Parameters at the final step, regardless of validation score.
    pub final_params: ModelParams,
    pub best_val_rmse: f64,
    pub best_step: Option<usize>,
    pub history: Vec<HistoryRow>,
    pub diverged_steps: usize,
    /// Normalized time T_s / tau resolved before training for the
    /// linear-approximation mode.
    pub resolved_ratio: Option<f64>,
}

fn ts_over_tau(params: &ModelParams, sample_time: f64) -> Vec<f64> {
    crate::sdn::effective_tau(&params.norm_factor(), params.dims.state_dim)
        .iter()
        .map(|tau| sample_time / tau)
        .collect()
}

/// Run the full optimization loop on prepared (z-scored) data: sample a
/// batch, assemble the loss, take an Adam step, track the best validation
/// checkpoint, and stop early when validation stalls.
pub fn fit(cfg: &RunConfig, data: &PreparedData) -> Result<FitResult, TrainError> {
    let input_dim = data.train.u.channels();
    let output_dim = data.train.y.channels();
    let dims = cfg.dims(input_dim, output_dim);
    let skip = dims.skip();
    let need = skip + cfg.subseq_len;
    if data.train.len() < need {
        return Err(TrainError::DataTooShort {
            need,
            got: data.train.len(),
        });
    }

    // Resolve the normalization factor.
    let (tau_init, trainable, resolved_ratio) = match cfg.tau_mode {
        TauMode::Fixed { ratio } => (cfg.sample_time / ratio, false, None),
        TauMode::Trainable => (cfg.sample_time / cfg.tau_init_ratio, true, None),
        TauMode::Bla => {
            let tau = crate::bla::tau_bla(&data.train, cfg.bla_order, cfg.bla_lag)?;
            (tau, false, Some(cfg.sample_time / tau))
        }
    };

    let tau_meta = TauMeta {
        kind: cfg.tau_kind,
        epsilon: cfg.tau_epsilon(),
        trainable,
    };
    let mut params = ModelParams::init(dims, tau_meta, cfg.output_feedthrough, tau_init, cfg.seed);
    params.rollout = crate::nn::RolloutSettings {
        substeps: cfg.substeps.max(1),
        guard: cfg.divergence_guard,
    };

    let mut opt = Adam::new(params.layout().total());
    // Separate stream from the weight-init RNG.
    let mut batch_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5dee_ce66_a743_11c5);

    let mut history = Vec::with_capacity(cfg.max_steps);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut last_improve = 0usize;
    let mut diverged_steps = 0usize;
    let mut applied_steps = 0usize;

    for step in 0..cfg.max_steps {
        let batch = sample_batch(&mut batch_rng, data.train.len(), &dims, cfg.subseq_len, cfg.batch_size)?;
        let outcome = loss(&params, &data.train, &batch, cfg)?;

        let mut row = HistoryRow {
            step,
            lr: cfg.lr_at(step),
            loss: LossBreakdown {
                total: f64::NAN,
                ..LossBreakdown::default()
            },
            val_rmse: None,
            ts_over_tau: ts_over_tau(&params, cfg.sample_time),
            diverged: false,
        };

        match outcome {
            StepOutcome::Loss(out) => {
                if adam_step(&mut params, &mut opt, &out.grad, step, cfg) {
                    applied_steps += 1;
                } else {
                    diverged_steps += 1;
                    row.diverged = true;
                }
                row.loss = out.breakdown;
            }
            StepOutcome::Diverged => {
                diverged_steps += 1;
                row.diverged = true;
            }
        }

        let evaluate_now = (step + 1) % cfg.val_interval == 0 || step + 1 == cfg.max_steps;
        if evaluate_now {
            let val = evaluate_or_inf(&params, &data.val, &data.scalers.y);
            row.val_rmse = Some(val);
            let improved = best.as_ref().map_or(val.is_finite(), |(b, _, _)| val < *b);
            if improved {
                best = Some((val, step, params.clone()));
                last_improve = step;
            }
        }
        history.push(row);

        if step.saturating_sub(last_improve) >= cfg.patience && best.is_some() {
            break;
        }
    }

    if cfg.max_steps > 0 && applied_steps == 0 {
        return Err(TrainError::Failed {
            steps: cfg.max_steps,
        });
    }

    let (best_val_rmse, best_step, best_params) = match best {
        Some((v, s, p)) => (v, Some(s), p),
        None => (
            evaluate_or_inf(&params, &data.val, &data.scalers.y),
            None,
            params.clone(),
        ),
    };

    Ok(FitResult {
        params: best_params,
        final_params: params,
        best_val_rmse,
        best_step,
        history,
        diverged_steps,
        resolved_ratio,
    })
}
