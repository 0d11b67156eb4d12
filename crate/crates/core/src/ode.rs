//! Fixed-step classical Runge-Kutta integration of the normalized vector
//! field, differentiable through the tape, plus the grid-rescaling view of
//! the same normalization.
//!
//! The per-state derivative scale `1/tau` is folded into an effective step
//! `w = h * (1/tau)` before any stage arithmetic. Stage updates only ever
//! multiply `w` by the stage derivatives and exact powers of two, so a
//! rollout with a scaled field at step `h` is bit-identical to a rollout
//! with the unscaled field at step `h/tau` whenever the two effective steps
//! agree bitwise.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, TensorRef};
use crate::data::{DataError, Signal};
use crate::nn::NnError;

/// Default rollout abort threshold on state magnitude.
pub const DIVERGENCE_GUARD: f64 = 1e9;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("integration diverged at step {step}, stage {stage}")]
    Diverged { step: usize, stage: usize },
    #[error("state magnitude exceeded guard at step {step}")]
    StateGuard { step: usize },
    #[error("time scale must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Step specification: step size, per-state derivative scale, substep count.
/// Input is held with zero-order hold across all stages.
#[derive(Debug, Clone)]
pub struct OdeStepSpec {
    pub h: f64,
    pub scale: Vec<f64>,
    pub substeps: usize,
    pub guard: f64,
}

impl OdeStepSpec {
    pub fn new(h: f64, scale: Vec<f64>) -> Result<Self, OdeError> {
        if !(h > 0.0) {
            return Err(OdeError::NonPositiveTau(h));
        }
        if scale.is_empty() || scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(OdeError::NonPositiveTau(
                scale.iter().copied().find(|s| !(*s > 0.0)).unwrap_or(0.0),
            ));
        }
        Ok(OdeStepSpec {
            h,
            scale,
            substeps: 1,
            guard: DIVERGENCE_GUARD,
        })
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps.max(1);
        self
    }

    pub fn with_guard(mut self, guard: f64) -> Self {
        self.guard = guard;
        self
    }

    /// Effective step `w = h * scale`, elementwise, as a tape constant.
    pub fn effective_step(&self, tape: &mut Tape) -> TensorRef {
        let scale = tape.leaf(crate::autodiff::Tensor::col(&self.scale));
        tape.scale(scale, self.h)
    }
}

/// Vector field evaluated on the tape: `(tape, x, u) -> dx`.
pub type Field<'a> = dyn FnMut(&mut Tape, TensorRef, TensorRef) -> Result<TensorRef, OdeError> + 'a;

fn check_stage(tape: &Tape, k: TensorRef, stage: usize) -> Result<(), OdeError> {
    if !tape.value(k).all_finite() {
        return Err(OdeError::Diverged { step: 0, stage });
    }
    Ok(())
}

/// Multiply the effective step into a stage derivative; broadcasts a 1x1
/// step over vector stages.
fn apply_step(tape: &mut Tape, w: TensorRef, k: TensorRef) -> Result<TensorRef, OdeError> {
    if tape.value(w).shape() == tape.value(k).shape() {
        Ok(tape.mul(w, k)?)
    } else if tape.value(w).is_scalar() {
        Ok(tape.scale_by(w, k)?)
    } else {
        Err(OdeError::Autodiff(AutodiffError::ShapeMismatch {
            op: "apply_step",
            lhs: tape.value(w).shape(),
            rhs: tape.value(k).shape(),
        }))
    }
}

/// One classical RK4 step of the scaled field with the input held constant
/// across all four stages. `w` is the effective step `h * (1/tau)`.
pub fn rk4_step(
    tape: &mut Tape,
    f: &mut Field<'_>,
    x: TensorRef,
    u: TensorRef,
    w: TensorRef,
    guard: f64,
) -> Result<TensorRef, OdeError> {
    let k1 = f(tape, x, u)?;
    check_stage(tape, k1, 1)?;
    let wk1 = apply_step(tape, w, k1)?;
    let half1 = tape.scale(wk1, 0.5);
    let xa = tape.add(x, half1)?;

    let k2 = f(tape, xa, u)?;
    check_stage(tape, k2, 2)?;
    let wk2 = apply_step(tape, w, k2)?;
    let half2 = tape.scale(wk2, 0.5);
    let xb = tape.add(x, half2)?;

    let k3 = f(tape, xb, u)?;
    check_stage(tape, k3, 3)?;
    let wk3 = apply_step(tape, w, k3)?;
    let xc = tape.add(x, wk3)?;

    let k4 = f(tape, xc, u)?;
    check_stage(tape, k4, 4)?;

    let k2x2 = tape.scale(k2, 2.0);
    let k3x2 = tape.scale(k3, 2.0);
    let s12 = tape.add(k1, k2x2)?;
    let s34 = tape.add(k3x2, k4)?;
    let s = tape.add(s12, s34)?;
    let ws = apply_step(tape, w, s)?;
    let inc = tape.scale(ws, 1.0 / 6.0);
    let next = tape.add(x, inc)?;

    if tape.value(next).iter().any(|v| !v.is_finite() || v.abs() > guard) {
        return Err(OdeError::StateGuard { step: 0 });
    }
    Ok(next)
}

/// Iterated RK4 over a held-input sequence. Returns the J+1 state refs
/// including the initial state. An empty input sequence yields `[x0]`.
pub fn simulate(
    tape: &mut Tape,
    f: &mut Field<'_>,
    x0: TensorRef,
    inputs: &[TensorRef],
    w: TensorRef,
    substeps: usize,
    guard: f64,
) -> Result<Vec<TensorRef>, OdeError> {
    let substeps = substeps.max(1);
    let w_sub = if substeps > 1 {
        tape.scale(w, 1.0 / substeps as f64)
    } else {
        w
    };
    let mut traj = Vec::with_capacity(inputs.len() + 1);
    traj.push(x0);
    let mut x = x0;
    for (step, &u) in inputs.iter().enumerate() {
        for _ in 0..substeps {
            x = rk4_step(tape, f, x, u, w_sub, guard).map_err(|e| match e {
                OdeError::Diverged { stage, .. } => OdeError::Diverged { step, stage },
                OdeError::StateGuard { .. } => OdeError::StateGuard { step },
                other => other,
            })?;
        }
        traj.push(x);
    }
    Ok(traj)
}

/// Rescale the sampling grid by the normalization factor: sample values are
/// untouched, the sampling interval becomes `T_s / tau`, and the number of
/// time steps stays the same.
pub fn rescale_grid(signal: &Signal, tau: f64) -> Result<Signal, OdeError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(OdeError::NonPositiveTau(tau));
    }
    Ok(signal.with_sample_time(signal.sample_time() / tau))
}
