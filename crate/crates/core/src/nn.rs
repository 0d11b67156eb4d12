//! Network definitions: state-derivative network, output network, encoder,
//! and the auxiliary constraint network, all sharing one residual-MLP shape
//! (two hidden layers, leaky-ReLU activations, linear bypass).

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, TensorRef};
use crate::sdn::{NormFactor, TauKind};

/// Negative slope of the leaky-ReLU activation.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Half-width of the uniform weight initialization.
pub const INIT_RANGE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("lag window too short: need {need}, got {got}")]
    ShortWindow { need: usize, got: usize },
    #[error("vector has dimension {got}, expected {expect}")]
    DimMismatch { expect: usize, got: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Model dimensions. Defaults follow the benchmark configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub state_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Output lags consumed by the encoder (n_a).
    pub output_lags: usize,
    /// Input lags consumed by the encoder (n_b).
    pub input_lags: usize,
    pub hidden: usize,
}

impl ModelDims {
    /// Flattened encoder window length.
    pub fn window_len(&self) -> usize {
        self.input_lags * self.input_dim + self.output_lags * self.output_dim
    }

    /// Samples of history required before the first encodable index.
    pub fn skip(&self) -> usize {
        self.output_lags.max(self.input_lags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Tau,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed ordering of every trainable tensor in the model. The ordering
/// also defines the RNG stream consumed by initialization, so it must stay
/// stable for seeds to reproduce.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn build(dims: &ModelDims, tau_kind: TauKind, output_feedthrough: bool) -> Self {
        let n_x = dims.state_dim;
        let n_u = dims.input_dim;
        let n_y = dims.output_dim;
        let h = dims.hidden;
        let xu = n_x + n_u;
        let g_in = if output_feedthrough { xu } else { n_x };
        let win = dims.window_len();
        let tau_len = match tau_kind {
            TauKind::Scalar => 1,
            TauKind::PerState => n_x,
        };

        use ParamKind::*;
        let mut specs = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: &'static str, rows: usize, cols: usize, kind: ParamKind| {
            specs.push(ParamSpec {
                name,
                rows,
                cols,
                offset,
                kind,
            });
            offset += rows * cols;
        };

        push("dyn.a", n_x, n_x, Weight);
        push("dyn.b", n_x, n_u, Weight);
        push("dyn.w1", n_x, h, Weight);
        push("dyn.w2", h, h, Weight);
        push("dyn.w3", h, xu, Weight);
        push("dyn.b3", h, 1, Bias);
        push("dyn.b2", h, 1, Bias);

        push("out.c", n_y, n_x, Weight);
        if output_feedthrough {
            push("out.d", n_y, n_u, Weight);
        }
        push("out.w1", n_y, h, Weight);
        push("out.w2", h, h, Weight);
        push("out.w3", h, g_in, Weight);
        push("out.b3", h, 1, Bias);
        push("out.b2", h, 1, Bias);

        push("aux.w1", 1, h, Weight);
        push("aux.w2", h, h, Weight);
        push("aux.w3", h, xu, Weight);
        push("aux.b3", h, 1, Bias);
        push("aux.b2", h, 1, Bias);
        push("aux.b1", 1, 1, Bias);

        push("enc.lin", n_x, win, Weight);
        push("enc.w1", n_x, h, Weight);
        push("enc.w2", h, h, Weight);
        push("enc.w3", h, win, Weight);
        push("enc.b3", h, 1, Bias);
        push("enc.b2", h, 1, Bias);

        push("tau.raw", tau_len, 1, Tau);

        ParamLayout { specs, total: offset }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Offset table indexed by spec position (the tape `ParamId`).
    pub fn offsets(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.offset).collect()
    }
}

/// Metadata for the normalization factor held inside [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauMeta {
    pub kind: TauKind,
    pub epsilon: f64,
    pub trainable: bool,
}

/// Rollout semantics baked into a trained model: RK4 substeps per sampling
/// interval and the divergence guard on state magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutSettings {
    pub substeps: usize,
    pub guard: f64,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        RolloutSettings {
            substeps: 1,
            guard: 1e9,
        }
    }
}

/// All trainable values of the model in one flat buffer, plus the metadata
/// needed to interpret them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub tau: TauMeta,
    pub output_feedthrough: bool,
    pub rollout: RolloutSettings,
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ModelParams {
    /// Initialize with weights drawn i.i.d. from U[-INIT_RANGE, INIT_RANGE],
    /// biases at exactly zero, and the normalization factor at `tau_init`.
    pub fn init(
        dims: ModelDims,
        tau: TauMeta,
        output_feedthrough: bool,
        tau_init: f64,
        seed: u64,
    ) -> Self {
        let layout = Arc::new(ParamLayout::build(&dims, tau.kind, output_feedthrough));
        let mut values = vec![0.0; layout.total()];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for spec in layout.specs() {
            let block = &mut values[spec.offset..spec.offset + spec.len()];
            match spec.kind {
                ParamKind::Weight => {
                    for v in block {
                        *v = rng.random_range(-INIT_RANGE..=INIT_RANGE);
                    }
                }
                ParamKind::Bias => {}
                ParamKind::Tau => block.fill(tau_init),
            }
        }
        ModelParams {
            dims,
            tau,
            output_feedthrough,
            rollout: RolloutSettings::default(),
            layout,
            values,
        }
    }

    pub fn from_values(
        dims: ModelDims,
        tau: TauMeta,
        output_feedthrough: bool,
        values: Vec<f64>,
    ) -> Result<Self, NnError> {
        let layout = Arc::new(ParamLayout::build(&dims, tau.kind, output_feedthrough));
        if values.len() != layout.total() {
            return Err(NnError::DimMismatch {
                expect: layout.total(),
                got: values.len(),
            });
        }
        Ok(ModelParams {
            dims,
            tau,
            output_feedthrough,
            rollout: RolloutSettings::default(),
            layout,
            values,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slice(&self, name: &str) -> Result<&[f64], NnError> {
        let spec = self
            .layout
            .spec(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        Ok(&self.values[spec.offset..spec.offset + spec.len()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64], NnError> {
        let spec = self
            .layout
            .spec(name)
            .cloned()
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        Ok(&mut self.values[spec.offset..spec.offset + spec.len()])
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor, NnError> {
        let spec = self
            .layout
            .spec(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        Ok(Tensor::new(
            spec.rows,
            spec.cols,
            self.values[spec.offset..spec.offset + spec.len()].to_vec(),
        )?)
    }

    /// Normalization factor view over the flat values.
    pub fn norm_factor(&self) -> NormFactor {
        NormFactor {
            kind: self.tau.kind,
            raw: self.slice("tau.raw").expect("tau slot").to_vec(),
            epsilon: self.tau.epsilon,
            trainable: self.tau.trainable,
        }
    }

    pub fn set_tau(&mut self, raw: &[f64]) -> Result<(), NnError> {
        let slot = self.slice_mut("tau.raw")?;
        if slot.len() != raw.len() {
            return Err(NnError::DimMismatch {
                expect: slot.len(),
                got: raw.len(),
            });
        }
        slot.copy_from_slice(raw);
        Ok(())
    }

    /// Per-value mask of entries the optimizer may update.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.values.len()];
        if !self.tau.trainable {
            if let Some(spec) = self.layout.spec("tau.raw") {
                mask[spec.offset..spec.offset + spec.len()].fill(false);
            }
        }
        mask
    }

    /// Per-value mask of entries subject to the weight-decay term. The
    /// normalization factor is excluded: decay on it would bias the
    /// estimate toward faster dynamics.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.values.len()];
        if let Some(spec) = self.layout.spec("tau.raw") {
            mask[spec.offset..spec.offset + spec.len()].fill(false);
        }
        mask
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Model parameters registered on a tape, ready for forward passes.
/// Trainable tensors become parameter leaves; with a non-trainable
/// normalization factor, the tau slot is registered as a constant.
pub struct TapedModel {
    pub dims: ModelDims,
    feedthrough: bool,
    tau_eps: f64,
    dyn_a: TensorRef,
    dyn_b: TensorRef,
    dyn_w1: TensorRef,
    dyn_w2: TensorRef,
    dyn_w3: TensorRef,
    dyn_b3: TensorRef,
    dyn_b2: TensorRef,
    out_c: TensorRef,
    out_d: Option<TensorRef>,
    out_w1: TensorRef,
    out_w2: TensorRef,
    out_w3: TensorRef,
    out_b3: TensorRef,
    out_b2: TensorRef,
    aux_w1: TensorRef,
    aux_w2: TensorRef,
    aux_w3: TensorRef,
    aux_b3: TensorRef,
    aux_b2: TensorRef,
    aux_b1: TensorRef,
    enc_lin: TensorRef,
    enc_w1: TensorRef,
    enc_w2: TensorRef,
    enc_w3: TensorRef,
    enc_b3: TensorRef,
    enc_b2: TensorRef,
    tau_raw: TensorRef,
}

impl TapedModel {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let layout = params.layout();
        let mut refs = Vec::with_capacity(layout.specs().len());
        for (id, spec) in layout.specs().iter().enumerate() {
            let tensor = Tensor::new(
                spec.rows,
                spec.cols,
                params.values()[spec.offset..spec.offset + spec.len()].to_vec(),
            )
            .expect("layout shape");
            let leaf = if spec.kind == ParamKind::Tau && !params.tau.trainable {
                tape.leaf(tensor)
            } else {
                tape.param_leaf(tensor, id)
            };
            refs.push(leaf);
        }
        let get = |name: &str| refs[layout.index_of(name).expect("layout name")];
        TapedModel {
            dims: params.dims,
            feedthrough: params.output_feedthrough,
            tau_eps: params.tau.epsilon,
            dyn_a: get("dyn.a"),
            dyn_b: get("dyn.b"),
            dyn_w1: get("dyn.w1"),
            dyn_w2: get("dyn.w2"),
            dyn_w3: get("dyn.w3"),
            dyn_b3: get("dyn.b3"),
            dyn_b2: get("dyn.b2"),
            out_c: get("out.c"),
            out_d: layout.index_of("out.d").map(|i| refs[i]),
            out_w1: get("out.w1"),
            out_w2: get("out.w2"),
            out_w3: get("out.w3"),
            out_b3: get("out.b3"),
            out_b2: get("out.b2"),
            aux_w1: get("aux.w1"),
            aux_w2: get("aux.w2"),
            aux_w3: get("aux.w3"),
            aux_b3: get("aux.b3"),
            aux_b2: get("aux.b2"),
            aux_b1: get("aux.b1"),
            enc_lin: get("enc.lin"),
            enc_w1: get("enc.w1"),
            enc_w2: get("enc.w2"),
            enc_w3: get("enc.w3"),
            enc_b3: get("enc.b3"),
            enc_b2: get("enc.b2"),
            tau_raw: get("tau.raw"),
        }
    }

    pub fn a_matrix(&self) -> TensorRef {
        self.dyn_a
    }

    pub fn tau_raw(&self) -> TensorRef {
        self.tau_raw
    }

    fn check_dim(&self, tape: &Tape, v: TensorRef, expect: usize) -> Result<(), NnError> {
        let t = tape.value(v);
        if t.rows() != expect || t.cols() != 1 {
            return Err(NnError::DimMismatch {
                expect,
                got: t.rows() * t.cols(),
            });
        }
        Ok(())
    }

    fn mlp(
        &self,
        tape: &mut Tape,
        z: TensorRef,
        w3: TensorRef,
        b3: TensorRef,
        w2: TensorRef,
        b2: TensorRef,
        w1: TensorRef,
        outer_bias: Option<TensorRef>,
    ) -> Result<TensorRef, NnError> {
        let a3 = tape.matmul(w3, z)?;
        let a3 = tape.add(a3, b3)?;
        let h3 = tape.leaky_relu(a3, LEAKY_SLOPE);
        let a2 = tape.matmul(w2, h3)?;
        let a2 = tape.add(a2, b2)?;
        let h2 = tape.leaky_relu(a2, LEAKY_SLOPE);
        let out = tape.matmul(w1, h2)?;
        Ok(match outer_bias {
            Some(b) => tape.add(out, b)?,
            None => out,
        })
    }

    /// State-derivative network: `A x + B u` plus the residual MLP on [x; u].
    pub fn deriv(&self, tape: &mut Tape, x: TensorRef, u: TensorRef) -> Result<TensorRef, NnError> {
        self.check_dim(tape, x, self.dims.state_dim)?;
        self.check_dim(tape, u, self.dims.input_dim)?;
        let ax = tape.matmul(self.dyn_a, x)?;
        let bu = tape.matmul(self.dyn_b, u)?;
        let lin = tape.add(ax, bu)?;
        let z = tape.concat_rows(x, u)?;
        let nl = self.mlp(
            tape, z, self.dyn_w3, self.dyn_b3, self.dyn_w2, self.dyn_b2, self.dyn_w1, None,
        )?;
        Ok(tape.add(lin, nl)?)
    }

    /// Output network: `C x (+ D u)` plus the residual MLP.
    pub fn output(&self, tape: &mut Tape, x: TensorRef, u: TensorRef) -> Result<TensorRef, NnError> {
        self.check_dim(tape, x, self.dims.state_dim)?;
        self.check_dim(tape, u, self.dims.input_dim)?;
        let cx = tape.matmul(self.out_c, x)?;
        let (lin, z) = if let Some(d) = self.out_d {
            let du = tape.matmul(d, u)?;
            (tape.add(cx, du)?, tape.concat_rows(x, u)?)
        } else {
            (cx, x)
        };
        let nl = self.mlp(
            tape, z, self.out_w3, self.out_b3, self.out_w2, self.out_b2, self.out_w1, None,
        )?;
        Ok(tape.add(lin, nl)?)
    }

    /// Auxiliary constraint network (scalar output, outer bias, no linear
    /// bypass). Never called inside the simulation rollout.
    pub fn aux(&self, tape: &mut Tape, x: TensorRef, u: TensorRef) -> Result<TensorRef, NnError> {
        self.check_dim(tape, x, self.dims.state_dim)?;
        self.check_dim(tape, u, self.dims.input_dim)?;
        let z = tape.concat_rows(x, u)?;
        self.mlp(
            tape,
            z,
            self.aux_w3,
            self.aux_b3,
            self.aux_w2,
            self.aux_b2,
            self.aux_w1,
            Some(self.aux_b1),
        )
    }

    /// Initial-state encoder over lag windows ordered newest-first
    /// (`u_lags[0]` is u_{k-1}). Extra history beyond the configured lag
    /// orders is ignored.
    pub fn encode(
        &self,
        tape: &mut Tape,
        u_lags: &[&[f64]],
        y_lags: &[&[f64]],
    ) -> Result<TensorRef, NnError> {
        let n_b = self.dims.input_lags;
        let n_a = self.dims.output_lags;
        if u_lags.len() < n_b {
            return Err(NnError::ShortWindow {
                need: n_b,
                got: u_lags.len(),
            });
        }
        if y_lags.len() < n_a {
            return Err(NnError::ShortWindow {
                need: n_a,
                got: y_lags.len(),
            });
        }
        let mut window = Vec::with_capacity(self.dims.window_len());
        for lag in u_lags.iter().take(n_b) {
            if lag.len() != self.dims.input_dim {
                return Err(NnError::DimMismatch {
                    expect: self.dims.input_dim,
                    got: lag.len(),
                });
            }
            window.extend_from_slice(lag);
        }
        for lag in y_lags.iter().take(n_a) {
            if lag.len() != self.dims.output_dim {
                return Err(NnError::DimMismatch {
                    expect: self.dims.output_dim,
                    got: lag.len(),
                });
            }
            window.extend_from_slice(lag);
        }
        let z = tape.leaf(Tensor::col(&window));
        let lin = tape.matmul(self.enc_lin, z)?;
        let nl = self.mlp(
            tape, z, self.enc_w3, self.enc_b3, self.enc_w2, self.enc_b2, self.enc_w1, None,
        )?;
        Ok(tape.add(lin, nl)?)
    }

    /// Effective integration step `w = h / max(eps, tau)`, elementwise on
    /// the normalization factor. Differentiable in tau when trainable.
    pub fn effective_step(&self, tape: &mut Tape, h: f64) -> TensorRef {
        let clamped = tape.max_scalar(self.tau_raw, self.tau_eps);
        let inv = tape.recip(clamped);
        tape.scale(inv, h)
    }

    /// Whether the output network consumes the current input sample.
    pub fn output_feedthrough(&self) -> bool {
        self.feedthrough
    }
}
