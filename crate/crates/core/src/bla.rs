//! Best linear approximation of the measured dynamics and the variance
//! heuristic for the normalization factor built on top of it.
//!
//! Pipeline: ARX regression by linear least squares, minimal state-space
//! realization of the impulse response (balanced truncation of the Hankel
//! matrix), inverse zero-order-hold conversion to continuous time by the
//! principal matrix logarithm, with a bilinear fallback when the logarithm
//! is undefined.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::data::{Signal, SignalPair};
use crate::sdn;

#[derive(Debug, Error)]
pub enum BlaError {
    #[error("model order must be at least 1")]
    BadOrder,
    #[error("data too short: need {need} samples for lag {lag}, got {got}")]
    TooShort { need: usize, got: usize, lag: usize },
    #[error("input signal carries no excitation")]
    NoExcitation,
    #[error("regression is rank deficient beyond recovery")]
    RankDeficient,
    #[error("matrix logarithm undefined and bilinear fallback impossible")]
    ConversionFailed,
    #[error("linear model simulation diverged at step {0}")]
    Unstable(usize),
    #[error("state trajectory is degenerate; time scale undefined")]
    DegenerateStates,
    #[error("dimension mismatch: {0}")]
    Dims(String),
}

/// Continuous-time linear state-space model.
#[derive(Debug, Clone)]
pub struct LinearSS {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Realized order (may be lower than requested on degenerate data).
    pub order: usize,
    /// Sampling interval of the fitting grid.
    pub sample_time: f64,
    /// All continuous-time eigenvalues strictly in the left half-plane.
    pub hurwitz: bool,
    /// True when the inverse-ZOH logarithm was undefined and the bilinear
    /// map was used instead.
    pub tustin_fallback: bool,
}

/// Intermediate discrete-time realization retained for consistency checks.
#[derive(Debug, Clone)]
pub struct DiscreteSS {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct BlaFit {
    pub model: LinearSS,
    pub discrete: DiscreteSS,
}

impl LinearSS {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Input-to-state frequency response `(jwI - A)^-1 B`.
    pub fn state_frf(&self, omega: f64) -> Result<DMatrix<Complex64>, BlaError> {
        let n = self.state_dim();
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                m[(r, c)] = Complex64::new(-self.a[(r, c)], 0.0);
            }
            m[(r, r)] += Complex64::new(0.0, omega);
        }
        let b = self.b.map(|v| Complex64::new(v, 0.0));
        m.lu()
            .solve(&b)
            .ok_or_else(|| BlaError::Dims("frequency response singular".into()))
    }

    /// Exact zero-order-hold discretization at interval `t_s`.
    pub fn discretize(&self, t_s: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a_d, m) = zoh_pair(&self.a, t_s);
        (a_d, &m * &self.b)
    }
}

/// `(exp(A t), int_0^t exp(A s) ds)` via one block matrix exponential.
fn zoh_pair(a: &DMatrix<f64>, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut block = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for r in 0..n {
        for c in 0..n {
            block[(r, c)] = a[(r, c)] * t;
        }
        block[(r, n + r)] = t;
    }
    let e = block.exp();
    let a_d = e.view((0, 0), (n, n)).into_owned();
    let m = e.view((0, n), (n, n)).into_owned();
    (a_d, m)
}

/// Matrix square root by the Denman-Beavers iteration.
fn sqrtm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, BlaError> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let y_inv = y.clone().try_inverse().ok_or(BlaError::ConversionFailed)?;
        let z_inv = z.clone().try_inverse().ok_or(BlaError::ConversionFailed)?;
        let y_next = 0.5 * (&y + &z_inv);
        let z_next = 0.5 * (&z + &y_inv);
        let delta = (&y_next - &y).norm();
        let scale = y.norm().max(f64::MIN_POSITIVE);
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * scale {
            break;
        }
    }
    Ok(y)
}

/// Principal matrix logarithm by inverse scaling-and-squaring with a
/// Mercator series at the scaled matrix. Valid for matrices without
/// eigenvalues on the closed negative real axis.
fn logm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, BlaError> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut x = a.clone();
    let mut levels = 0i32;
    while (&x - &eye).norm() > 0.25 {
        if levels > 60 {
            return Err(BlaError::ConversionFailed);
        }
        x = sqrtm(&x)?;
        levels += 1;
    }
    let y = &x - &eye;
    let mut term = y.clone();
    let mut acc = y.clone();
    for k in 2..=60 {
        term = &term * &y;
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        acc += (sign / k as f64) * &term;
        if term.norm() / k as f64 <= 1e-18 * acc.norm().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(acc * 2f64.powi(levels))
}

/// Eigenvalue test for the closed negative real axis, where the principal
/// logarithm is undefined.
fn has_negative_real_axis_eigenvalue(a: &DMatrix<f64>) -> bool {
    let eigs = a.clone().complex_eigenvalues();
    eigs.iter()
        .any(|l| l.im.abs() <= 1e-12 * (1.0 + l.norm()) && l.re <= 0.0)
}

struct ArxModel {
    /// Output autoregression matrices A_1..A_p (each n_y x n_y).
    a: Vec<DMatrix<f64>>,
    /// Input matrices B_0..B_p (each n_y x n_u).
    b: Vec<DMatrix<f64>>,
}

impl ArxModel {
    /// Impulse-response (Markov) parameters G_0..G_count.
    fn markov(&self, count: usize, n_y: usize, n_u: usize) -> Vec<DMatrix<f64>> {
        let p = self.a.len();
        let zero = DMatrix::<f64>::zeros(n_y, n_u);
        let mut g: Vec<DMatrix<f64>> = Vec::with_capacity(count + 1);
        for j in 0..=count {
            let mut gj = if j < self.b.len() {
                self.b[j].clone()
            } else {
                zero.clone()
            };
            for i in 1..=p.min(j) {
                gj += &self.a[i - 1] * &g[j - i];
            }
            g.push(gj);
        }
        g
    }
}

fn fit_arx(data: &SignalPair, lag: usize) -> Result<ArxModel, BlaError> {
    let n_u = data.u.channels();
    let n_y = data.y.channels();
    let k_total = data.len();
    let cols = n_y * lag + n_u * (lag + 1);
    let rows = k_total.saturating_sub(lag);
    if rows < 2 * cols {
        return Err(BlaError::TooShort {
            need: lag + 2 * cols,
            got: k_total,
            lag,
        });
    }
    // Excitation guard: a constant input cannot identify dynamics.
    let u_mean: Vec<f64> = (0..n_u)
        .map(|ch| (0..k_total).map(|k| data.u.get(k, ch)).sum::<f64>() / k_total as f64)
        .collect();
    let u_var: f64 = (0..n_u)
        .map(|ch| {
            (0..k_total)
                .map(|k| {
                    let d = data.u.get(k, ch) - u_mean[ch];
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    if u_var == 0.0 {
        return Err(BlaError::NoExcitation);
    }

    let mut phi = DMatrix::<f64>::zeros(rows, cols);
    let mut targets = DMatrix::<f64>::zeros(rows, n_y);
    for (r, k) in (lag..k_total).enumerate() {
        let mut c = 0;
        for i in 1..=lag {
            for ch in 0..n_y {
                phi[(r, c)] = data.y.get(k - i, ch);
                c += 1;
            }
        }
        for i in 0..=lag {
            for ch in 0..n_u {
                phi[(r, c)] = data.u.get(k - i, ch);
                c += 1;
            }
        }
        for ch in 0..n_y {
            targets[(r, ch)] = data.y.get(k, ch);
        }
    }

    let svd = phi.svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if sigma_max == 0.0 {
        return Err(BlaError::RankDeficient);
    }
    // Minimum-norm solution: directions below the cutoff carry no
    // information and are zeroed rather than inverted.
    let cutoff = 1e-10 * sigma_max;
    let theta = svd
        .solve(&targets, cutoff)
        .map_err(|_| BlaError::RankDeficient)?;

    let mut a = Vec::with_capacity(lag);
    let mut b = Vec::with_capacity(lag + 1);
    let mut row = 0usize;
    for _ in 0..lag {
        let mut ai = DMatrix::<f64>::zeros(n_y, n_y);
        for ch in 0..n_y {
            for o in 0..n_y {
                ai[(o, ch)] = theta[(row + ch, o)];
            }
        }
        row += n_y;
        a.push(ai);
    }
    for _ in 0..=lag {
        let mut bi = DMatrix::<f64>::zeros(n_y, n_u);
        for ch in 0..n_u {
            for o in 0..n_y {
                bi[(o, ch)] = theta[(row + ch, o)];
            }
        }
        row += n_u;
        b.push(bi);
    }
    Ok(ArxModel { a, b })
}

/// Ho-Kalman style realization: balanced truncation of the block Hankel
/// matrix of Markov parameters.
fn realize(
    markov: &[DMatrix<f64>],
    order: usize,
    blocks: usize,
    n_y: usize,
    n_u: usize,
) -> DiscreteSS {
    let q = blocks;
    let mut hankel = DMatrix::<f64>::zeros(q * n_y, q * n_u);
    let mut shifted = DMatrix::<f64>::zeros(q * n_y, q * n_u);
    for i in 0..q {
        for j in 0..q {
            let g = &markov[i + j + 1];
            let gs = &markov[i + j + 2];
            for r in 0..n_y {
                for c in 0..n_u {
                    hankel[(i * n_y + r, j * n_u + c)] = g[(r, c)];
                    shifted[(i * n_y + r, j * n_u + c)] = gs[(r, c)];
                }
            }
        }
    }

    let svd = hankel.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = 1e-10 * sigma_max.max(f64::MIN_POSITIVE);
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let n = order.min(rank);
    if n == 0 {
        // No reachable/observable dynamics: the zero system of order `order`.
        return DiscreteSS {
            a: DMatrix::zeros(order, order),
            b: DMatrix::zeros(order, n_u),
            c: DMatrix::zeros(n_y, order),
            d: markov[0].clone(),
        };
    }

    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let u_n = u.columns(0, n).into_owned();
    let v_tn = v_t.rows(0, n).into_owned();
    let s_sqrt: Vec<f64> = svd.singular_values.iter().take(n).map(|s| s.sqrt()).collect();

    // Observability = U_n S^(1/2), controllability = S^(1/2) V_n^T.
    let mut obs = u_n.clone();
    for (j, s) in s_sqrt.iter().enumerate() {
        obs.column_mut(j).scale_mut(*s);
    }
    let mut ctrl = v_tn.clone();
    for (i, s) in s_sqrt.iter().enumerate() {
        ctrl.row_mut(i).scale_mut(*s);
    }

    // A = S^(-1/2) U_n^T H_shift V_n S^(-1/2)
    let mut left = u_n.transpose();
    for (i, s) in s_sqrt.iter().enumerate() {
        left.row_mut(i).scale_mut(1.0 / s);
    }
    let mut right = v_tn.transpose();
    for (j, s) in s_sqrt.iter().enumerate() {
        right.column_mut(j).scale_mut(1.0 / s);
    }
    let a = &left * &shifted * &right;
    let b = ctrl.columns(0, n_u).into_owned();
    let c = obs.rows(0, n_y).into_owned();
    DiscreteSS {
        a,
        b,
        c,
        d: markov[0].clone(),
    }
}

/// Fit a continuous-time linear state-space model of the requested order to
/// input/output data: ARX regression, Hankel realization, inverse-ZOH
/// conversion (bilinear fallback when the matrix logarithm is undefined).
pub fn fit_bla(data: &SignalPair, order: usize, lag: usize) -> Result<BlaFit, BlaError> {
    if order == 0 {
        return Err(BlaError::BadOrder);
    }
    if lag == 0 {
        return Err(BlaError::BadOrder);
    }
    let t_s = data.u.sample_time();
    let n_u = data.u.channels();
    let n_y = data.y.channels();
    let arx = fit_arx(data, lag)?;
    let blocks = (2 * order + 2).max(lag);
    let markov = arx.markov(2 * blocks + 2, n_y, n_u);
    let discrete = realize(&markov, order, blocks, n_y, n_u);

    let use_tustin = has_negative_real_axis_eigenvalue(&discrete.a);
    let n = discrete.a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let (a_c, b_c, tustin_fallback) = if use_tustin {
        let inv = (&eye + &discrete.a)
            .try_inverse()
            .ok_or(BlaError::ConversionFailed)?;
        let a_c = (2.0 / t_s) * &inv * (&discrete.a - &eye);
        let b_c = (2.0 / t_s) * &inv * &discrete.b;
        (a_c, b_c, true)
    } else {
        let a_c = logm(&discrete.a)? / t_s;
        let (_, m) = zoh_pair(&a_c, t_s);
        let b_c = m
            .lu()
            .solve(&discrete.b)
            .ok_or(BlaError::ConversionFailed)?;
        (a_c, b_c, false)
    };

    let hurwitz = a_c
        .clone()
        .complex_eigenvalues()
        .iter()
        .all(|l| l.re < 0.0);

    Ok(BlaFit {
        model: LinearSS {
            a: a_c,
            b: b_c,
            c: discrete.c.clone(),
            d: discrete.d.clone(),
            order: n,
            sample_time: t_s,
            hurwitz,
            tustin_fallback,
        },
        discrete,
    })
}

/// Simulate the continuous-time model on the sampling grid under zero-order
/// hold from a zero initial state; the state derivative is evaluated
/// exactly as `A x + B u` at each sample.
pub fn bla_states(model: &LinearSS, u: &Signal) -> Result<(Signal, Signal), BlaError> {
    let n = model.state_dim();
    let n_u = u.channels();
    if model.b.ncols() != n_u {
        return Err(BlaError::Dims(format!(
            "model expects {} input channels, signal has {n_u}",
            model.b.ncols()
        )));
    }
    let (a_d, b_d) = model.discretize(u.sample_time());
    let mut x = DVector::<f64>::zeros(n);
    let mut states = Vec::with_capacity(u.len() * n);
    let mut derivs = Vec::with_capacity(u.len() * n);
    for k in 0..u.len() {
        let u_k = DVector::from_column_slice(u.row(k));
        let dx = &model.a * &x + &model.b * &u_k;
        states.extend_from_slice(x.as_slice());
        derivs.extend_from_slice(dx.as_slice());
        x = &a_d * &x + &b_d * &u_k;
        if x.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            return Err(BlaError::Unstable(k));
        }
    }
    let names: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    let dnames: Vec<String> = (0..n).map(|i| format!("dx{i}")).collect();
    Ok((
        Signal::new(states, n, u.sample_time(), names).map_err(|e| BlaError::Dims(e.to_string()))?,
        Signal::new(derivs, n, u.sample_time(), dnames)
            .map_err(|e| BlaError::Dims(e.to_string()))?,
    ))
}

/// Variance-heuristic time scale from a linear approximation of the data:
/// fit, simulate the states, and take `sqrt(var(x)/var(xdot))`.
pub fn tau_bla(data: &SignalPair, order: usize, lag: usize) -> Result<f64, BlaError> {
    let fit = fit_bla(data, order, lag)?;
    let (states, derivs) = bla_states(&fit.model, &data.u)?;
    sdn::tau_from_variances(&states, &derivs).map_err(|_| BlaError::DegenerateStates)
}
