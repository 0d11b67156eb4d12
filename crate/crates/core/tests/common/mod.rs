//! Shared test oracles, independent of the implementation paths they check.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sdnid_core::data::{Signal, SignalPair};

/// Central finite differences of a scalar function.
pub fn fd_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe);
        probe[i] = orig - step;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Fraction of entries whose relative error stays below `tol`. Entries
/// whose absolute difference lies under `abs_floor` also count: central
/// differences cannot certify gradients below their own rounding error
/// (about eps * |loss| / step), so that bound is the oracle's resolution.
pub fn grad_agreement(
    analytic: &[f64],
    numeric: &[f64],
    tol: f64,
    floor: f64,
    abs_floor: f64,
) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let ok = analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| rel_err(**a, **n, floor) < tol || (**a - **n).abs() < abs_floor)
        .count();
    ok as f64 / analytic.len() as f64
}

/// Rounding-error resolution of a central difference of a scalar of
/// magnitude `value` at the given step.
pub fn fd_resolution(value: f64, step: f64) -> f64 {
    10.0 * f64::EPSILON * value.abs().max(1.0) / step
}

pub fn white_noise(k: usize, amplitude: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..k).map(|_| rng.random_range(-amplitude..amplitude)).collect()
}

/// Exact zero-order-hold simulation of a continuous-time linear system via
/// the matrix exponential (the oracle route, independent of the RK4 code).
pub struct LtiOracle {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LtiOracle {
    pub fn simulate(&self, u: &Signal, x0: &[f64]) -> (Signal, Signal, Signal) {
        let n = self.a.nrows();
        let t_s = u.sample_time();
        let mut block = DMatrix::<f64>::zeros(2 * n, 2 * n);
        for r in 0..n {
            for c in 0..n {
                block[(r, c)] = self.a[(r, c)] * t_s;
            }
            block[(r, n + r)] = t_s;
        }
        let e = block.exp();
        let a_d = e.view((0, 0), (n, n)).into_owned();
        let b_d = e.view((0, n), (n, n)).into_owned() * &self.b;

        let mut x = nalgebra::DVector::from_column_slice(x0);
        let mut states = Vec::with_capacity(u.len() * n);
        let mut derivs = Vec::with_capacity(u.len() * n);
        let mut outputs = Vec::with_capacity(u.len() * self.c.nrows());
        for k in 0..u.len() {
            let u_k = nalgebra::DVector::from_column_slice(u.row(k));
            let dx = &self.a * &x + &self.b * &u_k;
            states.extend_from_slice(x.as_slice());
            derivs.extend_from_slice(dx.as_slice());
            let y = &self.c * &x;
            outputs.extend_from_slice(y.as_slice());
            x = &a_d * &x + &b_d * &u_k;
        }
        let state_names: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        let deriv_names: Vec<String> = (0..n).map(|i| format!("dx{i}")).collect();
        let out_names: Vec<String> = (0..self.c.nrows()).map(|i| format!("y{i}")).collect();
        (
            Signal::new(states, n, t_s, state_names).unwrap(),
            Signal::new(derivs, n, t_s, deriv_names).unwrap(),
            Signal::new(outputs, self.c.nrows(), t_s, out_names).unwrap(),
        )
    }
}

/// Input/output record of a 2-state linear system driven by a multisine.
pub fn linear_benchmark(k: usize, t_s: f64, seed: u64) -> (SignalPair, Signal, Signal) {
    let oracle = LtiOracle {
        a: DMatrix::from_row_slice(2, 2, &[-0.3, 0.1, 0.0, -0.5]),
        b: DMatrix::from_row_slice(2, 1, &[0.5, 0.3]),
        c: DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
    };
    let u = sdnid_core::data::multisine(k, t_s, 24, 1.5, 0.0, seed);
    let (states, derivs, y) = oracle.simulate(&u, &[0.0, 0.0]);
    (SignalPair::new(u, y).unwrap(), states, derivs)
}
