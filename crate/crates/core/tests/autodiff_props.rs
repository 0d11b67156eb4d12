//! Gradient correctness of every tape primitive against central finite
//! differences, plus linearity and determinism of the backward sweep.

mod common;

use common::{fd_grad, rel_err};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sdnid_core::autodiff::{Tape, Tensor, TensorRef};

const FD_STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Build a scalar objective from an op output by a fixed weighted sum, so
/// that non-scalar primitives receive a dense upstream gradient.
fn weighted_sum(tape: &mut Tape, out: TensorRef, weights: &[f64]) -> TensorRef {
    let (r, c) = tape.value(out).shape();
    let w = tape.leaf(Tensor::new(r, c, weights.to_vec()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Check one primitive: `build` receives the tape and the input leaf and
/// returns the op output. Inputs are sampled via `sample`.
fn check_unary(
    name: &str,
    shape: (usize, usize),
    trials: usize,
    seed: u64,
    sample: impl Fn(&mut ChaCha12Rng) -> f64,
    build: impl Fn(&mut Tape, TensorRef) -> TensorRef,
) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let len = shape.0 * shape.1;
    for trial in 0..trials {
        let x: Vec<f64> = (0..len).map(|_| sample(&mut rng)).collect();
        let weights: Vec<f64> = (0..len_of_output(&build, shape, &x))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();

        let eval = |vals: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let leaf = tape.leaf(Tensor::new(shape.0, shape.1, vals.to_vec()).unwrap());
            let out = build(&mut tape, leaf);
            let s = weighted_sum(&mut tape, out, &weights);
            tape.value(s).item()
        };

        let mut tape = Tape::new();
        let leaf = tape.param_leaf(Tensor::new(shape.0, shape.1, x.clone()).unwrap(), 0);
        let out = build(&mut tape, leaf);
        let s = weighted_sum(&mut tape, out, &weights);
        let grads = tape.backward(s).unwrap();
        let analytic = grads.wrt(leaf).unwrap().data().to_vec();
        let numeric = fd_grad(eval, &x, FD_STEP);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = rel_err(*a, *n, 1e-8);
            assert!(
                err < TOL,
                "{name} trial {trial} entry {i}: analytic {a} vs fd {n} (err {err})"
            );
        }
    }
}

fn len_of_output(
    build: &impl Fn(&mut Tape, TensorRef) -> TensorRef,
    shape: (usize, usize),
    x: &[f64],
) -> usize {
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::new(shape.0, shape.1, x.to_vec()).unwrap());
    let out = build(&mut tape, leaf);
    tape.value(out).len()
}

#[test]
fn gradcheck_scale_const() {
    check_unary("scale", (3, 2), 20, 1, |r| r.random_range(-2.0..2.0), |t, x| {
        t.scale(x, -1.7)
    });
}

#[test]
fn gradcheck_leaky_relu() {
    // Keep samples away from the kink at zero.
    check_unary(
        "leaky_relu",
        (4, 1),
        20,
        2,
        |r| {
            let v: f64 = r.random_range(0.2..2.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        },
        |t, x| t.leaky_relu(x, 0.01),
    );
}

#[test]
fn gradcheck_relu_slope_zero() {
    check_unary(
        "relu",
        (4, 1),
        20,
        12,
        |r| {
            let v: f64 = r.random_range(0.2..2.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        },
        |t, x| t.leaky_relu(x, 0.0),
    );
}

#[test]
fn gradcheck_square() {
    check_unary("square", (2, 3), 20, 3, |r| r.random_range(-2.0..2.0), |t, x| {
        t.square(x)
    });
}

#[test]
fn gradcheck_sum() {
    check_unary("sum", (5, 1), 20, 4, |r| r.random_range(-2.0..2.0), |t, x| {
        t.sum(x)
    });
}

#[test]
fn gradcheck_recip() {
    // Inputs bounded away from zero.
    check_unary(
        "recip",
        (3, 1),
        20,
        5,
        |r| {
            let v: f64 = r.random_range(0.5..2.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        },
        |t, x| t.recip(x),
    );
}

#[test]
fn gradcheck_max_scalar_away_from_kink() {
    check_unary(
        "max_scalar",
        (4, 1),
        20,
        6,
        |r| {
            // Sample clearly above or clearly below the clamp at 0.5.
            if r.random_bool(0.5) {
                r.random_range(0.7..2.0)
            } else {
                r.random_range(-2.0..0.3)
            }
        },
        |t, x| t.max_scalar(x, 0.5),
    );
}

#[test]
fn gradcheck_transpose() {
    check_unary("transpose", (2, 3), 20, 7, |r| r.random_range(-2.0..2.0), |t, x| {
        t.transpose(x)
    });
}

#[test]
fn gradcheck_top_left() {
    check_unary("top_left", (3, 3), 20, 8, |r| r.random_range(-2.0..2.0), |t, x| {
        t.top_left(x, 2).unwrap()
    });
}

#[test]
fn gradcheck_det() {
    for n in 1..=4usize {
        check_unary(
            "det",
            (n, n),
            15,
            9 + n as u64,
            |r| r.random_range(-2.0..2.0),
            |t, x| t.det(x).unwrap(),
        );
    }
}

#[test]
fn gradcheck_matmul_both_sides() {
    let mut rng = ChaCha12Rng::seed_from_u64(20);
    for trial in 0..15 {
        let (m, k, n) = (3usize, 2usize, 2usize);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();

        let eval = |av: &[f64], bv: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let ar = tape.leaf(Tensor::new(m, k, av.to_vec()).unwrap());
            let br = tape.leaf(Tensor::new(k, n, bv.to_vec()).unwrap());
            let out = tape.matmul(ar, br).unwrap();
            let s = weighted_sum(&mut tape, out, &w);
            tape.value(s).item()
        };

        let mut tape = Tape::new();
        let ar = tape.param_leaf(Tensor::new(m, k, a.clone()).unwrap(), 0);
        let br = tape.param_leaf(Tensor::new(k, n, b.clone()).unwrap(), 1);
        let out = tape.matmul(ar, br).unwrap();
        let s = weighted_sum(&mut tape, out, &w);
        let grads = tape.backward(s).unwrap();

        let ga = grads.wrt(ar).unwrap().data().to_vec();
        let fd_a = fd_grad(|av| eval(av, &b), &a, FD_STEP);
        let gb = grads.wrt(br).unwrap().data().to_vec();
        let fd_b = fd_grad(|bv| eval(&a, bv), &b, FD_STEP);
        for (i, (x, y)) in ga.iter().zip(&fd_a).enumerate() {
            assert!(rel_err(*x, *y, 1e-8) < TOL, "matmul dA trial {trial} entry {i}");
        }
        for (i, (x, y)) in gb.iter().zip(&fd_b).enumerate() {
            assert!(rel_err(*x, *y, 1e-8) < TOL, "matmul dB trial {trial} entry {i}");
        }
    }
}

#[test]
fn gradcheck_binary_elementwise_and_concat() {
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    type Builder = fn(&mut Tape, TensorRef, TensorRef) -> TensorRef;
    let cases: Vec<(&str, Builder)> = vec![
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub", |t, a, b| t.sub(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
        ("concat_rows", |t, a, b| t.concat_rows(a, b).unwrap()),
    ];
    for (name, build) in cases {
        for trial in 0..15 {
            let shape = (3usize, 1usize);
            let len = shape.0 * shape.1;
            let a: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
            let out_len = {
                let mut tape = Tape::new();
                let ar = tape.leaf(Tensor::new(shape.0, shape.1, a.clone()).unwrap());
                let br = tape.leaf(Tensor::new(shape.0, shape.1, b.clone()).unwrap());
                let o = build(&mut tape, ar, br);
                tape.value(o).len()
            };
            let w: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

            let eval = |av: &[f64], bv: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let ar = tape.leaf(Tensor::new(shape.0, shape.1, av.to_vec()).unwrap());
                let br = tape.leaf(Tensor::new(shape.0, shape.1, bv.to_vec()).unwrap());
                let o = build(&mut tape, ar, br);
                let s = weighted_sum(&mut tape, o, &w);
                tape.value(s).item()
            };

            let mut tape = Tape::new();
            let ar = tape.param_leaf(Tensor::new(shape.0, shape.1, a.clone()).unwrap(), 0);
            let br = tape.param_leaf(Tensor::new(shape.0, shape.1, b.clone()).unwrap(), 1);
            let o = build(&mut tape, ar, br);
            let s = weighted_sum(&mut tape, o, &w);
            let grads = tape.backward(s).unwrap();

            let fd_a = fd_grad(|av| eval(av, &b), &a, FD_STEP);
            let fd_b = fd_grad(|bv| eval(&a, bv), &b, FD_STEP);
            for (i, (x, y)) in grads.wrt(ar).unwrap().data().iter().zip(&fd_a).enumerate() {
                assert!(rel_err(*x, *y, 1e-8) < TOL, "{name} dA trial {trial} entry {i}");
            }
            for (i, (x, y)) in grads.wrt(br).unwrap().data().iter().zip(&fd_b).enumerate() {
                assert!(rel_err(*x, *y, 1e-8) < TOL, "{name} dB trial {trial} entry {i}");
            }
        }
    }
}

#[test]
fn gradcheck_scale_by_scalar() {
    let mut rng = ChaCha12Rng::seed_from_u64(22);
    for trial in 0..15 {
        let s0: f64 = rng.random_range(-2.0..2.0);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |sv: f64, xv: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let sr = tape.leaf(Tensor::scalar(sv));
            let xr = tape.leaf(Tensor::col(xv));
            let o = tape.scale_by(sr, xr).unwrap();
            let s = weighted_sum(&mut tape, o, &w);
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let sr = tape.param_leaf(Tensor::scalar(s0), 0);
        let xr = tape.param_leaf(Tensor::col(&x), 1);
        let o = tape.scale_by(sr, xr).unwrap();
        let s = weighted_sum(&mut tape, o, &w);
        let grads = tape.backward(s).unwrap();

        let fd_s = fd_grad(|v| eval(v[0], &x), &[s0], FD_STEP);
        assert!(
            rel_err(grads.wrt(sr).unwrap().item(), fd_s[0], 1e-8) < TOL,
            "scale_by ds trial {trial}"
        );
        let fd_x = fd_grad(|xv| eval(s0, xv), &x, FD_STEP);
        for (i, (a, n)) in grads.wrt(xr).unwrap().data().iter().zip(&fd_x).enumerate() {
            assert!(rel_err(*a, *n, 1e-8) < TOL, "scale_by dx trial {trial} entry {i}");
        }
    }
}

#[test]
fn two_layer_mlp_gradcheck() {
    // Random 2-layer MLP scalar output: full-network finite differences.
    let mut rng = ChaCha12Rng::seed_from_u64(30);
    let (n_in, n_h) = (3usize, 5usize);
    let n_params = n_h * n_in + n_h + n_h;
    for trial in 0..5 {
        let theta: Vec<f64> = (0..n_params).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input: Vec<f64> = (0..n_in).map(|_| rng.random_range(-2.0..2.0)).collect();

        let eval = |vals: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let w1 = tape.leaf(Tensor::new(n_h, n_in, vals[..n_h * n_in].to_vec()).unwrap());
            let b1 = tape.leaf(Tensor::col(&vals[n_h * n_in..n_h * n_in + n_h]));
            let w2 = tape.leaf(Tensor::new(1, n_h, vals[n_h * n_in + n_h..].to_vec()).unwrap());
            let x = tape.leaf(Tensor::col(&input));
            let a1 = tape.matmul(w1, x).unwrap();
            let a1 = tape.add(a1, b1).unwrap();
            let h = tape.leaky_relu(a1, 0.01);
            let out = tape.matmul(w2, h).unwrap();
            let sq = tape.square(out);
            let s = tape.sum(sq);
            tape.value(s).item()
        };

        let mut tape = Tape::new();
        let w1 = tape.param_leaf(Tensor::new(n_h, n_in, theta[..n_h * n_in].to_vec()).unwrap(), 0);
        let b1 = tape.param_leaf(Tensor::col(&theta[n_h * n_in..n_h * n_in + n_h]), 1);
        let w2 = tape.param_leaf(Tensor::new(1, n_h, theta[n_h * n_in + n_h..].to_vec()).unwrap(), 2);
        let x = tape.leaf(Tensor::col(&input));
        let a1 = tape.matmul(w1, x).unwrap();
        let a1 = tape.add(a1, b1).unwrap();
        let h = tape.leaky_relu(a1, 0.01);
        let out = tape.matmul(w2, h).unwrap();
        let sq = tape.square(out);
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();

        let mut analytic = Vec::new();
        for leaf in [w1, b1, w2] {
            analytic.extend_from_slice(grads.wrt(leaf).unwrap().data());
        }
        let numeric = fd_grad(eval, &theta, FD_STEP);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!(
                rel_err(*a, *n, 1e-8) < TOL,
                "mlp trial {trial} param {i}: {a} vs {n}"
            );
        }
    }
}

#[test]
fn backward_is_linear_in_the_output() {
    let mut rng = ChaCha12Rng::seed_from_u64(40);
    for _ in 0..10 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (alpha, beta): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));

        let grads_of = |combine: bool, alpha: f64, beta: f64| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let xr = tape.param_leaf(Tensor::col(&x), 0);
            let cr = tape.leaf(Tensor::col(&c));
            // f = sum(x^2), g = sum(c .* x)
            let sq = tape.square(xr);
            let f = tape.sum(sq);
            let prod = tape.mul(xr, cr).unwrap();
            let g = tape.sum(prod);
            if combine {
                let fa = tape.scale(f, alpha);
                let gb = tape.scale(g, beta);
                let total = tape.add(fa, gb).unwrap();
                let grads = tape.backward(total).unwrap();
                (grads.wrt(xr).unwrap().data().to_vec(), vec![])
            } else {
                let gf = tape.backward(f).unwrap().wrt(xr).unwrap().data().to_vec();
                let gg = tape.backward(g).unwrap().wrt(xr).unwrap().data().to_vec();
                (gf, gg)
            }
        };

        let (combined, _) = grads_of(true, alpha, beta);
        let (gf, gg) = grads_of(false, alpha, beta);
        for i in 0..x.len() {
            let expect = alpha * gf[i] + beta * gg[i];
            assert!(
                (combined[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0),
                "linearity violated at {i}: {} vs {expect}",
                combined[i]
            );
        }
    }
}

#[test]
fn backward_replay_is_bit_identical() {
    let run = || -> Vec<u64> {
        let mut tape = Tape::new();
        let x = tape.param_leaf(Tensor::col(&[0.3, -1.2, 2.4]), 0);
        let w = tape.leaf(Tensor::new(2, 3, vec![0.1, -0.4, 0.9, 1.1, 0.2, -0.7]).unwrap());
        let h = tape.matmul(w, x).unwrap();
        let a = tape.leaky_relu(h, 0.01);
        let sq = tape.square(a);
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        grads
            .wrt(x)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    };
    assert_eq!(run(), run());
}
