// Scratch exploration of the desk-scale synthetic tank study (not part of
// the test suite). Run with: cargo run --example explore -- <mode>

use sdnid_core::config::{RunConfig, TauMode};
use sdnid_core::data::{self, prepare, split_fractions, SignalPair, TankParams};
use sdnid_core::sdn::TauKind;
use sdnid_core::train;

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn desk_tanks() -> TankParams {
    TankParams {
        k1: env_f64("K1", 0.10),
        k2: env_f64("K2", 0.10),
        k3: env_f64("K3", 0.08),
        k4: env_f64("K4", 0.12),
        level_max: env_f64("LEVEL_MAX", 10.0),
        substeps: 20,
    }
}

fn desk_data(seed: u64) -> sdnid_core::data::PreparedData {
    let k = 2000;
    let t_s = 4.0;
    let u = data::multisine(
        k,
        t_s,
        env_usize("BINS", 80),
        env_f64("AMP", 0.7),
        env_f64("OFFSET", 1.2),
        seed,
    );
    let sim = data::cts_oracle(&u, &desk_tanks(), [0.5, 0.5]).unwrap();
    let y = data::add_noise_snr(&sim.y, env_f64("SNR", 35.0), seed + 10_000).unwrap();
    let pair = SignalPair::new(u, y).unwrap();
    let splits = split_fractions(&pair, 0.7, 0.15, 0.15).unwrap();
    prepare(&splits).unwrap()
}

fn desk_cfg() -> RunConfig {
    RunConfig {
        state_dim: 4,
        output_lags: 5,
        input_lags: 5,
        hidden: 32,
        batch_size: env_usize("BATCH", 8),
        subseq_len: env_usize("J", 64),
        max_steps: env_usize("STEPS", 3000),
        patience: 3000,
        sample_time: 4.0,
        tau_kind: TauKind::PerState,
        val_interval: 100,
        seed: 0,
        ..RunConfig::default()
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("bla");
    let prepared = desk_data(42);

    match mode {
        "bla" => {
            for (order, lag) in [(1, 5), (2, 10), (2, 5), (3, 10)] {
                match sdnid_core::bla::tau_bla(&prepared.train, order, lag) {
                    Ok(tau) => println!(
                        "order {order} lag {lag}: tau = {tau:.2} s, T_s/tau = {:.4}",
                        4.0 / tau
                    ),
                    Err(e) => println!("order {order} lag {lag}: error {e}"),
                }
            }
            // Oracle: variance ratio of the true (noise-free) tank states.
            let u = data::multisine(2000, 4.0, 150, 0.7, 1.2, 42);
            let sim = data::cts_oracle(&u, &TankParams::default(), [0.5, 0.5]).unwrap();
            // Finite-difference state derivatives as the oracle.
            let k = sim.states.len();
            let mut derivs = Vec::with_capacity((k - 2) * 2);
            let mut states = Vec::with_capacity((k - 2) * 2);
            for i in 1..k - 1 {
                for ch in 0..2 {
                    derivs.push((sim.states.get(i + 1, ch) - sim.states.get(i - 1, ch)) / 8.0);
                    states.push(sim.states.get(i, ch));
                }
            }
            let xs = sdnid_core::data::Signal::new(states, 2, 4.0, vec!["a".into(), "b".into()]).unwrap();
            let dxs = sdnid_core::data::Signal::new(derivs, 2, 4.0, vec!["a".into(), "b".into()]).unwrap();
            let tau_true = sdnid_core::sdn::tau_from_variances(&xs, &dxs).unwrap();
            println!("true-state oracle: tau = {tau_true:.2} s, T_s/tau = {:.4}", 4.0 / tau_true);
        }
        "train" => {
            let ratio: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.2);
            let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
            let mut cfg = desk_cfg();
            cfg.tau_mode = TauMode::Fixed { ratio };
            cfg.seed = seed;
            let t0 = std::time::Instant::now();
            match train::fit(&cfg, &prepared) {
                Ok(fit) => {
                    let test = train::evaluate_or_inf(&fit.params, &prepared.test, &prepared.scalers.y);
                    println!(
                        "ratio {ratio} seed {seed}: val {:.4} test {test:.4} diverged_steps {} best_step {:?} [{:.1?}]",
                        fit.best_val_rmse, fit.diverged_steps, fit.best_step, t0.elapsed()
                    );
                }
                Err(e) => println!("ratio {ratio} seed {seed}: FAILED {e} [{:.1?}]", t0.elapsed()),
            }
        }
        "trainable" => {
            let mut cfg = desk_cfg();
            cfg.tau_mode = TauMode::Trainable;
            let t0 = std::time::Instant::now();
            let fit = train::fit(&cfg, &prepared).unwrap();
            let test = train::evaluate_or_inf(&fit.params, &prepared.test, &prepared.scalers.y);
            let n = fit.history.len();
            let tail = &fit.history[n - n / 10..];
            let mean_ratio_tail: f64 = tail
                .iter()
                .map(|r| r.ts_over_tau.iter().sum::<f64>() / r.ts_over_tau.len() as f64)
                .sum::<f64>()
                / tail.len() as f64;
            let first_tail = &tail[0];
            let last = fit.history.last().unwrap();
            println!(
                "trainable: val {:.4} test {test:.4} mean T_s/tau tail {:.4} (start-of-tail {:?} end {:?}) [{:.1?}]",
                fit.best_val_rmse,
                mean_ratio_tail,
                first_tail.ts_over_tau,
                last.ts_over_tau,
                t0.elapsed()
            );
        }
        other => eprintln!("unknown mode {other}"),
    }
}
