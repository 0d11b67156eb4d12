//! Signal ingestion, normalization, splits, and a synthetic cascaded-tanks
//! system for desk-scale experiments.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv read failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("non-numeric cell at row {row}, column {col}: {cell:?}")]
    NonNumeric { row: usize, col: String, cell: String },
    #[error("file contains no data rows")]
    Empty,
    #[error("signal lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("channel {0:?} is constant; z-score normalization undefined")]
    ConstantChannel(String),
    #[error("need at least {need} samples, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("split fractions {0:?} overlap (sum > 1)")]
    OverlappingSplits([f64; 3]),
    #[error("split of {want} samples exceeds data length {have}")]
    SplitTooLong { want: usize, have: usize },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// Uniformly sampled multivariate time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    values: Vec<f64>,
    channels: usize,
    sample_time: f64,
    names: Vec<String>,
}

impl Signal {
    pub fn new(
        values: Vec<f64>,
        channels: usize,
        sample_time: f64,
        names: Vec<String>,
    ) -> Result<Self, DataError> {
        if channels == 0 || values.len() % channels != 0 {
            return Err(DataError::InvalidArg(format!(
                "value count {} not divisible by {} channels",
                values.len(),
                channels
            )));
        }
        if sample_time <= 0.0 {
            return Err(DataError::InvalidArg("sample time must be positive".into()));
        }
        if names.len() != channels {
            return Err(DataError::InvalidArg("one name per channel required".into()));
        }
        Ok(Signal {
            values,
            channels,
            sample_time,
            names,
        })
    }

    /// Single-channel signal.
    pub fn from_channel(values: Vec<f64>, sample_time: f64, name: &str) -> Self {
        Signal {
            values,
            channels: 1,
            sample_time,
            names: vec![name.to_string()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.channels..(k + 1) * self.channels]
    }

    pub fn get(&self, k: usize, ch: usize) -> f64 {
        self.values[k * self.channels + ch]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Contiguous sample range as a new signal.
    pub fn slice(&self, start: usize, end: usize) -> Result<Signal, DataError> {
        if end > self.len() || start > end {
            return Err(DataError::SplitTooLong {
                want: end,
                have: self.len(),
            });
        }
        Ok(Signal {
            values: self.values[start * self.channels..end * self.channels].to_vec(),
            channels: self.channels,
            sample_time: self.sample_time,
            names: self.names.clone(),
        })
    }

    pub fn with_sample_time(&self, sample_time: f64) -> Signal {
        Signal {
            values: self.values.clone(),
            channels: self.channels,
            sample_time,
            names: self.names.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-channel affine normalization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fit a z-score scaler (population standard deviation).
pub fn zscore_fit(signal: &Signal) -> Result<Scaler, DataError> {
    let k = signal.len();
    if k < 2 {
        return Err(DataError::TooShort { need: 2, got: k });
    }
    let n = signal.channels();
    let mut mean = vec![0.0; n];
    for i in 0..k {
        for (m, v) in mean.iter_mut().zip(signal.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= k as f64;
    }
    let mut var = vec![0.0; n];
    for i in 0..k {
        for (ch, v) in signal.row(i).iter().enumerate() {
            let d = v - mean[ch];
            var[ch] += d * d;
        }
    }
    let mut std = vec![0.0; n];
    for (ch, v) in var.iter().enumerate() {
        let s = (v / k as f64).sqrt();
        if s == 0.0 {
            return Err(DataError::ConstantChannel(signal.names()[ch].clone()));
        }
        std[ch] = s;
    }
    Ok(Scaler { mean, std })
}

pub fn zscore_apply(scaler: &Scaler, signal: &Signal) -> Signal {
    let mut out = signal.clone();
    let n = signal.channels();
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        let ch = i % n;
        *v = (*v - scaler.mean[ch]) / scaler.std[ch];
    }
    out
}

pub fn zscore_invert(scaler: &Scaler, signal: &Signal) -> Signal {
    let mut out = signal.clone();
    let n = signal.channels();
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        let ch = i % n;
        *v = *v * scaler.std[ch] + scaler.mean[ch];
    }
    out
}

/// Load aligned input/output signals from a delimited text file with a
/// header row. Column sets are selected by name.
pub fn load_csv(
    path: &Path,
    u_cols: &[String],
    y_cols: &[String],
    sample_time: f64,
    delimiter: u8,
) -> Result<(Signal, Signal), DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let index_of = |name: &String| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.clone()))
    };
    let u_idx: Vec<usize> = u_cols.iter().map(index_of).collect::<Result<_, _>>()?;
    let y_idx: Vec<usize> = y_cols.iter().map(index_of).collect::<Result<_, _>>()?;

    let mut u_vals = Vec::new();
    let mut y_vals = Vec::new();
    let mut rows = 0usize;
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |idx: usize, name: &String| -> Result<f64, DataError> {
            let cell = record.get(idx).unwrap_or("");
            cell.parse::<f64>().map_err(|_| DataError::NonNumeric {
                row: row_no + 1,
                col: name.clone(),
                cell: cell.to_string(),
            })
        };
        for (idx, name) in u_idx.iter().zip(u_cols) {
            u_vals.push(parse(*idx, name)?);
        }
        for (idx, name) in y_idx.iter().zip(y_cols) {
            y_vals.push(parse(*idx, name)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::Empty);
    }
    let u = Signal::new(u_vals, u_cols.len(), sample_time, u_cols.to_vec())?;
    let y = Signal::new(y_vals, y_cols.len(), sample_time, y_cols.to_vec())?;
    Ok((u, y))
}

/// Write aligned signals to a delimited text file. Values are printed with
/// the shortest representation that round-trips exactly in 64-bit floats.
pub fn save_csv(path: &Path, signals: &[&Signal], delimiter: u8) -> Result<(), DataError> {
    let k = signals.first().map_or(0, |s| s.len());
    for s in signals {
        if s.len() != k {
            return Err(DataError::LengthMismatch(k, s.len()));
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let delim = delimiter as char;
    let header: Vec<&str> = signals
        .iter()
        .flat_map(|s| s.names().iter().map(|n| n.as_str()))
        .collect();
    writeln!(file, "{}", header.join(&delim.to_string()))?;
    for i in 0..k {
        let mut first = true;
        for s in signals {
            for v in s.row(i) {
                if !first {
                    write!(file, "{delim}")?;
                }
                write!(file, "{v}")?;
                first = false;
            }
        }
        writeln!(file)?;
    }
    Ok(())
}

/// Physical constants of the synthetic cascaded-tanks system.
///
/// Upper tank level x1 is fed by the pump, drains into the lower tank
/// (level x2); both levels saturate hard at `level_max` (overflow).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TankParams {
    /// Upper-tank outflow coefficient.
    pub k1: f64,
    /// Lower-tank inflow coefficient (from the upper tank).
    pub k2: f64,
    /// Lower-tank outflow coefficient.
    pub k3: f64,
    /// Pump gain.
    pub k4: f64,
    /// Hard saturation level for both tanks.
    pub level_max: f64,
    /// RK4 substeps per sampling interval (dense oracle integration).
    pub substeps: usize,
}

impl Default for TankParams {
    fn default() -> Self {
        // Time constants of a few tens of seconds around typical operating
        // levels, so that T_s = 4 s lands in the interesting normalization
        // regime.
        TankParams {
            k1: 0.10,
            k2: 0.10,
            k3: 0.08,
            k4: 0.12,
            level_max: 10.0,
            substeps: 20,
        }
    }
}

impl TankParams {
    pub fn all_finite(&self) -> bool {
        [self.k1, self.k2, self.k3, self.k4, self.level_max]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Simulated cascaded-tanks response: measured output and the internal
/// state trajectory (for oracle checks).
#[derive(Debug, Clone)]
pub struct CtsResponse {
    pub y: Signal,
    pub states: Signal,
}

/// Simulate the two-tank system under the given pump input with dense RK4
/// substeps and hard level saturation. Output is the lower-tank level.
pub fn cts_oracle(u: &Signal, params: &TankParams, x0: [f64; 2]) -> Result<CtsResponse, DataError> {
    if !params.all_finite() {
        return Err(DataError::InvalidArg("non-finite tank parameters".into()));
    }
    let substeps = params.substeps.max(20);
    let ts = u.sample_time();
    let h = ts / substeps as f64;
    let clamp = |x: f64| x.clamp(0.0, params.level_max);
    let deriv = |x: [f64; 2], pump: f64| -> [f64; 2] {
        let s1 = x[0].max(0.0).sqrt();
        let s2 = x[1].max(0.0).sqrt();
        [
            -params.k1 * s1 + params.k4 * pump,
            params.k2 * s1 - params.k3 * s2,
        ]
    };
    let mut x = [clamp(x0[0]), clamp(x0[1])];
    let mut y = Vec::with_capacity(u.len());
    let mut states = Vec::with_capacity(u.len() * 2);
    for k in 0..u.len() {
        states.extend_from_slice(&x);
        y.push(x[1]);
        let pump = u.get(k, 0);
        for _ in 0..substeps {
            let k1 = deriv(x, pump);
            let xa = [x[0] + 0.5 * h * k1[0], x[1] + 0.5 * h * k1[1]];
            let k2 = deriv(xa, pump);
            let xb = [x[0] + 0.5 * h * k2[0], x[1] + 0.5 * h * k2[1]];
            let k3 = deriv(xb, pump);
            let xc = [x[0] + h * k3[0], x[1] + h * k3[1]];
            let k4 = deriv(xc, pump);
            x = [
                clamp(x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])),
                clamp(x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])),
            ];
        }
    }
    Ok(CtsResponse {
        y: Signal::from_channel(y, ts, "y"),
        states: Signal::new(
            states,
            2,
            ts,
            vec!["x1".to_string(), "x2".to_string()],
        )?,
    })
}

/// Random-phase multisine: `offset + amp * sum_m cos(2 pi m k / K + phi_m) / sqrt(M)`
/// over bins `1..=excited_bins`, band-limited by construction.
pub fn multisine(
    len: usize,
    sample_time: f64,
    excited_bins: usize,
    amplitude: f64,
    offset: f64,
    seed: u64,
) -> Signal {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let phases: Vec<f64> = (0..excited_bins)
        .map(|_| rand::Rng::random_range(&mut rng, 0.0..std::f64::consts::TAU))
        .collect();
    let norm = amplitude / (excited_bins.max(1) as f64).sqrt();
    let values = (0..len)
        .map(|k| {
            let mut acc = offset;
            for (m, phi) in phases.iter().enumerate() {
                let w = std::f64::consts::TAU * (m + 1) as f64 * k as f64 / len as f64;
                acc += norm * (w + phi).cos();
            }
            acc
        })
        .collect();
    Signal::from_channel(values, sample_time, "u")
}

/// Add white Gaussian output noise at the requested signal-to-noise ratio
/// (in dB, measured against the centered signal power per channel).
pub fn add_noise_snr(signal: &Signal, snr_db: f64, seed: u64) -> Result<Signal, DataError> {
    let scaler = zscore_fit(signal)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = signal.clone();
    let n = signal.channels();
    let factor = 10f64.powf(-snr_db / 20.0);
    let dists: Vec<Normal<f64>> = scaler
        .std
        .iter()
        .map(|s| Normal::new(0.0, s * factor).expect("positive std"))
        .collect();
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        *v += dists[i % n].sample(&mut rng);
    }
    Ok(out)
}

/// Aligned input/output pair.
#[derive(Debug, Clone)]
pub struct SignalPair {
    pub u: Signal,
    pub y: Signal,
}

impl SignalPair {
    pub fn new(u: Signal, y: Signal) -> Result<Self, DataError> {
        if u.len() != y.len() {
            return Err(DataError::LengthMismatch(u.len(), y.len()));
        }
        Ok(SignalPair { u, y })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<SignalPair, DataError> {
        Ok(SignalPair {
            u: self.u.slice(start, end)?,
            y: self.y.slice(start, end)?,
        })
    }
}

/// How to carve train/validation/test out of the loaded data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitScheme {
    /// Benchmark protocol: separate estimation and test records; the first
    /// `val_len` samples of the test record serve as the validation set.
    /// The validation data therefore overlaps the test data by design; any
    /// pipeline using this scheme must surface that fact.
    Benchmark { val_len: usize },
    /// Contiguous fractional splits of a single record.
    Fractions { train: f64, val: f64, test: f64 },
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: SignalPair,
    pub val: SignalPair,
    pub test: SignalPair,
    /// True when validation data is a prefix of the test record.
    pub validation_overlaps_test: bool,
}

/// Fractional contiguous splits of one record. Fractions must not overlap.
pub fn split_fractions(
    pair: &SignalPair,
    train: f64,
    val: f64,
    test: f64,
) -> Result<Splits, DataError> {
    if train <= 0.0 || val <= 0.0 || test <= 0.0 || train + val + test > 1.0 + 1e-12 {
        return Err(DataError::OverlappingSplits([train, val, test]));
    }
    let k = pair.len();
    let n_train = (train * k as f64).round() as usize;
    let n_val = (val * k as f64).round() as usize;
    let n_test = (test * k as f64).round() as usize;
    if n_train + n_val + n_test > k {
        return Err(DataError::SplitTooLong {
            want: n_train + n_val + n_test,
            have: k,
        });
    }
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(DataError::TooShort { need: 3, got: k });
    }
    Ok(Splits {
        train: pair.slice(0, n_train)?,
        val: pair.slice(n_train, n_train + n_val)?,
        test: pair.slice(n_train + n_val, n_train + n_val + n_test)?,
        validation_overlaps_test: false,
    })
}

/// Benchmark split: full train record, validation from the test prefix.
pub fn split_benchmark(
    train: &SignalPair,
    test: &SignalPair,
    val_len: usize,
) -> Result<Splits, DataError> {
    if val_len == 0 || val_len > test.len() {
        return Err(DataError::SplitTooLong {
            want: val_len,
            have: test.len(),
        });
    }
    Ok(Splits {
        train: train.clone(),
        val: test.slice(0, val_len)?,
        test: test.clone(),
        validation_overlaps_test: true,
    })
}

/// Z-scored training data plus evaluation splits in both scaled and
/// original units. Scaler statistics come from the training split only.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: SignalPair,
    pub val: EvalSplit,
    pub test: EvalSplit,
    pub scalers: Scalers,
    pub validation_overlaps_test: bool,
}

#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub u: Signal,
    pub y_scaled: Signal,
    pub y_raw: Signal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub u: Scaler,
    pub y: Scaler,
}

pub fn prepare(splits: &Splits) -> Result<PreparedData, DataError> {
    let u_scaler = zscore_fit(&splits.train.u)?;
    let y_scaler = zscore_fit(&splits.train.y)?;
    let scale_pair = |pair: &SignalPair| -> EvalSplit {
        EvalSplit {
            u: zscore_apply(&u_scaler, &pair.u),
            y_scaled: zscore_apply(&y_scaler, &pair.y),
            y_raw: pair.y.clone(),
        }
    };
    Ok(PreparedData {
        train: SignalPair {
            u: zscore_apply(&u_scaler, &splits.train.u),
            y: zscore_apply(&y_scaler, &splits.train.y),
        },
        val: scale_pair(&splits.val),
        test: scale_pair(&splits.test),
        scalers: Scalers {
            u: u_scaler,
            y: y_scaler,
        },
        validation_overlaps_test: splits.validation_overlaps_test,
    })
}
