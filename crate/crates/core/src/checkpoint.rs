//! Self-describing structured-text (JSON) persistence for trained models
//! and fitted linear models. Values round-trip losslessly at 64-bit
//! precision.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bla::LinearSS;
use crate::data::Scalers;
use crate::nn::{ModelDims, ModelParams, NnError, RolloutSettings, TauMeta};

pub const MODEL_FORMAT: &str = "sdnid-checkpoint";
pub const LINEAR_FORMAT: &str = "sdnid-linear-ss";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unexpected document format {got:?}, expected {expect:?}")]
    Format { expect: &'static str, got: String },
    #[error("checkpoint entry {name:?} has shape {got:?}, expected {expect:?}")]
    Shape {
        name: String,
        expect: (usize, usize),
        got: (usize, usize),
    },
    #[error("checkpoint contains non-finite values in {0:?}")]
    NonFinite(String),
    #[error("checkpoint is missing entry {0:?}")]
    Missing(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    format: String,
    version: u32,
    pub dims: ModelDims,
    pub tau: TauMeta,
    pub output_feedthrough: bool,
    pub rollout: RolloutSettings,
    params: Vec<TensorEntry>,
    pub config_hash: String,
    pub seed: u64,
    pub scalers: Option<Scalers>,
}

/// Serialize a model plus the provenance needed to reproduce and reuse it.
pub fn model_to_json(
    params: &ModelParams,
    config_hash: &str,
    seed: u64,
    scalers: Option<&Scalers>,
) -> Result<String, CheckpointError> {
    if !params.all_finite() {
        return Err(CheckpointError::NonFinite("model parameters".into()));
    }
    let entries = params
        .layout()
        .specs()
        .iter()
        .map(|spec| TensorEntry {
            name: spec.name.to_string(),
            rows: spec.rows,
            cols: spec.cols,
            values: params.values()[spec.offset..spec.offset + spec.len()].to_vec(),
        })
        .collect();
    let doc = ModelCheckpoint {
        format: MODEL_FORMAT.to_string(),
        version: 1,
        dims: params.dims,
        tau: params.tau,
        output_feedthrough: params.output_feedthrough,
        rollout: params.rollout,
        params: entries,
        config_hash: config_hash.to_string(),
        seed,
        scalers: scalers.cloned(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn save_model(
    path: &Path,
    params: &ModelParams,
    config_hash: &str,
    seed: u64,
    scalers: Option<&Scalers>,
) -> Result<(), CheckpointError> {
    std::fs::write(path, model_to_json(params, config_hash, seed, scalers)?)?;
    Ok(())
}

pub fn model_from_json(text: &str) -> Result<(ModelParams, ModelCheckpoint), CheckpointError> {
    let doc: ModelCheckpoint = serde_json::from_str(text)?;
    if doc.format != MODEL_FORMAT {
        return Err(CheckpointError::Format {
            expect: MODEL_FORMAT,
            got: doc.format.clone(),
        });
    }
    let mut params = ModelParams::init(doc.dims, doc.tau, doc.output_feedthrough, 1.0, 0);
    params.rollout = doc.rollout;
    let layout = params.layout().clone();
    for spec in layout.specs() {
        let entry = doc
            .params
            .iter()
            .find(|e| e.name == spec.name)
            .ok_or_else(|| CheckpointError::Missing(spec.name.to_string()))?;
        if entry.rows != spec.rows || entry.cols != spec.cols {
            return Err(CheckpointError::Shape {
                name: entry.name.clone(),
                expect: (spec.rows, spec.cols),
                got: (entry.rows, entry.cols),
            });
        }
        if entry.values.iter().any(|v| !v.is_finite()) || entry.values.len() != spec.len() {
            return Err(CheckpointError::NonFinite(entry.name.clone()));
        }
        params.values_mut()[spec.offset..spec.offset + spec.len()].copy_from_slice(&entry.values);
    }
    Ok((params, doc))
}

pub fn load_model(path: &Path) -> Result<(ModelParams, ModelCheckpoint), CheckpointError> {
    model_from_json(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinearDoc {
    format: String,
    version: u32,
    order: usize,
    sample_time: f64,
    hurwitz: bool,
    tustin_fallback: bool,
    matrices: Vec<TensorEntry>,
}

pub fn linear_ss_to_json(model: &LinearSS) -> Result<String, CheckpointError> {
    let entry = |name: &str, m: &DMatrix<f64>| TensorEntry {
        name: name.to_string(),
        rows: m.nrows(),
        cols: m.ncols(),
        // nalgebra stores column-major; emit row-major like everything else.
        values: (0..m.nrows())
            .flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)]))
            .collect(),
    };
    let doc = LinearDoc {
        format: LINEAR_FORMAT.to_string(),
        version: 1,
        order: model.order,
        sample_time: model.sample_time,
        hurwitz: model.hurwitz,
        tustin_fallback: model.tustin_fallback,
        matrices: vec![
            entry("a", &model.a),
            entry("b", &model.b),
            entry("c", &model.c),
            entry("d", &model.d),
        ],
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn save_linear_ss(path: &Path, model: &LinearSS) -> Result<(), CheckpointError> {
    std::fs::write(path, linear_ss_to_json(model)?)?;
    Ok(())
}

pub fn linear_ss_from_json(text: &str) -> Result<LinearSS, CheckpointError> {
    let doc: LinearDoc = serde_json::from_str(text)?;
    if doc.format != LINEAR_FORMAT {
        return Err(CheckpointError::Format {
            expect: LINEAR_FORMAT,
            got: doc.format.clone(),
        });
    }
    let get = |name: &str| -> Result<DMatrix<f64>, CheckpointError> {
        let entry = doc
            .matrices
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if entry.values.len() != entry.rows * entry.cols {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expect: (entry.rows, entry.cols),
                got: (entry.values.len(), 1),
            });
        }
        Ok(DMatrix::from_row_slice(entry.rows, entry.cols, &entry.values))
    };
    Ok(LinearSS {
        a: get("a")?,
        b: get("b")?,
        c: get("c")?,
        d: get("d")?,
        order: doc.order,
        sample_time: doc.sample_time,
        hurwitz: doc.hurwitz,
        tustin_fallback: doc.tustin_fallback,
    })
}

pub fn load_linear_ss(path: &Path) -> Result<LinearSS, CheckpointError> {
    linear_ss_from_json(&std::fs::read_to_string(path)?)
}
