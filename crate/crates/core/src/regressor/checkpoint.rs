//! Versioned JSON checkpoints for trained regressors.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::network::{Architecture, Model};
use super::train::{TargetKind, TrainedPredictor, TrainingReport};
use crate::error::{Error, Result};
use crate::lawfit::ChinchillaFit;
use crate::scalar::Scalar;
use crate::schema::{schema_hash, SCHEMA_VERSION};

pub const CHECKPOINT_FORMAT: &str = "confscale.regressor";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    schema_version: u32,
    schema_hash: String,
    architecture: Architecture,
    target_kind: TargetKind,
    tensors: Vec<Tensor>,
    baselines: Vec<ChinchillaFit>,
    report: TrainingReport,
}

pub fn checkpoint_to_string<T: Scalar>(p: &TrainedPredictor<T>) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        schema_version: SCHEMA_VERSION,
        schema_hash: schema_hash(),
        architecture: p.model.arch.clone(),
        target_kind: p.target_kind,
        tensors: p
            .model
            .blocks
            .iter()
            .map(|b| Tensor {
                name: b.name.clone(),
                shape: [b.value.nrows(), b.value.ncols()],
                data: b.value.iter().map(|v| v.f64()).collect(),
            })
            .collect(),
        baselines: p.baselines.values().cloned().collect(),
        report: p.report.clone(),
    };
    serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))
}

pub fn checkpoint_from_str<T: Scalar>(text: &str) -> Result<TrainedPredictor<T>> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint {} v{}", file.format, file.version)));
    }
    if file.schema_hash != schema_hash() {
        return Err(Error::Schema {
            field: "*".into(),
            message: format!(
                "checkpoint schema hash {} (version {}) differs from current {}",
                file.schema_hash,
                file.schema_version,
                schema_hash()
            ),
        });
    }
    let blocks = file
        .tensors
        .into_iter()
        .map(|t| {
            let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.into_iter().map(T::of).collect())
                .map_err(|e| Error::Shape(format!("tensor `{}`: {e}", t.name)))?;
            Ok((t.name, arr))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model::from_blocks(&file.architecture, blocks)?;
    Ok(TrainedPredictor {
        model,
        baselines: file.baselines.into_iter().map(|f| (f.scope.clone(), f)).collect(),
        target_kind: file.target_kind,
        report: file.report,
    })
}

pub fn save_checkpoint<T: Scalar>(p: &TrainedPredictor<T>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(p)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainedPredictor<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
