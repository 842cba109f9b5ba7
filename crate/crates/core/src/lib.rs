//! Configuration-to-loss prediction for language-model training runs: run-log ingestion,
//! scaling-law baselines, a residual neural regressor, a boosted-tree baseline,
//! hyperparameter selection and evaluation.

// `!(a <= b)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encode;
pub mod error;
pub mod eval;
pub mod gbt;
pub mod ingest;
pub mod lawfit;
pub mod linalg;
pub mod optim;
pub mod predictor;
pub mod regressor;
pub mod scalar;
pub mod schema;
pub mod select;
pub mod synth;

pub use encode::{canonicalize, decanonicalize, FeatureVector, Slot};
pub use error::{Error, Result};
pub use eval::{compute_metrics, evaluate_split, Metrics};
pub use gbt::{GbtParams, GbtPredictor};
pub use ingest::{DatasetSplits, FilterParams, RunRecord, SplitParams};
pub use lawfit::{ChinchillaFit, ChinchillaFitOptions, Scope};
pub use predictor::{BaselinePredictor, FnPredictor, LossPredictor};
pub use regressor::{Architecture, TargetKind, TrainPlan};
pub use scalar::Scalar;
pub use schema::{RunConfig, Warmup};
pub use select::{recommend, sweep, GridAxis, Recommendation, SweepGrid};
pub use synth::{generate_synthetic_runs, OracleParams, SynthDesign};

pub type ChinchillaLaw = lawfit::ChinchillaLaw<f64>;
pub type PowerLaw = lawfit::PowerLaw<f64>;
pub type Regressor = regressor::Model<f64>;
pub type Predictor = regressor::TrainedPredictor<f64>;
