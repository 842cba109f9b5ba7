//! A common interface over everything that maps a configuration to a final loss.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::Result;
use crate::lawfit::{baseline_for, ChinchillaFit, Scope};
use crate::regressor::TrainedPredictor;
use crate::scalar::Scalar;
use crate::schema::RunConfig;

pub trait LossPredictor: Sync {
    fn predict_loss(&self, c: &RunConfig) -> Result<f64>;

    /// Per-config results, evaluated in parallel.
    fn predict_losses(&self, configs: &[RunConfig]) -> Vec<Result<f64>> {
        configs.par_iter().map(|c| self.predict_loss(c)).collect()
    }
}

impl<T: Scalar> LossPredictor for TrainedPredictor<T> {
    fn predict_loss(&self, c: &RunConfig) -> Result<f64> {
        self.predict_final_loss(c)
    }

    fn predict_losses(&self, configs: &[RunConfig]) -> Vec<Result<f64>> {
        // Batched when every config is valid; otherwise fall back to per-config errors.
        match self.predict_many(configs) {
            Ok(v) => v.into_iter().map(Ok).collect(),
            Err(_) => configs.par_iter().map(|c| self.predict_final_loss(c)).collect(),
        }
    }
}

/// Scaling-law baseline only: ignores every hyperparameter.
#[derive(Clone, Debug)]
pub struct BaselinePredictor {
    pub baselines: BTreeMap<Scope, ChinchillaFit>,
}

impl LossPredictor for BaselinePredictor {
    fn predict_loss(&self, c: &RunConfig) -> Result<f64> {
        baseline_for(&self.baselines, c)?.predict(c.model_size, c.data_size)
    }
}

/// Adapts a closure.
pub struct FnPredictor<F>(pub F);

impl<F: Fn(&RunConfig) -> Result<f64> + Sync> LossPredictor for FnPredictor<F> {
    fn predict_loss(&self, c: &RunConfig) -> Result<f64> {
        (self.0)(c)
    }
}
