//! Accuracy metrics, split evaluation and table export.

pub mod contour;
pub mod metrics;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use contour::{export_contour_data, gaussian_blur, ContourGrid, ContourOptions, ThinPlateSpline};
pub use metrics::{average_ranks, compute_metrics, pearson, spearman, Metrics};

use crate::error::{Error, Result};
use crate::ingest::RunRecord;
use crate::predictor::LossPredictor;

/// Final-loss predictions against recorded final losses.
pub fn evaluate_split(predictor: &dyn LossPredictor, split: &[RunRecord]) -> Result<Metrics> {
    if split.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    let configs: Vec<_> = split.iter().map(|r| r.config.clone()).collect();
    let pred = predictor.predict_losses(&configs).into_iter().collect::<Result<Vec<_>>>()?;
    let truth: Vec<f64> = split.par_iter().map(|r| r.final_loss).collect();
    compute_metrics(&pred, &truth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub split: String,
    pub method: String,
    pub metrics: Metrics,
}

/// Tab-separated table, one row per (dataset, split, method), in insertion order.
pub fn report_tsv(rows: &[ReportRow]) -> String {
    let mut s = String::from("dataset\tsplit\tmethod\tn\tmae\trmse\tspearman\n");
    for r in rows {
        let rho = r.metrics.spearman_rho.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
            r.dataset, r.split, r.method, r.metrics.n, r.metrics.mae, r.metrics.rmse, rho
        );
    }
    s
}
