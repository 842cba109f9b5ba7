//! Two-stage residual training and the resulting predictor.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{AdamWHyper, AdamWState};
use super::network::{Architecture, BlockGroup, Inputs, Model};
use super::schedule::{lr_at, WarmupSpec};
use crate::encode::{canonicalize, FeatureVector};
use crate::error::{Error, Result};
use crate::ingest::{DatasetSplits, RunRecord};
use crate::lawfit::{baseline_for, ChinchillaFit, Scope};
use crate::scalar::Scalar;
use crate::schema::RunConfig;

/// What the residual target is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Final loss of each run.
    FinalLoss,
    /// Intermediate curve points, with the completed fraction as an extra input.
    CurvePoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup: WarmupSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    /// Encoders and head only.
    pub stage1: StagePlan,
    /// All parameters.
    pub stage2: StagePlan,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Capped at the training-set size.
    pub batch_size: usize,
    pub seed: u64,
    pub reset_optimizer_state: bool,
    /// Curve points sampled per run in curve mode, evenly spaced and including the last.
    pub curve_points: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            stage1: StagePlan {
                epochs: 20,
                peak_lr: 5e-5,
                warmup: WarmupSpec::Ratio { ratio: 0.1 },
            },
            stage2: StagePlan {
                epochs: 200,
                peak_lr: 1e-5,
                warmup: WarmupSpec::Steps {
                    steps: 1000,
                    cap_ratio: 0.1,
                },
            },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 480,
            seed: 0,
            reset_optimizer_state: true,
            curve_points: 30,
        }
    }
}

impl TrainPlan {
    /// Short schedule with larger learning rates, for small from-scratch models.
    pub fn compact() -> Self {
        TrainPlan {
            stage1: StagePlan {
                epochs: 10,
                peak_lr: 1e-3,
                warmup: WarmupSpec::Ratio { ratio: 0.1 },
            },
            stage2: StagePlan {
                epochs: 120,
                peak_lr: 1e-3,
                warmup: WarmupSpec::Steps {
                    steps: 200,
                    cap_ratio: 0.1,
                },
            },
            batch_size: 64,
            ..TrainPlan::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in [&self.stage1, &self.stage2].into_iter().enumerate() {
            if !(s.peak_lr > 0.0 && s.peak_lr.is_finite()) {
                return Err(Error::Argument(format!("stage {}: learning rate must be positive", i + 1)));
            }
            let bad = match s.warmup {
                WarmupSpec::Ratio { ratio } => !(0.0..=1.0).contains(&ratio),
                WarmupSpec::Steps { cap_ratio, .. } => !(0.0..=1.0).contains(&cap_ratio),
            };
            if bad {
                return Err(Error::Argument(format!("stage {}: warmup must lie within the stage", i + 1)));
            }
        }
        if self.stage1.epochs + self.stage2.epochs == 0 {
            return Err(Error::Argument("at least one training epoch is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: u8,
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub parameter_count: usize,
    pub train_examples: usize,
    pub epochs: Vec<EpochMetrics>,
    /// Full-pass training MSE at the end of each stage that ran.
    pub stage1_train_mse: Option<f64>,
    pub stage2_train_mse: Option<f64>,
    pub aborted: Option<String>,
}

/// Evenly spaced indices into a curve of length `len`, always including the last point.
pub fn curve_sample_indices(len: usize, k: usize) -> Vec<usize> {
    if len == 0 || k == 0 {
        return Vec::new();
    }
    if len <= k {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..k)
        .map(|j| if k == 1 { len - 1 } else { (j as f64 * (len - 1) as f64 / (k - 1) as f64).round() as usize })
        .collect();
    idx.dedup();
    idx
}

/// Feature vectors and residual targets for `runs`.
pub fn build_examples(
    runs: &[RunRecord],
    baselines: &BTreeMap<Scope, ChinchillaFit>,
    kind: TargetKind,
    curve_points: usize,
) -> Result<(Vec<FeatureVector>, Vec<f64>)> {
    let mut fvs = Vec::new();
    let mut ys = Vec::new();
    for r in runs {
        let c = &r.config;
        let base = baseline_for(baselines, c)?.predict(c.model_size, c.data_size)?;
        let fv = canonicalize(c)?;
        match kind {
            TargetKind::FinalLoss => {
                fvs.push(fv);
                ys.push(r.final_loss - base);
            }
            TargetKind::CurvePoint => {
                for i in curve_sample_indices(r.curve.len(), curve_points) {
                    let (step, loss) = r.curve[i];
                    if step == 0 {
                        continue;
                    }
                    let frac = (step as f64 / c.total_steps as f64).min(1.0);
                    fvs.push(fv.clone().with_frac(frac)?);
                    ys.push(loss - base);
                }
            }
        }
    }
    Ok((fvs, ys))
}

/// Runs the two training stages and keeps the last finite parameters on divergence.
pub struct Trainer<T: Scalar> {
    model: Model<T>,
    last_finite: Model<T>,
    plan: TrainPlan,
    baselines: BTreeMap<Scope, ChinchillaFit>,
    kind: TargetKind,
    train: (Inputs<T>, Vec<T>),
    val: Option<(Inputs<T>, Vec<T>)>,
    report: TrainingReport,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        splits: &DatasetSplits,
        plan: &TrainPlan,
        arch: &Architecture,
        baselines: &BTreeMap<Scope, ChinchillaFit>,
        kind: TargetKind,
    ) -> Result<Self> {
        plan.validate()?;
        if splits.train.is_empty() {
            return Err(Error::Argument("training split is empty".into()));
        }
        let arch = arch.clone().with_frac(kind == TargetKind::CurvePoint);
        let model = Model::new(&arch, plan.seed);
        let (fvs, ys) = build_examples(&splits.train, baselines, kind, plan.curve_points)?;
        if fvs.is_empty() {
            return Err(Error::Argument("no training examples".into()));
        }
        let train = (model.encode(&fvs)?, ys.into_iter().map(T::of).collect());
        let val = if splits.id_val.is_empty() {
            None
        } else {
            let (fvs, ys) = build_examples(&splits.id_val, baselines, kind, plan.curve_points)?;
            Some((model.encode(&fvs)?, ys.into_iter().map(T::of).collect()))
        };
        let report = TrainingReport {
            parameter_count: model.parameter_count(),
            train_examples: fvs.len(),
            ..Default::default()
        };
        Ok(Trainer {
            last_finite: model.clone(),
            model,
            plan: plan.clone(),
            baselines: baselines.clone(),
            kind,
            train,
            val,
            report,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn report(&self) -> &TrainingReport {
        &self.report
    }

    /// Mean squared residual error over the whole training set.
    pub fn train_mse(&self) -> f64 {
        let pred = self.model.predict_all(&self.train.0);
        let n = pred.len() as f64;
        pred.iter().zip(&self.train.1).map(|(p, t)| (*p - *t).f64().powi(2)).sum::<f64>() / n
    }

    fn val_mae(&self) -> Option<f64> {
        let (inputs, ys) = self.val.as_ref()?;
        let pred = self.model.predict_all(inputs);
        Some(pred.iter().zip(ys).map(|(p, t)| (*p - *t).f64().abs()).sum::<f64>() / pred.len() as f64)
    }

    fn abort(&mut self, msg: String) -> Error {
        self.model = self.last_finite.clone();
        self.report.aborted = Some(msg.clone());
        Error::Training(msg)
    }

    fn run_stage(&mut self, stage: u8, state: &mut Option<AdamWState<T>>) -> Result<()> {
        let sp = if stage == 1 { self.plan.stage1.clone() } else { self.plan.stage2.clone() };
        if sp.epochs == 0 {
            return Ok(());
        }
        let n = self.train.1.len();
        let batch = self.plan.batch_size.min(n);
        let per_epoch = n.div_ceil(batch) as u64;
        let total = per_epoch * sp.epochs as u64;
        let warmup = sp.warmup.resolve(total);
        let trainable: Vec<bool> = self
            .model
            .blocks
            .iter()
            .map(|b| stage == 2 || matches!(b.group, BlockGroup::Encoder | BlockGroup::Head))
            .collect();
        if state.is_none() || self.plan.reset_optimizer_state {
            *state = Some(AdamWState::new(self.model.blocks.iter().map(|b| b.value.dim())));
        }
        let state = state.as_mut().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stage as u64)));
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0u64;
        for epoch in 0..sp.epochs {
            order.shuffle(&mut rng);
            let mut sse = 0.0;
            for rows in order.chunks(batch) {
                let targets: Vec<T> = rows.iter().map(|&r| self.train.1[r]).collect();
                let (loss, grads) = self.model.loss_and_grads(&self.train.0, rows, &targets);
                if !loss.is_finite() {
                    return Err(self.abort(format!("non-finite loss at stage {stage} epoch {epoch}")));
                }
                if let Some(b) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
                    let name = self.model.blocks[b].name.clone();
                    return Err(self.abort(format!("non-finite gradient in block `{name}` at stage {stage} epoch {epoch}")));
                }
                let h = AdamWHyper {
                    lr: lr_at(step, total, warmup, sp.peak_lr),
                    beta1: self.plan.beta1,
                    beta2: self.plan.beta2,
                    eps: self.plan.eps,
                    weight_decay: self.plan.weight_decay,
                };
                state.step(self.model.blocks.iter_mut().map(|b| &mut b.value), &grads, &trainable, &h);
                if let Some(b) = self.model.blocks.iter().position(|b| b.value.iter().any(|v| !v.is_finite())) {
                    let name = self.model.blocks[b].name.clone();
                    return Err(self.abort(format!("non-finite weights in block `{name}` at stage {stage} epoch {epoch}")));
                }
                sse += loss.f64() * rows.len() as f64;
                step += 1;
            }
            let val_mae = self.val_mae();
            self.report.epochs.push(EpochMetrics {
                stage,
                epoch,
                train_mse: sse / n as f64,
                val_mae,
            });
            self.last_finite = self.model.clone();
        }
        let mse = Some(self.train_mse());
        if stage == 1 {
            self.report.stage1_train_mse = mse;
        } else {
            self.report.stage2_train_mse = mse;
        }
        Ok(())
    }

    /// Runs stage 1 then stage 2. On a non-finite loss, gradient or weight, training
    /// stops and the model reverts to the last completed epoch.
    pub fn run(&mut self) -> Result<()> {
        let mut state = None;
        self.run_stage(1, &mut state)?;
        self.run_stage(2, &mut state)
    }

    pub fn into_predictor(self) -> TrainedPredictor<T> {
        TrainedPredictor {
            model: self.model,
            baselines: self.baselines,
            target_kind: self.kind,
            report: self.report,
        }
    }
}

/// Trains a regressor on residuals of `baselines`, which must be fitted on `splits.train` only.
pub fn train<T: Scalar>(
    splits: &DatasetSplits,
    plan: &TrainPlan,
    arch: &Architecture,
    baselines: &BTreeMap<Scope, ChinchillaFit>,
    kind: TargetKind,
) -> Result<TrainedPredictor<T>> {
    let mut t = Trainer::new(splits, plan, arch, baselines, kind)?;
    t.run()?;
    Ok(t.into_predictor())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPredictor<T> {
    pub model: Model<T>,
    pub baselines: BTreeMap<Scope, ChinchillaFit>,
    pub target_kind: TargetKind,
    pub report: TrainingReport,
}

impl<T: Scalar> TrainedPredictor<T> {
    pub fn baseline(&self, c: &RunConfig) -> Result<f64> {
        baseline_for(&self.baselines, c)?.predict(c.model_size, c.data_size)
    }

    fn feature_vector(&self, c: &RunConfig, frac: f64) -> Result<FeatureVector> {
        let fv = canonicalize(c)?;
        if self.model.arch.with_frac {
            fv.with_frac(frac)
        } else {
            Ok(fv)
        }
    }

    /// Network output for `c`; a curve-mode model is queried at completion.
    pub fn predict_residual(&self, c: &RunConfig) -> Result<f64> {
        Ok(self.model.forward(&self.feature_vector(c, 1.0)?)?.f64())
    }

    pub fn predict_final_loss(&self, c: &RunConfig) -> Result<f64> {
        let base = self.baseline(c)?;
        Ok(base + self.predict_residual(c)?)
    }

    /// Final-loss predictions for many configs, batched.
    pub fn predict_many(&self, configs: &[RunConfig]) -> Result<Vec<f64>> {
        let bases = configs.iter().map(|c| self.baseline(c)).collect::<Result<Vec<_>>>()?;
        let fvs = configs.iter().map(|c| self.feature_vector(c, 1.0)).collect::<Result<Vec<_>>>()?;
        let r = self.model.predict_all(&self.model.encode(&fvs)?);
        Ok(bases.iter().zip(r).map(|(b, r)| b + r.f64()).collect())
    }

    /// `(step, loss)` at each completed fraction, `step = round(frac·total_steps)`.
    pub fn predict_curve(&self, c: &RunConfig, fracs: &[f64]) -> Result<Vec<(u64, f64)>> {
        if self.target_kind != TargetKind::CurvePoint {
            return Err(Error::Argument("curve prediction needs a curve-trained model".into()));
        }
        if let Some(f) = fracs.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Argument(format!("frac {f} outside (0, 1]")));
        }
        if fracs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Argument("fracs must be sorted".into()));
        }
        let base = self.baseline(c)?;
        let fv = canonicalize(c)?;
        let fvs = fracs.iter().map(|f| fv.clone().with_frac(*f)).collect::<Result<Vec<_>>>()?;
        let r = self.model.predict_all(&self.model.encode(&fvs)?);
        Ok(fracs
            .iter()
            .zip(r)
            .map(|(f, r)| ((f * c.total_steps as f64).round() as u64, base + r.f64()))
            .collect())
    }
}
