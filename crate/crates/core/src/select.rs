//! Grid sweeps over a predictor and quadratic refinement of the (lr, batch) optimum.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lstsq;
use crate::predictor::LossPredictor;
use crate::schema::{RunConfig, Warmup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisScale {
    Linear,
    Log,
}

/// One swept field with its candidate values, given as text so categorical fields work too.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub field: String,
    pub values: Vec<String>,
    pub scale: AxisScale,
}

impl GridAxis {
    pub fn new(field: &str, values: &[f64], scale: AxisScale) -> Self {
        GridAxis {
            field: field.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
            scale,
        }
    }

    pub fn categorical(field: &str, values: &[&str]) -> Self {
        GridAxis {
            field: field.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
            scale: AxisScale::Linear,
        }
    }

    /// `n` values evenly spaced in log space from `lo` to `hi` inclusive.
    pub fn log_spaced(field: &str, lo: f64, hi: f64, n: usize) -> Self {
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    lo
                } else {
                    (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()
                }
            })
            .collect();
        GridAxis::new(field, &vals, AxisScale::Log)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub base: RunConfig,
    pub axes: Vec<GridAxis>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.axes {
            if a.values.is_empty() {
                return Err(Error::Sweep(format!("axis `{}` is empty", a.field)));
            }
            if !seen.insert(a.field.as_str()) {
                return Err(Error::Sweep(format!("axis `{}` appears twice", a.field)));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Axis value indices of grid point `index`, last axis varying fastest.
    pub fn coords(&self, mut index: usize) -> Vec<usize> {
        let mut c = vec![0; self.axes.len()];
        for (k, a) in self.axes.iter().enumerate().rev() {
            c[k] = index % a.values.len();
            index /= a.values.len();
        }
        c
    }

    /// The configuration at grid point `index`.
    pub fn config_at(&self, index: usize) -> Result<RunConfig> {
        let mut c = self.base.clone();
        for (a, k) in self.axes.iter().zip(self.coords(index)) {
            set_field(&mut c, &a.field, &a.values[k])?;
        }
        derive_config(&self.base, c)
    }

    /// Fixes `field = value` in the base config and drops any axis over that field.
    pub fn fix(&mut self, field: &str, value: &str) -> Result<()> {
        let mut c = self.base.clone();
        set_field(&mut c, field, value)?;
        self.base = derive_config(&self.base, c)?;
        self.axes.retain(|a| a.field != field);
        Ok(())
    }
}

fn parse_num(field: &str, value: &str) -> Result<f64> {
    value
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Argument(format!("{field}: `{value}` is not a number")))
}

/// Sets one field from text. `optimizer_extras.KEY` addresses an extras entry.
pub fn set_field(c: &mut RunConfig, field: &str, value: &str) -> Result<()> {
    let num = || parse_num(field, value);
    let int = || -> Result<u64> {
        let v = num()?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Argument(format!("{field}: `{value}` is not a non-negative integer")));
        }
        Ok(v as u64)
    };
    match field {
        "source" => c.source = value.to_string(),
        "optimizer" => c.optimizer = value.to_string(),
        "lr_schedule" => c.lr_schedule = Some(value.to_string()),
        "model_size" => c.model_size = num()?,
        "data_size" => c.data_size = num()?,
        "total_steps" => c.total_steps = int()?,
        "num_layers" => c.num_layers = Some(int()? as u32),
        "num_heads" => c.num_heads = Some(int()? as u32),
        "hidden_dim" => c.hidden_dim = Some(int()? as u32),
        "peak_lr" => c.peak_lr = num()?,
        "min_lr" => {
            c.min_lr = Some(num()?);
            c.min_lr_ratio = None;
        }
        "min_lr_ratio" => {
            c.min_lr_ratio = Some(num()?);
            c.min_lr = None;
        }
        "weight_decay" => c.weight_decay = Some(num()?),
        "batch_size" => c.batch_size = int()?,
        "warmup_steps" => c.warmup = Some(Warmup::Steps(num()?)),
        "warmup_ratio" => c.warmup = Some(Warmup::Ratio(num()?)),
        "max_grad_norm" => c.max_grad_norm = Some(num()?),
        "beta1" => c.beta1 = Some(num()?),
        "beta2" => c.beta2 = Some(num()?),
        "epsilon" => c.epsilon = Some(num()?),
        other => match other.strip_prefix("optimizer_extras.") {
            Some(key) if !key.is_empty() => {
                c.optimizer_extras.insert(key.to_string(), num()?);
            }
            _ => return Err(Error::Argument(format!("unknown sweep field `{other}`"))),
        },
    }
    Ok(())
}

/// Re-derives dependent fields after sweeping: the token budget `D` is held fixed, so
/// `total_steps` scales inversely with batch size (and with `D`), step-count warmup
/// scales with it, and a ratio-defined `min_lr` follows `peak_lr`.
pub fn derive_config(base: &RunConfig, mut c: RunConfig) -> Result<RunConfig> {
    let steps_changed_by_user = c.total_steps != base.total_steps;
    if !steps_changed_by_user && (c.batch_size != base.batch_size || c.data_size != base.data_size) {
        let scale = (base.batch_size as f64 / c.batch_size as f64) * (c.data_size / base.data_size);
        c.total_steps = ((base.total_steps as f64 * scale).round() as u64).max(1);
        if let (Some(Warmup::Steps(w)), Some(Warmup::Steps(w0))) = (c.warmup, base.warmup) {
            if w == w0 {
                c.warmup = Some(Warmup::Steps((w0 * c.total_steps as f64 / base.total_steps as f64).round()));
            }
        }
    }
    if let Some(r) = c.min_lr_ratio {
        c.min_lr = Some(r * c.peak_lr);
    }
    if let Some(m) = c.min_lr {
        if m > c.peak_lr {
            return Err(Error::Sweep(format!("min_lr {m} exceeds peak_lr {}", c.peak_lr)));
        }
    }
    if let Some(Warmup::Steps(w)) = c.warmup {
        if w > c.total_steps as f64 {
            return Err(Error::Sweep(format!("warmup {w} exceeds total_steps {}", c.total_steps)));
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub index: usize,
    pub coords: Vec<usize>,
    pub config: RunConfig,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Ascending by predicted loss, ties by grid index.
    pub surface: Vec<SurfacePoint>,
    pub skipped: Vec<(usize, String)>,
}

pub fn sweep(predictor: &dyn LossPredictor, grid: &SweepGrid) -> Result<SweepResult> {
    grid.validate()?;
    let n = grid.size();
    let mut skipped = Vec::new();
    let mut valid = Vec::new();
    for i in 0..n {
        match grid.config_at(i) {
            Ok(c) => valid.push((i, c)),
            Err(e) => skipped.push((i, e.to_string())),
        }
    }
    let configs: Vec<RunConfig> = valid.iter().map(|(_, c)| c.clone()).collect();
    let losses = predictor.predict_losses(&configs);
    let mut surface = Vec::with_capacity(valid.len());
    for ((i, c), l) in valid.into_iter().zip(losses) {
        match l {
            Ok(l) if l.is_finite() => surface.push(SurfacePoint {
                index: i,
                coords: grid.coords(i),
                config: c,
                loss: l,
            }),
            Ok(l) => skipped.push((i, format!("non-finite prediction {l}"))),
            Err(e) => skipped.push((i, e.to_string())),
        }
    }
    if surface.is_empty() {
        return Err(Error::Sweep(format!("all {n} grid points invalid")));
    }
    surface.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)));
    skipped.sort_by_key(|s| s.0);
    Ok(SweepResult { surface, skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub lr: f64,
    pub batch_size: f64,
    /// False when the best grid point was returned instead of a fitted minimizer.
    pub refined: bool,
    pub note: Option<String>,
}

/// Least-squares quadratic in `(ln lr, ln bs)` over points within `near_frac` of the
/// minimum; returns its vertex when the fitted Hessian is positive definite.
pub fn refine_optimum(surface: &[(f64, f64, f64)], near_frac: f64) -> Result<Refinement> {
    if surface.is_empty() {
        return Err(Error::Argument("empty surface".into()));
    }
    if surface.iter().any(|(lr, bs, l)| !(*lr > 0.0 && *bs > 0.0 && l.is_finite())) {
        return Err(Error::Argument("surface needs positive lr, batch and finite losses".into()));
    }
    let best = surface.iter().min_by(|a, b| a.2.total_cmp(&b.2)).unwrap();
    let fallback = |note: &str| Refinement {
        lr: best.0,
        batch_size: best.1,
        refined: false,
        note: Some(note.to_string()),
    };
    let cutoff = best.2 + near_frac * best.2.abs();
    let near: Vec<(f64, f64, f64)> = surface
        .iter()
        .filter(|p| p.2 <= cutoff)
        .map(|&(lr, bs, l)| (lr.ln(), bs.ln(), l))
        .collect();
    if near.len() < 6 {
        return Ok(fallback(&format!("{} near-optimal points, need 6", near.len())));
    }
    let cx = near.iter().map(|p| p.0).sum::<f64>() / near.len() as f64;
    let cy = near.iter().map(|p| p.1).sum::<f64>() / near.len() as f64;
    let a = Array2::from_shape_fn((near.len(), 6), |(i, j)| {
        let (x, y) = (near[i].0 - cx, near[i].1 - cy);
        [1.0, x, y, x * x, x * y, y * y][j]
    });
    let b = Array1::from_iter(near.iter().map(|p| p.2));
    let coef = match lstsq(&a, &b, 1e-10) {
        Ok(c) => c,
        Err(_) => return Ok(fallback("near-optimal points do not determine a quadratic")),
    };
    let (h11, h12, h22) = (2.0 * coef[3], coef[4], 2.0 * coef[5]);
    let det = h11 * h22 - h12 * h12;
    let scale = h11.abs().max(h22.abs()).max(h12.abs());
    if !(h11 > 0.0 && det > 1e-12 * scale * scale) || scale < 1e-12 * b.iter().fold(0.0f64, |m, v| m.max(v.abs())) {
        return Ok(fallback("fitted quadratic is not positive definite"));
    }
    let x = -(h22 * coef[1] - h12 * coef[2]) / det;
    let y = -(h11 * coef[2] - h12 * coef[1]) / det;
    Ok(Refinement {
        lr: (x + cx).exp(),
        batch_size: (y + cy).exp(),
        refined: true,
        note: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub best_grid_config: RunConfig,
    pub best_grid_loss: f64,
    pub refinement: Refinement,
    /// Refined config when it passed the safety check, else the best grid config.
    pub recommended_config: RunConfig,
    pub recommended_loss: f64,
    /// `(loss − best_grid_loss) / best_grid_loss` of the recommendation.
    pub relative_loss: f64,
    pub surface: Vec<SurfacePoint>,
    pub skipped: Vec<(usize, String)>,
}

pub const NEAR_OPTIMAL_FRAC: f64 = 0.01;

/// Sweeps `grid` at `(n, d)` with `constraints` fixed, then refines lr and batch size.
pub fn recommend(
    predictor: &dyn LossPredictor,
    n: f64,
    d: f64,
    grid: &SweepGrid,
    constraints: &[(String, String)],
) -> Result<Recommendation> {
    let mut target = grid.base.clone();
    target.model_size = n;
    target.data_size = d;
    let mut g = SweepGrid {
        base: derive_config(&grid.base, target)?,
        axes: grid.axes.clone(),
    };
    for (f, v) in constraints {
        g.fix(f, v)?;
    }
    let result = sweep(predictor, &g)?;
    let best = result.surface[0].clone();

    let lr_axis = g.axes.iter().position(|a| a.field == "peak_lr");
    let bs_axis = g.axes.iter().position(|a| a.field == "batch_size");
    let refinement = match (lr_axis, bs_axis) {
        (Some(la), Some(ba)) => {
            // Refine only across lr and batch; other axes stay at the best grid values.
            let slice: Vec<(f64, f64, f64)> = result
                .surface
                .iter()
                .filter(|p| p.coords.iter().enumerate().all(|(k, &c)| k == la || k == ba || c == best.coords[k]))
                .map(|p| (p.config.peak_lr, p.config.batch_size as f64, p.loss))
                .collect();
            refine_optimum(&slice, NEAR_OPTIMAL_FRAC)?
        }
        _ => Refinement {
            lr: best.config.peak_lr,
            batch_size: best.config.batch_size as f64,
            refined: false,
            note: Some("lr and batch size are not both swept".into()),
        },
    };

    let mut recommended_config = best.config.clone();
    let mut recommended_loss = best.loss;
    let mut refinement = refinement;
    if refinement.refined {
        let mut c = best.config.clone();
        c.peak_lr = refinement.lr;
        c.batch_size = (refinement.batch_size.round() as u64).max(1);
        let candidate = derive_config(&g.base, c).and_then(|c| predictor.predict_loss(&c).map(|l| (c, l)));
        match candidate {
            Ok((c, l)) if l.is_finite() && l <= best.loss * (1.0 + NEAR_OPTIMAL_FRAC) => {
                recommended_config = c;
                recommended_loss = l;
            }
            Ok((_, l)) => refinement.note = Some(format!("refined point predicted {l}, kept grid optimum")),
            Err(e) => refinement.note = Some(format!("refined point invalid ({e}), kept grid optimum")),
        }
    }
    Ok(Recommendation {
        best_grid_config: best.config.clone(),
        best_grid_loss: best.loss,
        refinement,
        relative_loss: (recommended_loss - best.loss) / best.loss,
        recommended_config,
        recommended_loss,
        surface: result.surface,
        skipped: result.skipped,
    })
}
