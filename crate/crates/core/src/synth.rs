//! Synthetic run logs drawn from a known loss function, so downstream fits and
//! predictions have an exact answer to compare against.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RunRecord;
use crate::lawfit::{ChinchillaLaw, PowerLaw};
use crate::predictor::LossPredictor;
use crate::schema::{RunConfig, Warmup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEffect {
    pub name: String,
    pub offset: f64,
    pub wd_center: f64,
    pub wd_curvature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveShape {
    /// Loss above the final value as training starts.
    pub initial_gap: f64,
    pub decay_exponent: f64,
    /// Height of the transient bump during warmup.
    pub bump_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub chinchilla: ChinchillaLaw<f64>,
    pub lr_law: PowerLaw<f64>,
    /// Symmetric positive-definite curvature over `(ln lr − ln lr*, ln bs − ln bs*)`.
    pub curvature: [[f64; 2]; 2],
    pub optimizers: Vec<OptimizerEffect>,
    pub noise_sigma: f64,
    pub curve: CurveShape,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            chinchilla: ChinchillaLaw {
                e: 1.9,
                a: 4.0,
                b: 1.6,
                alpha: 0.34,
                beta: 0.28,
            },
            lr_law: PowerLaw {
                c: 3e-3,
                alpha_lr: -0.25,
                beta_lr: 0.1,
                d: 60.0,
                gamma_bs: 0.5,
            },
            curvature: [[0.025, 0.004], [0.004, 0.012]],
            optimizers: vec![
                OptimizerEffect {
                    name: "adamw".into(),
                    offset: 0.0,
                    wd_center: 0.1,
                    wd_curvature: 0.1,
                },
                OptimizerEffect {
                    name: "lion".into(),
                    offset: 0.0,
                    wd_center: 0.6,
                    wd_curvature: 0.1,
                },
            ],
            noise_sigma: 0.005,
            curve: CurveShape {
                initial_gap: 2.5,
                decay_exponent: 3.0,
                bump_amplitude: 0.05,
            },
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        let [[a, b], [c, d]] = self.curvature;
        if b != c || a <= 0.0 || a * d - b * c <= 0.0 {
            return Err(Error::Argument("oracle curvature must be symmetric positive definite".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Argument("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self, name: &str) -> Option<&OptimizerEffect> {
        self.optimizers.iter().find(|o| o.name == name)
    }

    /// `(lr*, bs*)` at `(n, d)`.
    pub fn optimum(&self, n: f64, d: f64) -> (f64, f64) {
        (self.lr_law.optimal_lr(n, d), self.lr_law.optimal_batch(d))
    }

    /// Noise-free final loss.
    pub fn loss(&self, c: &RunConfig) -> f64 {
        let (n, d) = (c.model_size, c.data_size);
        let law = &self.chinchilla;
        let base = law.e + law.a * n.powf(-law.alpha) + law.b * d.powf(-law.beta);
        let (lr_opt, bs_opt) = self.optimum(n, d);
        let dx = (c.peak_lr / lr_opt).ln();
        let dy = (c.batch_size as f64 / bs_opt).ln();
        let k = &self.curvature;
        let quad = k[0][0] * dx * dx + (k[0][1] + k[1][0]) * dx * dy + k[1][1] * dy * dy;
        let opt = self.optimizer(&c.optimizer).map_or(0.0, |o| {
            let wd = c.weight_decay.unwrap_or(0.0);
            o.offset + o.wd_curvature * (wd - o.wd_center).powi(2)
        });
        base + quad + opt
    }

    /// Loss at completed fraction `frac` for a run ending at `final_loss`.
    pub fn curve_value(&self, final_loss: f64, frac: f64, warmup_frac: f64) -> f64 {
        let s = &self.curve;
        let mut l = final_loss + s.initial_gap * (1.0 - frac).max(0.0).powf(s.decay_exponent);
        if warmup_frac > 0.0 && frac < warmup_frac {
            l += s.bump_amplitude * (std::f64::consts::PI * frac / warmup_frac).sin();
        }
        l
    }

    /// Weight decays where the two optimizers' penalties are equal, ascending.
    pub fn wd_crossings(&self, a: &str, b: &str) -> Vec<f64> {
        let (Some(a), Some(b)) = (self.optimizer(a), self.optimizer(b)) else {
            return Vec::new();
        };
        // (ka − kb)w² − 2(ka·ca − kb·cb)w + (ka·ca² − kb·cb² + oa − ob) = 0
        let qa = a.wd_curvature - b.wd_curvature;
        let qb = -2.0 * (a.wd_curvature * a.wd_center - b.wd_curvature * b.wd_center);
        let qc = a.wd_curvature * a.wd_center.powi(2) - b.wd_curvature * b.wd_center.powi(2) + a.offset - b.offset;
        if qa.abs() < 1e-15 {
            return if qb == 0.0 { Vec::new() } else { vec![-qc / qb] };
        }
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return Vec::new();
        }
        let mut r = vec![(-qb - disc.sqrt()) / (2.0 * qa), (-qb + disc.sqrt()) / (2.0 * qa)];
        r.sort_by(f64::total_cmp);
        r
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<OracleParams> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("oracle params: {e}")))
    }
}

pub fn oracle_loss(p: &OracleParams, c: &RunConfig) -> f64 {
    p.loss(c)
}

impl LossPredictor for OracleParams {
    fn predict_loss(&self, c: &RunConfig) -> Result<f64> {
        Ok(self.loss(c))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDesign {
    pub source: String,
    /// `(N in millions, D in billions)` pairs.
    pub sizes: Vec<(f64, f64)>,
    pub runs_per_pair: usize,
    pub optimizers: Vec<String>,
    pub lr_grid: Vec<f64>,
    pub batch_grid: Vec<u64>,
    pub wd_grid: Vec<f64>,
    pub seq_len: u64,
    pub warmup_ratio: f64,
    pub curve_points: usize,
}

impl SynthDesign {
    /// About 3000 runs: five in-distribution model sizes up to 430M and two larger ones.
    pub fn standard() -> Self {
        let mut sizes = Vec::new();
        for n in [130.0, 180.0, 268.0, 340.0, 430.0] {
            for d in [5.0, 10.0, 20.0, 40.0] {
                sizes.push((n, d));
            }
        }
        for (n, d) in [(520.0, 10.0), (520.0, 40.0), (1073.0, 20.0), (1073.0, 40.0)] {
            sizes.push((n, d));
        }
        SynthDesign {
            source: "synthetic".into(),
            sizes,
            runs_per_pair: 125,
            optimizers: vec!["adamw".into(), "lion".into()],
            lr_grid: (0..6).map(|k| 1.5e-4 * 2f64.powi(k)).collect(),
            batch_grid: vec![64, 128, 256, 512, 1024],
            wd_grid: vec![0.0, 0.1, 0.2, 0.4, 0.6, 0.9],
            seq_len: 2048,
            warmup_ratio: 0.01,
            curve_points: 100,
        }
    }

    pub fn n_combinations(&self) -> usize {
        self.optimizers.len() * self.lr_grid.len() * self.batch_grid.len() * self.wd_grid.len()
    }
}

/// Depth and width consistent with a parameter count of `n` million.
pub fn architecture_for(n: f64) -> (u32, u32, u32) {
    let layers = (8.0 + 4.0 * (n / 100.0).ln()).round().max(4.0) as u32;
    let hidden = ((n * 1e6 / (12.0 * layers as f64)).sqrt() / 64.0).round().max(1.0) as u32 * 64;
    (layers, hidden / 64, hidden)
}

/// Config for one design point.
pub fn synthetic_config(design: &SynthDesign, n: f64, d: f64, optimizer: &str, lr: f64, bs: u64, wd: f64) -> RunConfig {
    let steps = ((d * 1e9) / (bs as f64 * design.seq_len as f64)).round().max(1.0) as u64;
    let mut c = RunConfig::minimal(&design.source, n, d, steps, optimizer, lr, bs);
    let (layers, heads, hidden) = architecture_for(n);
    c.num_layers = Some(layers);
    c.num_heads = Some(heads);
    c.hidden_dim = Some(hidden);
    c.lr_schedule = Some("cosine".into());
    c.min_lr_ratio = Some(0.1);
    c.weight_decay = Some(wd);
    c.warmup = Some(Warmup::Ratio(design.warmup_ratio));
    c.max_grad_norm = Some(1.0);
    c.beta1 = Some(0.9);
    c.beta2 = Some(if optimizer == "lion" { 0.99 } else { 0.95 });
    c.normalized()
}

/// One run per sampled design combination, with Gaussian noise on the final loss.
pub fn generate_synthetic_runs(p: &OracleParams, design: &SynthDesign, seed: u64) -> Result<Vec<RunRecord>> {
    p.validate()?;
    if design.sizes.len() < 3 {
        return Err(Error::Argument("synthetic design needs at least 3 (N, D) pairs".into()));
    }
    let combos = design.n_combinations();
    if combos == 0 || design.curve_points == 0 {
        return Err(Error::Argument("synthetic design has an empty axis".into()));
    }
    let per_pair = design.runs_per_pair.min(combos);
    let normal = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let batches: Vec<Vec<RunRecord>> = design
        .sizes
        .par_iter()
        .enumerate()
        .map(|(pi, &(n, d))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut picks = sample(&mut rng, combos, per_pair).into_vec();
            picks.sort_unstable();
            picks
                .into_iter()
                .enumerate()
                .map(|(k, idx)| {
                    let (nl, nb, nw) = (design.lr_grid.len(), design.batch_grid.len(), design.wd_grid.len());
                    let opt = &design.optimizers[idx / (nl * nb * nw)];
                    let lr = design.lr_grid[idx / (nb * nw) % nl];
                    let bs = design.batch_grid[idx / nw % nb];
                    let wd = design.wd_grid[idx % nw];
                    let config = synthetic_config(design, n, d, opt, lr, bs, wd);
                    let noise = if p.noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    let final_loss = p.loss(&config) + noise;
                    let t = config.total_steps;
                    let curve = (1..=design.curve_points)
                        .map(|j| {
                            let step = ((t as f64 * j as f64 / design.curve_points as f64).round() as u64).max(1);
                            let frac = step as f64 / t as f64;
                            (step, p.curve_value(final_loss, frac, design.warmup_ratio))
                        })
                        .collect::<Vec<_>>();
                    let mut curve = curve;
                    curve.dedup_by_key(|s| s.0);
                    curve.last_mut().unwrap().1 = final_loss;
                    RunRecord {
                        run_id: format!("syn-n{n}-d{d}-{k:03}"),
                        config,
                        curve,
                        final_loss,
                        finished: true,
                    }
                })
                .collect()
        })
        .collect();
    Ok(batches.into_iter().flatten().collect())
}
