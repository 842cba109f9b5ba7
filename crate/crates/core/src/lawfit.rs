//! Configuration-agnostic baselines: the Chinchilla law `E + A/N^α + B/D^β` fitted on
//! best-run-per-(N, D) frontiers, hyperparameter power laws `η = c·N^α·D^β`,
//! `B = d·D^γ`, and the residual targets the regressors learn.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{size_key, RunRecord, SizeKey};
use crate::linalg::lstsq;
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::scalar::Scalar;
use crate::schema::RunConfig;

/// Which runs a baseline covers.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Scope {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
}

impl Scope {
    pub fn source(source: &str) -> Self {
        Scope {
            source: source.to_string(),
            optimizer: None,
        }
    }

    pub fn with_optimizer(source: &str, optimizer: &str) -> Self {
        Scope {
            source: source.to_string(),
            optimizer: Some(optimizer.to_string()),
        }
    }

    pub fn contains(&self, c: &RunConfig) -> bool {
        c.source == self.source && self.optimizer.as_ref().is_none_or(|o| *o == c.optimizer)
    }

    /// Scope matching a config at the same granularity as `self`.
    pub fn of(c: &RunConfig, per_optimizer: bool) -> Scope {
        if per_optimizer {
            Scope::with_optimizer(&c.source, &c.optimizer)
        } else {
            Scope::source(&c.source)
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.optimizer {
            Some(o) => write!(f, "{}.{}", self.source, o),
            None => write!(f, "{}", self.source),
        }
    }
}

/// Lowest-loss run among all runs sharing an (N, D) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub n: f64,
    pub d: f64,
    pub best_loss: f64,
    pub run_id: String,
    pub best_config: RunConfig,
}

/// One frontier point per distinct (N, D) among runs in `scope`; ties go to the
/// lexicographically smallest run id.
pub fn select_best_per_group(runs: &[RunRecord], scope: &Scope) -> Vec<FrontierPoint> {
    let mut best: BTreeMap<SizeKey, &RunRecord> = BTreeMap::new();
    for r in runs.iter().filter(|r| scope.contains(&r.config)) {
        best.entry(size_key(&r.config))
            .and_modify(|cur| {
                if r.final_loss < cur.final_loss
                    || (r.final_loss == cur.final_loss && r.run_id < cur.run_id)
                {
                    *cur = r;
                }
            })
            .or_insert(r);
    }
    best.into_values()
        .map(|r| FrontierPoint {
            n: r.config.model_size,
            d: r.config.data_size,
            best_loss: r.final_loss,
            run_id: r.run_id.clone(),
            best_config: r.config.clone(),
        })
        .collect()
}

/// Parameters of `E + A·N^(−α) + B·D^(−β)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChinchillaLaw<T> {
    pub e: T,
    pub a: T,
    pub b: T,
    pub alpha: T,
    pub beta: T,
}

impl<T: Scalar> ChinchillaLaw<T> {
    pub fn predict(&self, n: T, d: T) -> Result<T> {
        if !(n > T::zero() && d > T::zero()) {
            return Err(Error::Argument(format!("N and D must be > 0, got N={n}, D={d}")));
        }
        Ok(self.e + self.a * n.powf(-self.alpha) + self.b * d.powf(-self.beta))
    }

    fn from_log_params(p: &[T]) -> Self {
        ChinchillaLaw {
            e: p[0].exp(),
            a: p[1].exp(),
            b: p[2].exp(),
            alpha: p[3],
            beta: p[4],
        }
    }
}

/// `log(exp(e) + exp(a − α·ln N) + exp(b − β·ln D))` together with its softmax weights.
fn log_pred<T: Scalar>(p: &[T], ln_n: T, ln_d: T) -> (T, [T; 3]) {
    let t = [p[0], p[1] - p[3] * ln_n, p[2] - p[4] * ln_d];
    let m = t[0].max(t[1]).max(t[2]);
    let w = [(t[0] - m).exp(), (t[1] - m).exp(), (t[2] - m).exp()];
    let s = w[0] + w[1] + w[2];
    (m + s.ln(), [w[0] / s, w[1] / s, w[2] / s])
}

pub fn huber<T: Scalar>(r: T, delta: T) -> T {
    let a = r.abs();
    if a <= delta {
        T::of(0.5) * r * r
    } else {
        delta * (a - T::of(0.5) * delta)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChinchillaFitOptions {
    pub huber_delta: f64,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    /// Grid for E as fractions of the smallest observed loss.
    pub e_fractions: Vec<f64>,
    /// Grid for ln A and ln B as offsets from ln(smallest observed loss).
    pub log_coef_offsets: Vec<f64>,
    /// Number of best grid starts refined by simplex descent.
    pub refine_starts: usize,
    /// Finish each descent with damped Gauss–Newton steps on the Huber objective.
    pub polish: bool,
}

impl Default for ChinchillaFitOptions {
    fn default() -> Self {
        ChinchillaFitOptions {
            huber_delta: 1e-3,
            alpha_grid: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            beta_grid: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            e_fractions: vec![0.1, 0.4, 0.7, 0.95],
            log_coef_offsets: vec![-2.0, 0.0, 2.0, 4.0, 6.0],
            refine_starts: 8,
            polish: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChinchillaSolution<T> {
    pub law: ChinchillaLaw<T>,
    pub objective: T,
    /// Objective of every grid start, in grid order.
    pub grid_objectives: Vec<T>,
    /// Index of the grid start the returned optimum descended from.
    pub start_index: usize,
}

struct HuberProblem<'a, T> {
    ln_n: &'a [T],
    ln_d: &'a [T],
    ln_loss: &'a [T],
    delta: T,
}

impl<T: Scalar> HuberProblem<'_, T> {
    fn objective(&self, p: &[T]) -> T {
        if !(p[3] > T::zero() && p[4] > T::zero()) || p.iter().any(|v| !v.is_finite()) {
            return T::infinity();
        }
        let mut total = T::zero();
        for i in 0..self.ln_n.len() {
            let (lp, _) = log_pred(p, self.ln_n[i], self.ln_d[i]);
            total += huber(lp - self.ln_loss[i], self.delta);
        }
        if total.is_finite() {
            total
        } else {
            T::infinity()
        }
    }

    /// Levenberg–Marquardt on iteratively reweighted residuals.
    fn polish(&self, p0: &[T], f0: T) -> (Vec<T>, T) {
        let m = self.ln_n.len();
        let mut p = p0.to_vec();
        let mut f = f0;
        let mut mu = T::of(1e-3);
        for _ in 0..200 {
            let mut jac = Array2::<T>::zeros((m + 5, 5));
            let mut rhs = Array1::<T>::zeros(m + 5);
            for i in 0..m {
                let (lp, w) = log_pred(&p, self.ln_n[i], self.ln_d[i]);
                let r = lp - self.ln_loss[i];
                let weight = if r.abs() <= self.delta { T::one() } else { self.delta / r.abs() };
                let sw = weight.sqrt();
                let row = [w[0], w[1], w[2], -w[1] * self.ln_n[i], -w[2] * self.ln_d[i]];
                for (j, v) in row.iter().enumerate() {
                    jac[[i, j]] = sw * *v;
                }
                rhs[i] = -sw * r;
            }
            let diag: Vec<T> = (0..5)
                .map(|j| (0..m).map(|i| jac[[i, j]] * jac[[i, j]]).sum::<T>().max(T::of(1e-12)))
                .collect();
            let mut accepted = false;
            for _ in 0..12 {
                for j in 0..5 {
                    for k in 0..5 {
                        jac[[m + j, k]] = T::zero();
                    }
                    jac[[m + j, j]] = (mu * diag[j]).sqrt();
                    rhs[m + j] = T::zero();
                }
                let Ok(step) = lstsq(&jac, &rhs, T::of(1e-14)) else {
                    mu *= T::of(10.0);
                    continue;
                };
                let cand: Vec<T> = p.iter().zip(step.iter()).map(|(a, b)| *a + *b).collect();
                let fc = self.objective(&cand);
                if fc < f {
                    let rel = (f - fc) / f.max(T::min_positive_value());
                    p = cand;
                    f = fc;
                    mu = (mu * T::of(0.3)).max(T::of(1e-12));
                    accepted = rel > T::of(1e-14);
                    break;
                }
                mu *= T::of(10.0);
            }
            if !accepted {
                break;
            }
        }
        (p, f)
    }
}

/// Fits the Chinchilla law by minimizing Σ Huber_δ(log ℓ̂ − log L) from a multi-start grid.
pub fn fit_chinchilla_raw<T: Scalar>(
    n: &[T],
    d: &[T],
    loss: &[T],
    opts: &ChinchillaFitOptions,
) -> Result<ChinchillaSolution<T>> {
    if n.len() != d.len() || n.len() != loss.len() {
        return Err(Error::Shape("N, D and loss lengths differ".into()));
    }
    if n.len() < 5 {
        return Err(Error::Fit(format!("need at least 5 points, got {}", n.len())));
    }
    let distinct = |v: &[T]| {
        let mut s: Vec<f64> = v.iter().map(|x| x.f64()).collect();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s.dedup();
        s.len()
    };
    if distinct(n) < 2 || distinct(d) < 2 {
        return Err(Error::Fit("degenerate points: need at least 2 distinct N and 2 distinct D".into()));
    }
    if n.iter().chain(d).chain(loss).any(|v| !(v.is_finite() && *v > T::zero())) {
        return Err(Error::Fit("N, D and losses must be finite and > 0".into()));
    }
    let ln_n: Vec<T> = n.iter().map(|v| v.ln()).collect();
    let ln_d: Vec<T> = d.iter().map(|v| v.ln()).collect();
    let ln_loss: Vec<T> = loss.iter().map(|v| v.ln()).collect();
    let problem = HuberProblem {
        ln_n: &ln_n,
        ln_d: &ln_d,
        ln_loss: &ln_loss,
        delta: T::of(opts.huber_delta),
    };

    let min_loss = loss.iter().copied().fold(T::infinity(), T::min);
    let mut starts: Vec<Vec<T>> = Vec::new();
    for &ef in &opts.e_fractions {
        for &ao in &opts.log_coef_offsets {
            for &bo in &opts.log_coef_offsets {
                for &alpha in &opts.alpha_grid {
                    for &beta in &opts.beta_grid {
                        starts.push(vec![
                            (min_loss * T::of(ef)).ln(),
                            min_loss.ln() + T::of(ao),
                            min_loss.ln() + T::of(bo),
                            T::of(alpha),
                            T::of(beta),
                        ]);
                    }
                }
            }
        }
    }
    let grid_objectives: Vec<T> = starts.par_iter().map(|p| problem.objective(p)).collect();
    let mut order: Vec<usize> = (0..starts.len()).filter(|&i| grid_objectives[i].is_finite()).collect();
    if order.is_empty() {
        return Err(Error::Fit("objective is non-finite at every start".into()));
    }
    order.sort_by(|&i, &j| grid_objectives[i].partial_cmp(&grid_objectives[j]).unwrap().then(i.cmp(&j)));
    order.truncate(opts.refine_starts.max(1));

    let nm = NelderMeadOptions::<T> {
        f_tol: T::of(1e-18).max(T::epsilon() * T::epsilon()),
        x_tol: T::epsilon().sqrt() * T::of(1e-3),
        ..NelderMeadOptions::default()
    };
    let refined: Vec<(usize, Vec<T>, T)> = order
        .par_iter()
        .map(|&i| {
            let m = nelder_mead(|p: &[T]| problem.objective(p), &starts[i], &nm);
            let (mut x, mut f) = (m.x, m.f);
            if opts.polish && f.is_finite() {
                let (xp, fp) = problem.polish(&x, f);
                if fp < f {
                    x = xp;
                    f = fp;
                }
                // A second simplex pass can leave a kink of the Huber loss.
                let m2 = nelder_mead(|p: &[T]| problem.objective(p), &x, &nm);
                if m2.f < f {
                    x = m2.x;
                    f = m2.f;
                }
            }
            if !(f <= grid_objectives[i]) {
                x = starts[i].clone();
                f = grid_objectives[i];
            }
            (i, x, f)
        })
        .collect();
    let (start_index, best_x, best_f) = refined
        .into_iter()
        .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(a.0.cmp(&b.0)))
        .expect("at least one start");
    Ok(ChinchillaSolution {
        law: ChinchillaLaw::from_log_params(&best_x),
        objective: best_f,
        grid_objectives,
        start_index,
    })
}

/// A fitted baseline with its scope and achieved objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChinchillaFit {
    pub scope: Scope,
    pub law: ChinchillaLaw<f64>,
    pub objective: f64,
    pub n_points: usize,
}

impl ChinchillaFit {
    pub fn predict(&self, n: f64, d: f64) -> Result<f64> {
        self.law.predict(n, d)
    }
}

pub fn fit_chinchilla(points: &[FrontierPoint], scope: &Scope, opts: &ChinchillaFitOptions) -> Result<ChinchillaFit> {
    let n: Vec<f64> = points.iter().map(|p| p.n).collect();
    let d: Vec<f64> = points.iter().map(|p| p.d).collect();
    let l: Vec<f64> = points.iter().map(|p| p.best_loss).collect();
    let sol = fit_chinchilla_raw(&n, &d, &l, opts).map_err(|e| match e {
        Error::Fit(m) => Error::Fit(format!("scope {scope}: {m}")),
        other => other,
    })?;
    Ok(ChinchillaFit {
        scope: scope.clone(),
        law: sol.law,
        objective: sol.objective,
        n_points: points.len(),
    })
}

pub fn predict_chinchilla(fit: &ChinchillaFit, n: f64, d: f64) -> Result<f64> {
    fit.predict(n, d)
}

/// Residual regression target `y = P − ℓ̂(N, D)`.
pub fn residual_target(p: f64, fit: &ChinchillaFit, n: f64, d: f64) -> Result<f64> {
    Ok(p - fit.predict(n, d)?)
}

/// Fits one baseline per source (or per source and optimizer) on the frontier of `runs`.
pub fn fit_baselines(
    runs: &[RunRecord],
    per_optimizer: bool,
    opts: &ChinchillaFitOptions,
) -> Result<BTreeMap<Scope, ChinchillaFit>> {
    let scopes: std::collections::BTreeSet<Scope> = runs.iter().map(|r| Scope::of(&r.config, per_optimizer)).collect();
    scopes
        .into_iter()
        .map(|scope| {
            let points = select_best_per_group(runs, &scope);
            fit_chinchilla(&points, &scope, opts).map(|f| (scope, f))
        })
        .collect()
}

/// Baseline covering `c`: the per-optimizer scope when one exists, else the source scope.
pub fn baseline_for<'a>(baselines: &'a BTreeMap<Scope, ChinchillaFit>, c: &RunConfig) -> Result<&'a ChinchillaFit> {
    baselines
        .get(&Scope::with_optimizer(&c.source, &c.optimizer))
        .or_else(|| baselines.get(&Scope::source(&c.source)))
        .ok_or_else(|| Error::Scope(c.source.clone()))
}

/// `η(N, D) = c·N^α·D^β` and `B(D) = d·D^γ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw<T> {
    pub c: T,
    pub alpha_lr: T,
    pub beta_lr: T,
    pub d: T,
    pub gamma_bs: T,
}

impl<T: Scalar> PowerLaw<T> {
    pub fn optimal_lr(&self, n: T, d: T) -> T {
        self.c * n.powf(self.alpha_lr) * d.powf(self.beta_lr)
    }

    pub fn optimal_batch(&self, d: T) -> T {
        self.d * d.powf(self.gamma_bs)
    }
}

/// Ordinary least squares in log space on observed optimal (lr, batch) per (N, D).
pub fn fit_power_law_raw<T: Scalar>(n: &[T], d: &[T], lr: &[T], batch: &[T]) -> Result<PowerLaw<T>> {
    let m = n.len();
    if d.len() != m || lr.len() != m || batch.len() != m {
        return Err(Error::Shape("power-law inputs have different lengths".into()));
    }
    if m < 3 {
        return Err(Error::Fit(format!("need at least 3 frontier points, got {m}")));
    }
    if n.iter().chain(d).chain(lr).chain(batch).any(|v| !(v.is_finite() && *v > T::zero())) {
        return Err(Error::Fit("power-law inputs must be finite and > 0".into()));
    }
    let tol = T::of(1e-10).max(T::epsilon() * T::of(100.0));
    let mut x = Array2::<T>::zeros((m, 3));
    let mut y = Array1::<T>::zeros(m);
    for i in 0..m {
        x[[i, 0]] = T::one();
        x[[i, 1]] = n[i].ln();
        x[[i, 2]] = d[i].ln();
        y[i] = lr[i].ln();
    }
    let lr_coef = lstsq(&x, &y, tol).map_err(|_| Error::Fit("rank-deficient design for the learning-rate law".into()))?;
    let mut xb = Array2::<T>::zeros((m, 2));
    let mut yb = Array1::<T>::zeros(m);
    for i in 0..m {
        xb[[i, 0]] = T::one();
        xb[[i, 1]] = d[i].ln();
        yb[i] = batch[i].ln();
    }
    let bs_coef = lstsq(&xb, &yb, tol).map_err(|_| Error::Fit("rank-deficient design for the batch-size law".into()))?;
    Ok(PowerLaw {
        c: lr_coef[0].exp(),
        alpha_lr: lr_coef[1],
        beta_lr: lr_coef[2],
        d: bs_coef[0].exp(),
        gamma_bs: bs_coef[1],
    })
}

pub fn fit_power_law(frontier: &[FrontierPoint]) -> Result<PowerLaw<f64>> {
    let n: Vec<f64> = frontier.iter().map(|p| p.n).collect();
    let d: Vec<f64> = frontier.iter().map(|p| p.d).collect();
    let lr: Vec<f64> = frontier.iter().map(|p| p.best_config.peak_lr).collect();
    let bs: Vec<f64> = frontier.iter().map(|p| p.best_config.batch_size as f64).collect();
    fit_power_law_raw(&n, &d, &lr, &bs)
}
