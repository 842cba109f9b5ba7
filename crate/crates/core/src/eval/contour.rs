//! Thin-plate-spline interpolation of a scattered (lr, batch, loss) surface onto a
//! regular grid in log space, followed by a Gaussian blur.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourOptions {
    pub resolution: usize,
    /// Blur width in grid cells; 0 disables smoothing.
    pub sigma_cells: f64,
}

impl Default for ContourOptions {
    fn default() -> Self {
        ContourOptions {
            resolution: 50,
            sigma_cells: 1.0,
        }
    }
}

/// Interpolant `s(p) = Σ wᵢ φ(|p − pᵢ|) + c₀ + c₁x + c₂y` with `φ(r) = r² ln r`.
#[derive(Clone, Debug)]
pub struct ThinPlateSpline {
    centers: Vec<(f64, f64)>,
    weights: Vec<f64>,
    affine: [f64; 3],
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl ThinPlateSpline {
    pub fn fit(points: &[(f64, f64, f64)]) -> Result<Self> {
        let n = points.len();
        if n < 4 {
            return Err(Error::Argument(format!("need at least 4 samples, got {n}")));
        }
        for i in 0..n {
            for j in 0..i {
                if points[i].0 == points[j].0 && points[i].1 == points[j].1 && points[i].2 != points[j].2 {
                    return Err(Error::Argument(format!(
                        "conflicting losses at ({}, {})",
                        points[i].0, points[i].1
                    )));
                }
            }
        }
        let mut uniq: Vec<(f64, f64, f64)> = Vec::with_capacity(n);
        for p in points {
            if !uniq.iter().any(|q| q.0 == p.0 && q.1 == p.1) {
                uniq.push(*p);
            }
        }
        let m = uniq.len();
        let mut a = Array2::<f64>::zeros((m + 3, m + 3));
        let mut b = Array1::<f64>::zeros(m + 3);
        for i in 0..m {
            for j in 0..m {
                let (dx, dy) = (uniq[i].0 - uniq[j].0, uniq[i].1 - uniq[j].1);
                a[[i, j]] = tps_kernel(dx * dx + dy * dy);
            }
            let poly = [1.0, uniq[i].0, uniq[i].1];
            for k in 0..3 {
                a[[i, m + k]] = poly[k];
                a[[m + k, i]] = poly[k];
            }
            b[i] = uniq[i].2;
        }
        let x = solve(&a, &b).map_err(|_| Error::Argument("samples are collinear; spline is undetermined".into()))?;
        Ok(ThinPlateSpline {
            centers: uniq.iter().map(|p| (p.0, p.1)).collect(),
            weights: x.iter().take(m).copied().collect(),
            affine: [x[m], x[m + 1], x[m + 2]],
        })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let mut s = self.affine[0] + self.affine[1] * x + self.affine[2] * y;
        for ((cx, cy), w) in self.centers.iter().zip(&self.weights) {
            let (dx, dy) = (x - cx, y - cy);
            s += w * tps_kernel(dx * dx + dy * dy);
        }
        s
    }
}

/// Regular grid in (ln lr, ln bs) covering the sample range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourGrid {
    pub log_lr: Vec<f64>,
    pub log_bs: Vec<f64>,
    /// `z[i][j]` at `(log_lr[i], log_bs[j])`.
    pub z: Vec<Vec<f64>>,
}

impl ContourGrid {
    /// `(lr, batch, loss)` triples, lr-major.
    pub fn triples(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.log_lr.len() * self.log_bs.len());
        for (i, x) in self.log_lr.iter().enumerate() {
            for (j, y) in self.log_bs.iter().enumerate() {
                out.push((x.exp(), y.exp(), self.z[i][j]));
            }
        }
        out
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Separable Gaussian blur with weights renormalized at the edges, so constants are preserved.
pub fn gaussian_blur(z: &[Vec<f64>], sigma: f64) -> Vec<Vec<f64>> {
    if sigma <= 0.0 || z.is_empty() {
        return z.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |get: &dyn Fn(usize, usize) -> f64, rows: usize, cols: usize, along_rows: bool| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|i| {
                (0..cols)
                    .map(|j| {
                        let (mut s, mut w) = (0.0, 0.0);
                        for (t, kv) in kernel.iter().enumerate() {
                            let off = t as isize - radius;
                            let (ii, jj) = if along_rows { (i as isize + off, j as isize) } else { (i as isize, j as isize + off) };
                            if ii >= 0 && jj >= 0 && (ii as usize) < rows && (jj as usize) < cols {
                                s += kv * get(ii as usize, jj as usize);
                                w += kv;
                            }
                        }
                        s / w
                    })
                    .collect()
            })
            .collect()
    };
    let (rows, cols) = (z.len(), z[0].len());
    let first = pass(&|i, j| z[i][j], rows, cols, true);
    pass(&|i, j| first[i][j], rows, cols, false)
}

/// Interpolates `(lr, batch, loss)` samples in log space onto a `resolution²` grid and blurs it.
pub fn export_contour_data(surface: &[(f64, f64, f64)], opts: &ContourOptions) -> Result<ContourGrid> {
    if surface.iter().any(|(lr, bs, l)| !(*lr > 0.0 && *bs > 0.0 && l.is_finite())) {
        return Err(Error::Argument("contour samples need positive lr, batch and finite loss".into()));
    }
    if opts.resolution == 0 {
        return Err(Error::Argument("resolution must be positive".into()));
    }
    let pts: Vec<(f64, f64, f64)> = surface.iter().map(|&(lr, bs, l)| (lr.ln(), bs.ln(), l)).collect();
    let tps = ThinPlateSpline::fit(&pts)?;
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let xs = linspace(x0, x1, opts.resolution);
    let ys = linspace(y0, y1, opts.resolution);
    let raw: Vec<Vec<f64>> = xs.par_iter().map(|x| ys.iter().map(|y| tps.eval(*x, *y)).collect()).collect();
    Ok(ContourGrid {
        z: gaussian_blur(&raw, opts.sigma_cells),
        log_lr: xs,
        log_bs: ys,
    })
}
