//! Small dense solvers used by the law fits, quadratic refinement and RBF interpolation.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Least-squares solution of `a x ≈ b` via Householder QR.
///
/// Fails when the design is numerically rank deficient: some diagonal entry of R is
/// below `rank_tol` times the largest column norm of `a`.
pub fn lstsq<T: Scalar>(a: &Array2<T>, b: &Array1<T>, rank_tol: T) -> Result<Array1<T>> {
    let (m, n) = a.dim();
    if b.len() != m {
        return Err(Error::Shape(format!(
            "lstsq: {m} rows in design but {} targets",
            b.len()
        )));
    }
    if m < n {
        return Err(Error::Fit(format!(
            "underdetermined system: {m} equations for {n} unknowns"
        )));
    }
    let mut r = a.clone();
    let mut y = b.clone();
    let scale = (0..n)
        .map(|j| r.column(j).iter().map(|v| *v * *v).sum::<T>().sqrt())
        .fold(T::zero(), T::max);
    if scale == T::zero() {
        return Err(Error::Fit("design matrix is identically zero".into()));
    }

    for k in 0..n {
        let norm = (k..m).map(|i| r[[i, k]] * r[[i, k]]).sum::<T>().sqrt();
        if norm <= rank_tol * scale {
            return Err(Error::Fit(format!("rank-deficient design at column {k}")));
        }
        let alpha = if r[[k, k]] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = (k..m).map(|i| r[[i, k]]).collect();
        v[0] -= alpha;
        let vnorm2: T = v.iter().map(|x| *x * *x).sum();
        if vnorm2 > T::zero() {
            for j in k..n {
                let dot: T = v.iter().enumerate().map(|(i, vi)| *vi * r[[k + i, j]]).sum();
                let f = (dot + dot) / vnorm2;
                for (i, vi) in v.iter().enumerate() {
                    r[[k + i, j]] -= f * *vi;
                }
            }
            let dot: T = v.iter().enumerate().map(|(i, vi)| *vi * y[k + i]).sum();
            let f = (dot + dot) / vnorm2;
            for (i, vi) in v.iter().enumerate() {
                y[k + i] -= f * *vi;
            }
        }
    }

    let mut x = Array1::zeros(n);
    for k in (0..n).rev() {
        let mut s = y[k];
        for j in k + 1..n {
            s -= r[[k, j]] * x[j];
        }
        x[k] = s / r[[k, k]];
    }
    Ok(x)
}

/// Solves the square system `a x = b` by LU with partial pivoting.
pub fn solve<T: Scalar>(a: &Array2<T>, b: &Array1<T>) -> Result<Array1<T>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::Shape(format!(
            "solve: expected square system, got {:?} with {} targets",
            a.dim(),
            b.len()
        )));
    }
    let mut m = a.clone();
    let mut x = b.clone();
    let scale = m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    let tiny = scale * T::epsilon() * T::of(n as f64);
    for k in 0..n {
        let (piv, pval) = (k..n)
            .map(|i| (i, m[[i, k]].abs()))
            .fold((k, -T::one()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval <= tiny {
            return Err(Error::Fit(format!("singular system at pivot {k}")));
        }
        if piv != k {
            for j in 0..n {
                m.swap([k, j], [piv, j]);
            }
            x.swap(k, piv);
        }
        for i in k + 1..n {
            let f = m[[i, k]] / m[[k, k]];
            if f == T::zero() {
                continue;
            }
            for j in k..n {
                let mkj = m[[k, j]];
                m[[i, j]] -= f * mkj;
            }
            let xk = x[k];
            x[i] -= f * xk;
        }
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for j in k + 1..n {
            s -= m[[k, j]] * x[j];
        }
        x[k] = s / m[[k, k]];
    }
    Ok(x)
}
