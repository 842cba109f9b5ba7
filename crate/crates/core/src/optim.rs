//! Derivative-free Nelder–Mead simplex minimization.

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct NelderMeadOptions<T> {
    pub max_evals: usize,
    /// Stop when the spread of simplex values falls below this.
    pub f_tol: T,
    /// Stop when every vertex is within this distance (max-norm) of the best vertex.
    pub x_tol: T,
    /// Edge length of the initial simplex, per coordinate.
    pub initial_step: T,
    /// Number of restarts from the current best point.
    pub restarts: usize,
}

impl<T: Scalar> Default for NelderMeadOptions<T> {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: 20_000,
            f_tol: T::of(1e-15),
            x_tol: T::of(1e-10),
            initial_step: T::of(0.1),
            restarts: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub f: T,
    pub evals: usize,
}

fn sanitize<T: Scalar>(v: T) -> T {
    if v.is_nan() {
        T::infinity()
    } else {
        v
    }
}

/// Minimizes `f` from `x0` with the dimension-adaptive coefficients of Gao & Han.
/// Non-finite objective values are treated as +∞.
pub fn nelder_mead<T, F>(f: F, x0: &[T], opts: &NelderMeadOptions<T>) -> Minimum<T>
where
    T: Scalar,
    F: Fn(&[T]) -> T,
{
    let mut best = Minimum {
        x: x0.to_vec(),
        f: sanitize(f(x0)),
        evals: 1,
    };
    for _ in 0..=opts.restarts {
        let run = simplex_run(&f, &best.x, opts, opts.max_evals.saturating_sub(best.evals));
        let improved = run.f < best.f;
        let evals = best.evals + run.evals;
        if improved {
            let gain = best.f - run.f;
            best = Minimum { evals, ..run };
            if gain <= opts.f_tol {
                break;
            }
        } else {
            best.evals = evals;
            break;
        }
        if best.evals >= opts.max_evals {
            break;
        }
    }
    best
}

fn simplex_run<T, F>(f: &F, x0: &[T], opts: &NelderMeadOptions<T>, budget: usize) -> Minimum<T>
where
    T: Scalar,
    F: Fn(&[T]) -> T,
{
    let n = x0.len();
    let nf = T::of(n as f64);
    let one = T::one();
    let two = one + one;
    let alpha = one;
    let beta = one + two / nf;
    let gamma = T::of(0.75) - one / (two * nf);
    let delta = one - one / nf;

    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[T]| {
        evals.set(evals.get() + 1);
        sanitize(f(x))
    };

    let mut simplex: Vec<(Vec<T>, T)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        let step = if x[i] != T::zero() {
            opts.initial_step * x[i].abs().max(one)
        } else {
            opts.initial_step
        };
        x[i] += step;
        let fx = eval(&x);
        simplex.push((x, fx));
    }

    loop {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let fbest = simplex[0].1;
        let fworst = simplex[n].1;
        let spread = if fworst.is_finite() { fworst - fbest } else { T::infinity() };
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (*a - *b).abs()))
            .fold(T::zero(), T::max);
        if (spread <= opts.f_tol && size <= opts.x_tol) || size <= opts.x_tol * T::of(1e-3) || evals.get() >= budget {
            break;
        }

        let mut centroid = vec![T::zero(); n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += *xi;
            }
        }
        for c in centroid.iter_mut() {
            *c /= nf;
        }
        let along = |t: T| -> Vec<T> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| *c + t * (*c - *w))
                .collect()
        };

        let xr = along(alpha);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(alpha * beta);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = along(alpha * gamma);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = along(-gamma);
            let fc = eval(&xc);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for (x, fx) in simplex[1..].iter_mut() {
            for (xi, bi) in x.iter_mut().zip(&best) {
                *xi = *bi + delta * (*xi - *bi);
            }
            *fx = eval(x);
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    let (x, fx) = simplex.swap_remove(0);
    Minimum { x, f: fx, evals: evals.get() }
}
