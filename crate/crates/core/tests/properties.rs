use confscale::encode::{canonicalize, decanonicalize};
use confscale::eval::spearman;
use confscale::gbt::fit_gbt;
use confscale::ingest::smooth_curve;
use confscale::schema::{BETAS, LR_SCHEDULES, OPTIMIZERS};
use confscale::select::{AxisScale, GridAxis, SweepGrid};
use confscale::*;
use proptest::prelude::*;

fn config() -> impl Strategy<Value = RunConfig> {
    (
        (prop::sample::select(vec!["marin", "steplaw", "synthetic"]), prop::sample::select(OPTIMIZERS.to_vec())),
        (20.0f64..2000.0, 1.0f64..200.0, 100u64..200_000, 1e-5f64..1e-2, 8u64..4096),
        (prop::option::of(0.0f64..1.0), prop::option::of(0.0f64..0.5), prop::option::of(prop::sample::select(LR_SCHEDULES.to_vec()))),
        (prop::option::of(prop::sample::select(BETAS.to_vec())), prop::option::of(4u32..12), any::<bool>(), 0.0f64..0.2),
        prop::option::of((0.0f64..5.0, -1.0f64..1.0)),
    )
        .prop_map(|((src, opt), (n, d, steps, lr, bs), (wd, floor, sched), (beta, eps, ratio, warm), extra)| {
            let mut c = RunConfig::minimal(src, n, d, steps, opt, lr, bs);
            c.weight_decay = wd;
            c.min_lr_ratio = floor;
            c.lr_schedule = sched.map(str::to_string);
            c.beta2 = beta.map(|b| b.parse().unwrap());
            c.epsilon = eps.map(|e| 10f64.powi(-(e as i32)));
            c.warmup = Some(if ratio { Warmup::Ratio(warm) } else { Warmup::Steps((warm * steps as f64).round()) });
            if let Some((v, w)) = extra {
                c.optimizer_extras.insert("custom_momentum".into(), v);
                c.optimizer_extras.insert("trust_ratio".into(), w);
            }
            c.normalized()
        })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn encoding_round_trips(c in config()) {
        let fv = canonicalize(&c).unwrap();
        let back = decanonicalize(&fv).unwrap();
        prop_assert_eq!(&back.source, &c.source);
        prop_assert_eq!(&back.optimizer, &c.optimizer);
        prop_assert_eq!(back.total_steps, c.total_steps);
        prop_assert_eq!(back.batch_size, c.batch_size);
        prop_assert!(close(back.model_size, c.model_size));
        prop_assert!(close(back.peak_lr, c.peak_lr));
        prop_assert_eq!(back.optimizer_extras.keys().collect::<Vec<_>>(), c.optimizer_extras.keys().collect::<Vec<_>>());
        // A second pass is a fixed point.
        let again = canonicalize(&back).unwrap();
        for (a, b) in fv.fields.iter().zip(&again.fields) {
            match (a.slot, b.slot) {
                (Slot::Scalar(x), Slot::Scalar(y)) => prop_assert!(close(x, y), "{}: {} vs {}", a.name, x, y),
                (x, y) => prop_assert_eq!(x, y, "{}", a.name),
            }
        }
    }

    #[test]
    fn smoothing_stays_within_the_running_range(xs in prop::collection::vec(-10.0f64..10.0, 1..80), c in 0.0f64..0.999) {
        let s = smooth_curve(&xs, c).unwrap();
        prop_assert_eq!(s.len(), xs.len());
        prop_assert_eq!(s[0], xs[0]);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (x, v) in xs.iter().zip(&s) {
            lo = lo.min(*x);
            hi = hi.max(*x);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn spearman_ignores_monotone_transforms(pairs in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 3..40)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ea: Vec<f64> = a.iter().map(|x| (0.7 * x).exp() + 3.0).collect();
        match (spearman(&a, &b), spearman(&ea, &b)) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x.is_none(), y.is_none()),
        }
    }

    #[test]
    fn metrics_are_permutation_invariant_and_mae_bounds_rmse(
        pairs in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 2..40),
        rot in 0usize..40,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let m = compute_metrics(&p, &t).unwrap();
        prop_assert!(m.mae <= m.rmse);
        let k = rot % pairs.len();
        let (mut p2, mut t2) = (p.clone(), t.clone());
        p2.rotate_left(k);
        t2.rotate_left(k);
        let m2 = compute_metrics(&p2, &t2).unwrap();
        prop_assert!((m.mae - m2.mae).abs() < 1e-12);
        prop_assert!((m.rmse - m2.rmse).abs() < 1e-12);
        match (m.spearman_rho, m2.spearman_rho) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x.is_none(), y.is_none()),
        }
    }

    #[test]
    fn sweep_argmin_is_invariant_to_monotone_shifts(
        lr0 in 2e-4f64..5e-3,
        bs0 in 64.0f64..1024.0,
        shift in -1.0f64..1.0,
        scale in 0.1f64..10.0,
    ) {
        let base = RunConfig::minimal("synthetic", 268.0, 20.0, 20_000, "adamw", 1e-3, 256);
        let grid = SweepGrid {
            base,
            axes: vec![
                GridAxis::log_spaced("peak_lr", 1.5e-4, 4.8e-3, 6),
                GridAxis::new("batch_size", &[64.0, 128.0, 256.0, 512.0, 1024.0], AxisScale::Log),
            ],
        };
        let bowl = move |c: &RunConfig| {
            let x = (c.peak_lr / lr0).ln();
            let y = (c.batch_size as f64 / bs0).ln();
            0.05 * x * x + 0.02 * y * y
        };
        let a = sweep(&FnPredictor(move |c: &RunConfig| Ok(3.0 + bowl(c))), &grid).unwrap();
        let b = sweep(&FnPredictor(move |c: &RunConfig| Ok(3.0 + shift + scale * bowl(c))), &grid).unwrap();
        prop_assert_eq!(a.surface[0].index, b.surface[0].index);
    }

    #[test]
    fn gbt_is_piecewise_constant_between_split_points(
        xs in prop::collection::vec(0.0f64..10.0, 8..40),
        gap in 0usize..40,
        t in (0.0f64..1.0, 0.0f64..1.0),
    ) {
        let x: Vec<Vec<f64>> = xs.iter().map(|v| vec![*v]).collect();
        let y: Vec<f64> = xs.iter().map(|v| (v * 0.9).sin()).collect();
        let params = GbtParams { rounds: 20, max_depth: 3, learning_rate: 0.3, min_leaf: 1 };
        let fit = fit_gbt(&x, &y, &params).unwrap();
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        prop_assume!(sorted.len() >= 2);
        // Thresholds are midpoints, so each half of a gap maps to one leaf per tree.
        let k = gap % (sorted.len() - 1);
        let (lo, hi) = (sorted[k], sorted[k + 1]);
        let mid = 0.5 * (lo + hi);
        let at = |v: f64| fit.forest.predict(&[v]).unwrap();
        let left = |u: f64| lo + u * (mid - lo);
        let right = |u: f64| mid + u * (hi - mid);
        prop_assert_eq!(at(left(t.0)), at(left(t.1)));
        prop_assert_eq!(at(right(t.0)), at(right(t.1)));
    }
}
