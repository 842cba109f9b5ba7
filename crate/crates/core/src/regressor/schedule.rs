//! Linear warmup followed by linear decay to zero.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WarmupSpec {
    /// Warmup length as a fraction of the stage's total steps.
    Ratio { ratio: f64 },
    /// Fixed number of warmup steps, capped at `cap_ratio` of the total.
    Steps { steps: u64, cap_ratio: f64 },
}

impl WarmupSpec {
    pub fn resolve(&self, total: u64) -> u64 {
        let w = match *self {
            WarmupSpec::Ratio { ratio } => (ratio * total as f64).round() as u64,
            WarmupSpec::Steps { steps, cap_ratio } => steps.min((cap_ratio * total as f64).floor() as u64),
        };
        w.min(total)
    }
}

/// Learning rate at 0-based step `s` of `total`, with `warmup` warmup steps.
/// Rises as `peak·(s+1)/warmup` during warmup, reaches `peak` at `s = warmup`
/// and decays linearly to 0 at `s = total`.
pub fn lr_at(step: u64, total: u64, warmup: u64, peak: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let decay = (total - warmup) as f64;
    peak * (total - step) as f64 / decay
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(lr_at(100, 1000, 100, 2e-3), 2e-3);
        assert_eq!(lr_at(1000, 1000, 100, 2e-3), 0.0);
        assert!((lr_at(0, 1000, 100, 2e-3) - 2e-5).abs() < 1e-18);
        assert_eq!(lr_at(99, 1000, 100, 2e-3), 2e-3);
        assert!((lr_at(550, 1000, 100, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(lr_at(0, 10, 0, 1.0), 1.0);
        assert!((lr_at(9, 10, 0, 1.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn warmup_resolution() {
        assert_eq!(WarmupSpec::Ratio { ratio: 0.1 }.resolve(200), 20);
        assert_eq!(WarmupSpec::Steps { steps: 1000, cap_ratio: 0.1 }.resolve(50_000), 1000);
        assert_eq!(WarmupSpec::Steps { steps: 1000, cap_ratio: 0.1 }.resolve(3000), 300);
    }

    #[test]
    fn monotone_after_warmup() {
        let mut prev = f64::INFINITY;
        for s in 20..=200 {
            let lr = lr_at(s, 200, 20, 1.0);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
