//! Run-log ingestion: parsing, EMA smoothing, divergence / instability filtering and
//! grouped train / ID / OOD splitting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schema::RunConfig;

pub const DEFAULT_SMOOTHING: f64 = 0.99;

/// One pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    #[serde(flatten)]
    pub config: RunConfig,
    /// Smoothed loss curve, `(step, loss)` with strictly increasing steps.
    #[serde(default)]
    pub curve: Vec<(u64, f64)>,
    pub final_loss: f64,
    pub finished: bool,
}

/// Line format accepted by [`parse_runs`].
#[derive(Deserialize)]
struct RawRun {
    run_id: String,
    #[serde(flatten)]
    config: RunConfig,
    #[serde(default)]
    curve: Vec<(f64, f64)>,
    #[serde(default)]
    final_loss: Option<f64>,
    #[serde(default = "default_true")]
    finished: bool,
    /// Curves that are already smoothed (or come from held-out evaluation) skip the EMA.
    #[serde(default)]
    smoothed: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Serialize)]
struct RunLine<'a> {
    #[serde(flatten)]
    record: &'a RunRecord,
    smoothed: bool,
}

impl RunRecord {
    /// Serializes as one log line; the stored curve is marked as already smoothed so
    /// that re-ingesting the line is idempotent.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&RunLine {
            record: self,
            smoothed: true,
        })
        .expect("run records serialize")
    }

    fn from_raw(raw: RawRun, smoothing: f64) -> std::result::Result<RunRecord, String> {
        let mut curve = Vec::with_capacity(raw.curve.len());
        for &(step, loss) in &raw.curve {
            if !(step >= 0.0 && step.fract() == 0.0) {
                return Err(format!("curve step {step} is not a non-negative integer"));
            }
            if !(loss.is_finite() && loss > 0.0) {
                return Err(format!("curve loss {loss} must be finite and > 0"));
            }
            curve.push((step as u64, loss));
        }
        if curve.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err("curve steps are not strictly increasing".into());
        }
        if !raw.smoothed && !curve.is_empty() {
            let losses: Vec<f64> = curve.iter().map(|p| p.1).collect();
            let s = smooth_curve(&losses, smoothing).map_err(|e| e.to_string())?;
            for (p, v) in curve.iter_mut().zip(s) {
                p.1 = v;
            }
        }
        let final_loss = match (curve.last(), raw.final_loss, raw.smoothed) {
            (Some(&(_, last)), _, false) => last,
            (_, Some(p), _) => p,
            (Some(&(_, last)), None, true) => last,
            (None, None, _) => return Err("no final_loss and no curve".into()),
        };
        if !final_loss.is_finite() {
            return Err(format!("final_loss {final_loss} is not finite"));
        }
        raw.config.validate().map_err(|e| e.to_string())?;
        Ok(RunRecord {
            run_id: raw.run_id,
            config: raw.config,
            curve,
            final_loss,
            finished: raw.finished,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParsedRuns {
    pub runs: Vec<RunRecord>,
    /// `(1-based line number, message)` for lines that could not be parsed.
    pub malformed: Vec<(usize, String)>,
}

/// Parses a JSON-lines run log. Raw curves are EMA-smoothed with `smoothing` and the
/// final loss is taken from the smoothed tail.
pub fn parse_runs_str(text: &str, smoothing: f64) -> Result<ParsedRuns> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let results: Vec<(usize, std::result::Result<RunRecord, String>)> = lines
        .par_iter()
        .map(|&(no, line)| {
            let parsed = serde_json::from_str::<RawRun>(line)
                .map_err(|e| e.to_string())
                .and_then(|raw| RunRecord::from_raw(raw, smoothing));
            (no, parsed)
        })
        .collect();
    let mut out = ParsedRuns::default();
    for (no, r) in results {
        match r {
            Ok(run) => out.runs.push(run),
            Err(msg) => out.malformed.push((no, msg)),
        }
    }
    if !lines.is_empty() && out.malformed.len() * 2 > lines.len() {
        let (no, msg) = &out.malformed[0];
        return Err(Error::Format(format!(
            "{} of {} lines malformed (first at line {no}: {msg})",
            out.malformed.len(),
            lines.len()
        )));
    }
    Ok(out)
}

pub fn parse_runs(path: &Path, smoothing: f64) -> Result<ParsedRuns> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_runs_str(&text, smoothing)
}

pub fn write_runs(path: &Path, runs: &[RunRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in runs {
        writeln!(w, "{}", r.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Exponential moving average `s₀ = x₀`, `sₜ = c·sₜ₋₁ + (1 − c)·xₜ`.
pub fn smooth_curve<T: Scalar>(curve: &[T], coeff: T) -> Result<Vec<T>> {
    if curve.is_empty() {
        return Err(Error::Argument("cannot smooth an empty curve".into()));
    }
    if !(coeff >= T::zero() && coeff < T::one()) {
        return Err(Error::Argument(format!("smoothing coefficient {coeff} outside [0, 1)")));
    }
    let mut out = Vec::with_capacity(curve.len());
    let mut s = curve[0];
    out.push(s);
    for &x in &curve[1..] {
        s = coeff * s + (T::one() - coeff) * x;
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterParams {
    /// Runs with final loss above this are diverged.
    pub divergence_loss: f64,
    /// Runs further than this above the best run at the same (N, D) are diverged.
    pub gap_to_best: f64,
    /// Maximum allowed average loss slope (Δloss / Δstep) over any window.
    pub max_slope: f64,
    /// Window length as a fraction of the logged curve.
    pub window_frac: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            divergence_loss: 4.0,
            gap_to_best: 0.3,
            max_slope: 0.001,
            window_frac: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum RejectReason {
    Unfinished,
    Diverged { final_loss: f64 },
    GapAboveBest { gap: f64 },
    Unstable { slope: f64, window_start: u64 },
}

impl RejectReason {
    pub fn rule(&self) -> &'static str {
        match self {
            RejectReason::Unfinished => "unfinished",
            RejectReason::Diverged { .. } => "diverged",
            RejectReason::GapAboveBest { .. } => "gap_above_best",
            RejectReason::Unstable { .. } => "unstable",
        }
    }
}

/// (N, D) rounded to 0.1M parameters and 0.1B tokens.
pub type SizeKey = (i64, i64);

pub fn size_key(c: &RunConfig) -> SizeKey {
    ((c.model_size * 10.0).round() as i64, (c.data_size * 10.0).round() as i64)
}

/// Steepest average slope over sliding windows of `⌈window_frac · len⌉` logged points.
pub fn max_window_slope(curve: &[(u64, f64)], window_frac: f64) -> Option<(f64, u64)> {
    if curve.len() < 2 {
        return None;
    }
    let w = ((window_frac * curve.len() as f64).ceil() as usize).clamp(2, curve.len());
    curve
        .windows(w)
        .map(|win| {
            let (s0, l0) = win[0];
            let (s1, l1) = win[w - 1];
            ((l1 - l0) / (s1 - s0) as f64, s0)
        })
        .fold(None, |best: Option<(f64, u64)>, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        })
}

#[derive(Clone, Debug, Default)]
pub struct FilterOutcome {
    pub kept: Vec<RunRecord>,
    pub rejected: Vec<(RunRecord, RejectReason)>,
}

impl FilterOutcome {
    pub fn counts_by_rule(&self) -> BTreeMap<&'static str, usize> {
        let mut m: BTreeMap<&'static str, usize> =
            ["unfinished", "diverged", "gap_above_best", "unstable"].iter().map(|r| (*r, 0)).collect();
        for (_, reason) in &self.rejected {
            *m.entry(reason.rule()).or_default() += 1;
        }
        m
    }
}

/// Drops unfinished, diverged and unstable runs. Input order is preserved in both outputs.
pub fn filter_runs(runs: Vec<RunRecord>, params: &FilterParams) -> FilterOutcome {
    let mut best: BTreeMap<SizeKey, f64> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.finished) {
        let e = best.entry(size_key(&r.config)).or_insert(f64::INFINITY);
        *e = e.min(r.final_loss);
    }
    let reasons: Vec<Option<RejectReason>> = runs
        .par_iter()
        .map(|r| {
            if !r.finished {
                return Some(RejectReason::Unfinished);
            }
            if !(r.final_loss <= params.divergence_loss) {
                return Some(RejectReason::Diverged { final_loss: r.final_loss });
            }
            let gap = r.final_loss - best[&size_key(&r.config)];
            if gap > params.gap_to_best {
                return Some(RejectReason::GapAboveBest { gap });
            }
            match max_window_slope(&r.curve, params.window_frac) {
                Some((slope, window_start)) if slope > params.max_slope => {
                    Some(RejectReason::Unstable { slope, window_start })
                }
                _ => None,
            }
        })
        .collect();
    let mut out = FilterOutcome::default();
    for (r, reason) in runs.into_iter().zip(reasons) {
        match reason {
            Some(reason) => out.rejected.push((r, reason)),
            None => out.kept.push(r),
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitParams {
    /// Runs with model size strictly above this (millions) go to the OOD split.
    pub ood_threshold: f64,
    /// Fraction of in-distribution groups assigned to training.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            ood_threshold: 430.0,
            ratio: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub train: Vec<RunRecord>,
    pub id_val: Vec<RunRecord>,
    pub ood_val: Vec<RunRecord>,
    pub ood_threshold: f64,
    pub ratio: f64,
    pub seed: u64,
}

pub type GroupKey = (String, i64, i64);

pub fn group_key(c: &RunConfig) -> GroupKey {
    let (n, d) = size_key(c);
    (c.optimizer.clone(), n, d)
}

/// Assigns OOD runs by model size, then whole (optimizer, N, D) groups to train or
/// ID validation. The ratio applies to the number of groups.
pub fn split_dataset(runs: &[RunRecord], params: &SplitParams) -> Result<DatasetSplits> {
    if !(params.ratio > 0.0 && params.ratio < 1.0) {
        return Err(Error::Argument(format!("split ratio {} outside (0, 1)", params.ratio)));
    }
    let mut ood_val = Vec::new();
    let mut groups: BTreeMap<GroupKey, Vec<RunRecord>> = BTreeMap::new();
    for r in runs {
        if r.config.model_size > params.ood_threshold {
            ood_val.push(r.clone());
        } else {
            groups.entry(group_key(&r.config)).or_default().push(r.clone());
        }
    }
    if groups.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 (optimizer, N, D) groups below the OOD threshold, found {}",
            groups.len()
        )));
    }
    let mut keys: Vec<GroupKey> = groups.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    keys.shuffle(&mut rng);
    let n_train = ((params.ratio * keys.len() as f64).round() as usize).clamp(1, keys.len() - 1);
    let train_keys: std::collections::BTreeSet<GroupKey> = keys[..n_train].iter().cloned().collect();

    let mut train = Vec::new();
    let mut id_val = Vec::new();
    for (key, members) in groups {
        if train_keys.contains(&key) {
            train.extend(members);
        } else {
            id_val.extend(members);
        }
    }
    Ok(DatasetSplits {
        train,
        id_val,
        ood_val,
        ood_threshold: params.ood_threshold,
        ratio: params.ratio,
        seed: params.seed,
    })
}

impl DatasetSplits {
    fn header(&self, split: &str, rejections: &BTreeMap<&'static str, usize>) -> String {
        let mut h = String::new();
        let _ = writeln!(h, "# split\t{split}");
        let _ = writeln!(h, "# seed\t{}", self.seed);
        let _ = writeln!(h, "# ood_threshold\t{}", self.ood_threshold);
        let _ = writeln!(h, "# ratio\t{}", self.ratio);
        for (rule, n) in rejections {
            let _ = writeln!(h, "# rejected.{rule}\t{n}");
        }
        h
    }

    /// Writes `train.ids`, `id_val.ids` and `ood_val.ids` into `dir`.
    pub fn write_manifests(&self, dir: &Path, rejections: &BTreeMap<&'static str, usize>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, runs) in [("train", &self.train), ("id_val", &self.id_val), ("ood_val", &self.ood_val)] {
            let mut text = self.header(name, rejections);
            for r in runs {
                text.push_str(&r.run_id);
                text.push('\n');
            }
            let path = dir.join(format!("{name}.ids"));
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Rebuilds splits from manifests written by [`DatasetSplits::write_manifests`].
    pub fn from_manifests(dir: &Path, runs: &[RunRecord]) -> Result<DatasetSplits> {
        let by_id: BTreeMap<&str, &RunRecord> = runs.iter().map(|r| (r.run_id.as_str(), r)).collect();
        let mut header = BTreeMap::new();
        let mut load = |name: &str| -> Result<Vec<RunRecord>> {
            let path = dir.join(format!("{name}.ids"));
            let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut out = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let line = line.trim();
                if let Some(meta) = line.strip_prefix("# ") {
                    if let Some((k, v)) = meta.split_once('\t') {
                        header.insert(k.to_string(), v.to_string());
                    }
                    continue;
                }
                if line.is_empty() {
                    continue;
                }
                let run = by_id
                    .get(line)
                    .ok_or_else(|| Error::Split(format!("{name}.ids lists unknown run `{line}`")))?;
                out.push((*run).clone());
            }
            Ok(out)
        };
        let train = load("train")?;
        let id_val = load("id_val")?;
        let ood_val = load("ood_val")?;
        let num = |k: &str, default: f64| header.get(k).and_then(|v| v.parse().ok()).unwrap_or(default);
        Ok(DatasetSplits {
            train,
            id_val,
            ood_val,
            ood_threshold: num("ood_threshold", 430.0),
            ratio: num("ratio", 0.8),
            seed: num("seed", 0.0) as u64,
        })
    }
}
