use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use confscale::eval::{export_contour_data, report_tsv, ContourOptions, ReportRow};
use confscale::gbt::GBT_FORMAT;
use confscale::ingest::{filter_runs, parse_runs, split_dataset, write_runs};
use confscale::lawfit::{fit_baselines, fit_power_law, select_best_per_group};
use confscale::regressor::checkpoint::CHECKPOINT_FORMAT;
use confscale::regressor::{checkpoint_from_str, save_checkpoint, train};
use confscale::schema::dump_table;
use confscale::select::derive_config;
use confscale::{
    compute_metrics, evaluate_split, generate_synthetic_runs, recommend, BaselinePredictor, ChinchillaFit, DatasetSplits,
    Error, GbtPredictor, LossPredictor, OracleParams, Predictor, Result, RunConfig, RunRecord, Scope, SweepGrid,
    TargetKind, Warmup,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{Method, PipelineConfig, Target};
use crate::{Command, Common};

const RUNS: &str = "runs.jsonl";
const BASELINES: &str = "baselines.json";

pub fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Schema { output } => schema(output.as_deref()),
        Command::Synth { common, output } => {
            let cfg = resolve(&common)?;
            synth(&cfg, &output)
        }
        Command::Ingest { common, input, output } => {
            let cfg = resolve(&common)?;
            ingest(&cfg, &input, &output)
        }
        Command::Split { common, input, output, ood_threshold, split_ratio } => {
            let mut cfg = resolve(&common)?;
            if let Some(t) = ood_threshold {
                cfg.split.ood_threshold = t;
            }
            if let Some(r) = split_ratio {
                cfg.split.ratio = r;
            }
            split(&cfg, &input, output.as_deref().unwrap_or(&input))
        }
        Command::Fit { common, input, output } => {
            let cfg = resolve(&common)?;
            fit(&cfg, &input, output.as_deref().unwrap_or(&input))
        }
        Command::Train { common, input, output, method, target } => {
            let mut cfg = resolve(&common)?;
            cfg.train.method = method.unwrap_or(cfg.train.method);
            cfg.train.target = target.unwrap_or(cfg.train.target);
            train_cmd(&cfg, &input, output.as_deref().unwrap_or(&input))
        }
        Command::Predict { common, model, input, output } => {
            let cfg = resolve(&common)?;
            predict(&cfg, &model, &input, &output)
        }
        Command::Curve { common, model, input, output, points } => {
            let cfg = resolve(&common)?;
            curve(&cfg, &model, &input, &output, points)
        }
        Command::Sweep { common, model, oracle, n, d, fix, output } => {
            let cfg = resolve(&common)?;
            let source = match (model, oracle) {
                (Some(m), _) => ModelSource::Checkpoint(m),
                (None, Some(o)) => ModelSource::Oracle(o),
                (None, None) => return Err(Error::Argument("sweep needs --model or --oracle".into())),
            };
            sweep_cmd(&cfg, &source, n, d, &fix, &output)
        }
        Command::Eval { common, pred, truth, input, model, output } => {
            let cfg = resolve(&common)?;
            match (pred, truth, input) {
                (Some(p), Some(t), _) => eval_files(&cfg, &p, &t, output.as_deref()),
                (_, _, Some(dir)) => eval_models(&cfg, &dir, &model, output.as_deref().unwrap_or(&dir)),
                _ => Err(Error::Argument("eval needs --pred and --truth, or --input and --model".into())),
            }
        }
    }
}

fn resolve(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Format(e.to_string()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn schema(output: Option<&Path>) -> Result<String> {
    let table = dump_table();
    match output {
        Some(dir) => {
            write(&dir.join("schema.tsv"), &table)?;
            Ok(format!("schema written to {}", dir.join("schema.tsv").display()))
        }
        None => Ok(table.trim_end().to_string()),
    }
}

fn synth(cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let runs = generate_synthetic_runs(&cfg.synth.oracle, &cfg.synth.design, cfg.synth.seed)?;
    ensure_dir(out)?;
    write_runs(&out.join(RUNS), &runs)?;
    cfg.synth.oracle.save(&out.join("oracle.json"))?;
    cfg.write_resolved(out, "synth")?;
    Ok(format!("synth: {} runs over {} (N, D) pairs -> {}", runs.len(), cfg.synth.design.sizes.len(), out.display()))
}

fn ingest(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<String> {
    let parsed = parse_runs(input, cfg.ingest.smoothing)?;
    let outcome = filter_runs(parsed.runs, &cfg.ingest.filter);
    ensure_dir(out)?;
    write_runs(&out.join(RUNS), &outcome.kept)?;
    let mut rejected = String::new();
    for (r, reason) in &outcome.rejected {
        let line = serde_json::json!({ "run_id": r.run_id, "reason": reason });
        rejected.push_str(&line.to_string());
        rejected.push('\n');
    }
    write(&out.join("rejected.jsonl"), &rejected)?;
    let counts = outcome.counts_by_rule();
    write(&out.join("rejections.json"), &to_json(&counts)?)?;
    let mut malformed = String::new();
    for (line, msg) in &parsed.malformed {
        let _ = writeln!(malformed, "{line}\t{msg}");
    }
    write(&out.join("malformed.tsv"), &malformed)?;
    cfg.write_resolved(out, "ingest")?;
    Ok(format!(
        "ingest: kept {} runs, rejected {} ({}), {} malformed lines",
        outcome.kept.len(),
        outcome.rejected.len(),
        counts.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "),
        parsed.malformed.len()
    ))
}

fn load_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    // Ingested runs are already smoothed and marked as such.
    Ok(parse_runs(&dir.join(RUNS), 0.0)?.runs)
}

fn load_splits(dir: &Path) -> Result<DatasetSplits> {
    DatasetSplits::from_manifests(dir, &load_runs(dir)?)
}

fn split(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<String> {
    let runs = load_runs(input)?;
    let splits = split_dataset(&runs, &cfg.split)?;
    let counts: BTreeMap<String, usize> = match std::fs::read_to_string(input.join("rejections.json")) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Format(format!("rejections.json: {e}")))?,
        Err(_) => BTreeMap::new(),
    };
    let rules = ["unfinished", "diverged", "gap_above_best", "unstable"];
    let counts: BTreeMap<&'static str, usize> =
        rules.iter().filter_map(|r| counts.get(*r).map(|n| (*r, *n))).collect();
    splits.write_manifests(out, &counts)?;
    cfg.write_resolved(out, "split")?;
    Ok(format!(
        "split: train {} / id_val {} / ood_val {} (N > {} is OOD)",
        splits.train.len(),
        splits.id_val.len(),
        splits.ood_val.len(),
        cfg.split.ood_threshold
    ))
}

fn load_baselines(dir: &Path) -> Result<BTreeMap<Scope, ChinchillaFit>> {
    let path = dir.join(BASELINES);
    let fits: Vec<ChinchillaFit> =
        serde_json::from_str(&read_text(&path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(fits.into_iter().map(|f| (f.scope.clone(), f)).collect())
}

fn fit(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<String> {
    let splits = load_splits(input)?;
    let baselines = fit_baselines(&splits.train, cfg.fit.per_optimizer, &cfg.fit.options)?;
    let fits: Vec<&ChinchillaFit> = baselines.values().collect();
    write(&out.join(BASELINES), &to_json(&fits)?)?;
    // Optimal-hyperparameter power laws per scope; scopes with too few points are skipped.
    let mut laws = BTreeMap::new();
    for scope in baselines.keys() {
        if let Ok(law) = fit_power_law(&select_best_per_group(&splits.train, scope)) {
            laws.insert(scope.to_string(), law);
        }
    }
    write(&out.join("power_laws.json"), &to_json(&laws)?)?;
    cfg.write_resolved(out, "fit")?;
    let desc: Vec<String> = fits
        .iter()
        .map(|f| {
            format!(
                "{}: E={:.4} A={:.4} B={:.4} alpha={:.4} beta={:.4} ({} points)",
                f.scope, f.law.e, f.law.a, f.law.b, f.law.alpha, f.law.beta, f.n_points
            )
        })
        .collect();
    Ok(format!("fit: {}", desc.join("; ")))
}

fn model_file(method: Method, target: Target) -> &'static str {
    match (method, target) {
        (Method::Gbt, _) => "gbt.json",
        (Method::Nn, Target::Final) => "model.json",
        (Method::Nn, Target::Curve) => "curve_model.json",
    }
}

fn train_cmd(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<String> {
    let splits = load_splits(input)?;
    let baselines = load_baselines(input)?;
    let t = &cfg.train;
    ensure_dir(out)?;
    let stem = model_file(t.method, t.target).trim_end_matches(".json");
    let path = out.join(model_file(t.method, t.target));
    let summary = match t.method {
        Method::Gbt => {
            if t.target == Target::Curve {
                return Err(Error::Argument("the GBT baseline predicts final losses only".into()));
            }
            let g = GbtPredictor::fit(&splits, &baselines, &t.gbt)?;
            g.save(&path)?;
            format!("train: gbt with {} trees", g.forest.trees.len())
        }
        Method::Nn => {
            let (kind, arch) = match t.target {
                Target::Final => (TargetKind::FinalLoss, t.architecture.clone()),
                Target::Curve => (TargetKind::CurvePoint, t.architecture.clone().with_frac(true)),
            };
            let p: Predictor = train(&splits, &t.plan, &arch, &baselines, kind)?;
            save_checkpoint(&p, &path)?;
            write(&out.join(format!("{stem}.report.json")), &to_json(&p.report)?)?;
            format!(
                "train: {} parameters on {} examples, final train mse {:.3e}",
                p.report.parameter_count,
                p.report.train_examples,
                p.report.stage2_train_mse.or(p.report.stage1_train_mse).unwrap_or(f64::NAN)
            )
        }
    };
    // Named after the model so that several trained models can share a directory.
    cfg.write_resolved(out, stem)?;
    Ok(format!("{summary} -> {}", path.display()))
}

enum AnyModel {
    Nn(Predictor),
    Gbt(GbtPredictor),
    Oracle(OracleParams),
}

impl AnyModel {
    fn load(path: &Path) -> Result<AnyModel> {
        let text = read_text(path)?;
        let head: Value =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        match head.get("format").and_then(Value::as_str) {
            Some(f) if f == CHECKPOINT_FORMAT => Ok(AnyModel::Nn(checkpoint_from_str(&text)?)),
            Some(f) if f == GBT_FORMAT => Ok(AnyModel::Gbt(GbtPredictor::from_checkpoint_str(&text)?)),
            other => Err(Error::Format(format!("{}: unknown model format {other:?}", path.display()))),
        }
    }

    fn predictor(&self) -> &dyn LossPredictor {
        match self {
            AnyModel::Nn(p) => p,
            AnyModel::Gbt(g) => g,
            AnyModel::Oracle(o) => o,
        }
    }

    fn baselines(&self) -> Option<&BTreeMap<Scope, ChinchillaFit>> {
        match self {
            AnyModel::Nn(p) => Some(&p.baselines),
            AnyModel::Gbt(g) => Some(&g.baselines),
            AnyModel::Oracle(_) => None,
        }
    }
}

/// Configurations from a JSON-lines file, with their `run_id` when present.
fn read_configs(path: &Path) -> Result<Vec<(Option<String>, RunConfig)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let id = v.get("run_id").and_then(Value::as_str).map(str::to_string);
        let c: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        c.validate()?;
        out.push((id, c.normalized()));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    #[serde(skip_serializing_if = "Option::is_none")]
    run_id: Option<String>,
    predicted_loss: f64,
}

fn predict(cfg: &PipelineConfig, model: &Path, input: &Path, out: &Path) -> Result<String> {
    let m = AnyModel::load(model)?;
    let rows = read_configs(input)?;
    let configs: Vec<RunConfig> = rows.iter().map(|(_, c)| c.clone()).collect();
    let losses = m.predictor().predict_losses(&configs).into_iter().collect::<Result<Vec<_>>>()?;
    let mut text = String::new();
    for ((id, _), loss) in rows.into_iter().zip(&losses) {
        let line = PredictionLine { run_id: id, predicted_loss: *loss };
        text.push_str(&serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    write(&out.join("predictions.jsonl"), &text)?;
    cfg.write_resolved(out, "predict")?;
    Ok(format!("predict: {} configurations -> {}", losses.len(), out.join("predictions.jsonl").display()))
}

fn curve(cfg: &PipelineConfig, model: &Path, input: &Path, out: &Path, points: usize) -> Result<String> {
    if points == 0 {
        return Err(Error::Argument("--points must be positive".into()));
    }
    let AnyModel::Nn(p) = AnyModel::load(model)? else {
        return Err(Error::Argument("curve prediction needs a regressor checkpoint".into()));
    };
    let fracs: Vec<f64> = (1..=points).map(|k| k as f64 / points as f64).collect();
    let mut text = String::new();
    let rows = read_configs(input)?;
    for (id, c) in &rows {
        let curve = p.predict_curve(c, &fracs)?;
        let line = serde_json::json!({ "run_id": id, "curve": curve });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    write(&out.join("curves.jsonl"), &text)?;
    cfg.write_resolved(out, "curve")?;
    Ok(format!("curve: {} curves of {points} points -> {}", rows.len(), out.join("curves.jsonl").display()))
}

enum ModelSource {
    Checkpoint(PathBuf),
    Oracle(PathBuf),
}

fn sweep_cmd(cfg: &PipelineConfig, source: &ModelSource, n: f64, d: f64, fix: &[String], out: &Path) -> Result<String> {
    let m = match source {
        ModelSource::Checkpoint(p) => AnyModel::load(p)?,
        ModelSource::Oracle(p) => AnyModel::Oracle(OracleParams::load(p)?),
    };
    let constraints = fix
        .iter()
        .map(|f| {
            f.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Argument(format!("--fix expects FIELD=VALUE, got `{f}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let s = &cfg.sweep;
    let design = &cfg.synth.design;
    let mut base = confscale::synth::synthetic_config(design, n, d, &s.optimizer, 1e-3, 256, s.weight_decay);
    base.source = s.source.clone();
    base.warmup = Some(Warmup::Ratio(design.warmup_ratio));
    let grid = SweepGrid { base: derive_config(&base, base.clone())?, axes: s.axes.clone() };
    let rec = recommend(m.predictor(), n, d, &grid, &constraints)?;

    write(&out.join("recommendation.json"), &to_json(&rec)?)?;
    let mut tsv = String::from("rank\tindex\tpeak_lr\tbatch_size\tweight_decay\toptimizer\tpredicted_loss\n");
    for (rank, p) in rec.surface.iter().enumerate() {
        let _ = writeln!(
            tsv,
            "{rank}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.index,
            p.config.peak_lr,
            p.config.batch_size,
            p.config.weight_decay.map_or("-".to_string(), |w| w.to_string()),
            p.config.optimizer,
            p.loss
        );
    }
    write(&out.join("surface.tsv"), &tsv)?;
    let triples: Vec<(f64, f64, f64)> =
        rec.surface.iter().map(|p| (p.config.peak_lr, p.config.batch_size as f64, p.loss)).collect();
    // A contour needs both axes free; fixed batch sizes leave a line instead.
    if let Ok(grid) = export_contour_data(&triples, &ContourOptions::default()) {
        let mut c = String::from("log_lr\tlog_batch_size\tloss\n");
        for (x, y, z) in grid.triples() {
            let _ = writeln!(c, "{x}\t{y}\t{z}");
        }
        write(&out.join("contour.tsv"), &c)?;
    }
    cfg.write_resolved(out, "sweep")?;
    let r = &rec.recommended_config;
    Ok(format!(
        "sweep: {} points; grid best lr {:.4e} bs {} loss {:.5}; recommended lr {:.4e} bs {} loss {:.5}{}",
        rec.surface.len(),
        rec.best_grid_config.peak_lr,
        rec.best_grid_config.batch_size,
        rec.best_grid_loss,
        r.peak_lr,
        r.batch_size,
        rec.recommended_loss,
        rec.refinement.note.as_ref().map(|n| format!(" ({n})")).unwrap_or_default()
    ))
}

/// `run_id → loss`, taking `predicted_loss` when present and `final_loss` otherwise.
fn read_losses(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = read_text(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let where_ = || format!("{}:{}", path.display(), i + 1);
        let v: Value = serde_json::from_str(line).map_err(|e| Error::Format(format!("{}: {e}", where_())))?;
        let id = v
            .get("run_id")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format(format!("{}: missing run_id", where_())))?;
        let loss = ["predicted_loss", "final_loss", "loss"]
            .iter()
            .find_map(|k| v.get(*k).and_then(Value::as_f64))
            .ok_or_else(|| Error::Format(format!("{}: no loss value", where_())))?;
        if out.insert(id.to_string(), loss).is_some() {
            return Err(Error::Format(format!("{}: duplicate run_id `{id}`", where_())));
        }
    }
    Ok(out)
}

fn eval_files(cfg: &PipelineConfig, pred: &Path, truth: &Path, out: Option<&Path>) -> Result<String> {
    let p = read_losses(pred)?;
    let t = read_losses(truth)?;
    let mut pv = Vec::new();
    let mut tv = Vec::new();
    for (id, loss) in &p {
        let truth = t.get(id).ok_or_else(|| Error::Argument(format!("prediction for unknown run `{id}`")))?;
        pv.push(*loss);
        tv.push(*truth);
    }
    let m = compute_metrics(&pv, &tv)?;
    if let Some(dir) = out {
        write(&dir.join("metrics.json"), &to_json(&m)?)?;
        cfg.write_resolved(dir, "eval")?;
    }
    Ok(format!("eval: {}{}", fmt_metrics(&m), target_note(cfg, &m)))
}

fn fmt_metrics(m: &confscale::Metrics) -> String {
    let rho = m.spearman_rho.map_or("undefined".to_string(), |r| format!("{r:.4}"));
    format!("n={} mae={:.6} rmse={:.6} spearman={rho}", m.n, m.mae, m.rmse)
}

fn target_note(cfg: &PipelineConfig, m: &confscale::Metrics) -> String {
    let mut misses = Vec::new();
    if let Some(max) = cfg.eval.max_mae {
        if m.mae > max {
            misses.push(format!("mae above {max}"));
        }
    }
    if let Some(min) = cfg.eval.min_spearman {
        if m.spearman_rho.is_none_or(|r| r < min) {
            misses.push(format!("spearman below {min}"));
        }
    }
    if misses.is_empty() {
        String::new()
    } else {
        format!(" [target missed: {}]", misses.join(", "))
    }
}

fn eval_models(cfg: &PipelineConfig, dir: &Path, models: &[PathBuf], out: &Path) -> Result<String> {
    let splits = load_splits(dir)?;
    let baselines = match load_baselines(dir) {
        Ok(b) => b,
        Err(_) => models
            .iter()
            .find_map(|m| AnyModel::load(m).ok().and_then(|m| m.baselines().cloned()))
            .ok_or_else(|| Error::Argument(format!("no {BASELINES} in {} and no model with baselines", dir.display())))?,
    };
    let dataset = splits
        .train
        .first()
        .or(splits.id_val.first())
        .map_or_else(|| "unknown".to_string(), |r| r.config.source.clone());
    let mut entries: Vec<(String, Box<dyn LossPredictor>)> =
        vec![("chinchilla".into(), Box::new(BaselinePredictor { baselines }))];
    for path in models {
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let m: Box<dyn LossPredictor> = match AnyModel::load(path)? {
            AnyModel::Nn(p) => Box::new(p),
            AnyModel::Gbt(g) => Box::new(g),
            AnyModel::Oracle(o) => Box::new(o),
        };
        entries.push((name, m));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (name, p) in &entries {
        for (split, runs) in [("id", &splits.id_val), ("ood", &splits.ood_val)] {
            if runs.is_empty() {
                continue;
            }
            let m = evaluate_split(p.as_ref(), runs)?;
            summary.push(format!("{name}/{split} {}{}", fmt_metrics(&m), target_note(cfg, &m)));
            rows.push(ReportRow { dataset: dataset.clone(), split: split.into(), method: name.clone(), metrics: m });
        }
    }
    write(&out.join("report.tsv"), &report_tsv(&rows))?;
    cfg.write_resolved(out, "eval")?;
    Ok(format!("eval:\n  {}", summary.join("\n  ")))
}
