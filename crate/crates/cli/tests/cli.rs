use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use confscale::ingest::{filter_runs, split_dataset};
use confscale::lawfit::fit_baselines;
use confscale::regressor::train;
use confscale::*;

const SMALL: &str = r#"
[synth.design]
source = "synthetic"
sizes = [[130.0, 5.0], [130.0, 20.0], [180.0, 10.0], [268.0, 5.0], [268.0, 20.0], [340.0, 10.0], [430.0, 40.0], [520.0, 10.0], [1073.0, 20.0]]
runs_per_pair = 40
optimizers = ["adamw", "lion"]
lr_grid = [1.5e-4, 3e-4, 6e-4, 1.2e-3, 2.4e-3, 4.8e-3]
batch_grid = [64, 128, 256, 512, 1024]
wd_grid = [0.0, 0.1, 0.2, 0.4, 0.6, 0.9]
seq_len = 2048
warmup_ratio = 0.01
curve_points = 50

[train.plan]
stage1 = { epochs = 3, peak_lr = 1e-3, warmup = { kind = "ratio", ratio = 0.1 } }
stage2 = { epochs = 15, peak_lr = 1e-3, warmup = { kind = "ratio", ratio = 0.1 } }
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
weight_decay = 0.01
batch_size = 64
seed = 0
reset_optimizer_state = true
curve_points = 10

[train.gbt]
rounds = 50
max_depth = 4
learning_rate = 0.1
min_leaf = 3
"#;

fn confscale(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confscale")).current_dir(dir).args(args).output().expect("spawn confscale")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = confscale(dir, args);
    assert!(
        out.status.success(),
        "confscale {args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    (tmp, cfg)
}

#[test]
fn schema_prints_the_field_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["schema"]);
    assert!(out.starts_with("# schema_version"));
    for name in ["source", "peak_lr", "warmup_unit", "optimizer_extras"] {
        assert!(out.lines().any(|l| l.split('\t').nth(1) == Some(name)), "{name} missing");
    }
    ok(tmp.path(), &["schema", "--output", "s"]);
    assert_eq!(std::fs::read_to_string(tmp.path().join("s/schema.tsv")).unwrap().trim_end(), out.trim_end());
}

#[test]
fn usage_and_pipeline_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(confscale(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(confscale(tmp.path(), &["fit", "--bogus-flag"]).status.code(), Some(2));
    let out = confscale(tmp.path(), &["fit", "--input", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[lawfit]: "));
}

#[test]
fn eval_on_identical_files_reports_zero_mae() {
    let (tmp, cfg) = workspace();
    let cfg = cfg.to_str().unwrap();
    ok(tmp.path(), &["synth", "--config", cfg, "--output", "data"]);
    let out = ok(tmp.path(), &["eval", "--pred", "data/runs.jsonl", "--truth", "data/runs.jsonl", "--output", "ev"]);
    assert!(out.contains("mae=0.000000"), "{out}");
    let m: Metrics = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(m.mae, 0.0);
    assert_eq!(m.n, 360);
}

#[test]
fn sweep_with_fixed_batch_size_keeps_only_that_batch() {
    let (tmp, cfg) = workspace();
    let cfg = cfg.to_str().unwrap();
    ok(tmp.path(), &["synth", "--config", cfg, "--output", "data"]);
    ok(tmp.path(), &["sweep", "--oracle", "data/oracle.json", "--n", "520", "--d", "10", "--fix", "batch_size=1024", "--output", "sw"]);
    let surface = std::fs::read_to_string(tmp.path().join("sw/surface.tsv")).unwrap();
    let batches: Vec<&str> = surface.lines().skip(1).map(|l| l.split('\t').nth(3).unwrap()).collect();
    assert_eq!(batches.len(), 11);
    assert!(batches.iter().all(|b| *b == "1024"), "{batches:?}");
    let rec: Recommendation =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("sw/recommendation.json")).unwrap()).unwrap();
    assert_eq!(rec.recommended_config.batch_size, 1024);
    assert!(tmp.path().join("sw/sweep.config.toml").exists());
}

#[test]
fn full_pipeline_matches_the_library_and_is_reproducible() {
    let (tmp, cfg_path) = workspace();
    let cfg = cfg_path.to_str().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--config", cfg, "--seed", "5", "--output", "data"]);
    ok(dir, &["ingest", "--config", cfg, "--input", "data/runs.jsonl", "--output", "ds", "--format", "jsonl"]);
    ok(dir, &["split", "--config", cfg, "--seed", "5", "--input", "ds", "--ood-threshold", "430", "--split-ratio", "0.8"]);
    ok(dir, &["fit", "--config", cfg, "--input", "ds"]);
    ok(dir, &["train", "--config", cfg, "--seed", "5", "--input", "ds"]);
    ok(dir, &["train", "--config", cfg, "--input", "ds", "--method", "gbt"]);
    ok(dir, &["eval", "--config", cfg, "--input", "ds", "--model", "ds/model.json", "--model", "ds/gbt.json"]);

    // Same pipeline through the library.
    let text = std::fs::read_to_string(&cfg_path).unwrap();
    let v: toml::Value = toml::from_str(&text).unwrap();
    let design: SynthDesign = v["synth"]["design"].clone().try_into().unwrap();
    let mut plan: TrainPlan = v["train"]["plan"].clone().try_into().unwrap();
    plan.seed = 5;
    let gbt_params: GbtParams = v["train"]["gbt"].clone().try_into().unwrap();
    let runs = generate_synthetic_runs(&OracleParams::default(), &design, 5).unwrap();
    let kept = filter_runs(runs, &FilterParams::default()).kept;
    let splits = split_dataset(&kept, &SplitParams { seed: 5, ..Default::default() }).unwrap();
    let baselines = fit_baselines(&splits.train, false, &ChinchillaFitOptions::default()).unwrap();
    let nn: Predictor = train(&splits, &plan, &Architecture::compact(), &baselines, TargetKind::FinalLoss).unwrap();
    let gbt = GbtPredictor::fit(&splits, &baselines, &gbt_params).unwrap();
    let base = BaselinePredictor { baselines };

    let report = std::fs::read_to_string(dir.join("ds/report.tsv")).unwrap();
    let expect: [(&str, &dyn LossPredictor); 3] = [("chinchilla", &base), ("model", &nn), ("gbt", &gbt)];
    for (name, p) in expect {
        for (split, runs) in [("id", &splits.id_val), ("ood", &splits.ood_val)] {
            let m = evaluate_split(p, runs).unwrap();
            let row = report
                .lines()
                .find(|l| {
                    let f: Vec<&str> = l.split('\t').collect();
                    f.get(1) == Some(&split) && f.get(2) == Some(&name)
                })
                .unwrap_or_else(|| panic!("no {name}/{split} row in\n{report}"));
            let mae: f64 = row.split('\t').nth(4).unwrap().parse().unwrap();
            assert!((mae - m.mae).abs() < 1e-6, "{name}/{split}: cli {mae} vs library {}", m.mae);
        }
    }
    let base_id = evaluate_split(&base, &splits.id_val).unwrap().mae;
    assert!(evaluate_split(&nn, &splits.id_val).unwrap().mae < base_id);

    // Rerunning with the same resolved config gives byte-identical artifacts.
    ok(dir, &["train", "--config", "ds/model.config.toml", "--input", "ds", "--output", "again"]);
    assert_eq!(std::fs::read(dir.join("ds/model.json")).unwrap(), std::fs::read(dir.join("again/model.json")).unwrap());

    // Predictions and curves from the trained artifacts.
    ok(dir, &["predict", "--model", "ds/model.json", "--input", "ds/runs.jsonl", "--output", "pr"]);
    let out = ok(dir, &["eval", "--pred", "pr/predictions.jsonl", "--truth", "ds/runs.jsonl"]);
    assert!(out.starts_with("eval: n="), "{out}");
    ok(dir, &["train", "--config", cfg, "--input", "ds", "--target", "curve"]);
    ok(dir, &["curve", "--model", "ds/curve_model.json", "--input", "ds/runs.jsonl", "--output", "cv", "--points", "5"]);
    let first = std::fs::read_to_string(dir.join("cv/curves.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(line["curve"].as_array().unwrap().len(), 5);
}
