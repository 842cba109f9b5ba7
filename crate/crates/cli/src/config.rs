//! Declarative pipeline configuration read from TOML; command-line flags override it.

use std::path::{Path, PathBuf};

use confscale::ingest::DEFAULT_SMOOTHING;
use confscale::schema::SCHEMA_VERSION;
use confscale::select::AxisScale;
use confscale::{
    Architecture, ChinchillaFitOptions, Error, FilterParams, GbtParams, GridAxis, OracleParams, Result, SplitParams,
    SynthDesign, TrainPlan,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub seed: u64,
    pub design: SynthDesign,
    pub oracle: OracleParams,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { seed: 0, design: SynthDesign::standard(), oracle: OracleParams::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSection {
    pub smoothing: f64,
    pub filter: FilterParams,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection { smoothing: DEFAULT_SMOOTHING, filter: FilterParams::default() }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSection {
    /// One baseline per (source, optimizer) instead of per source.
    pub per_optimizer: bool,
    pub options: ChinchillaFitOptions,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Nn,
    Gbt,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Final,
    Curve,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub method: Method,
    pub target: Target,
    pub plan: TrainPlan,
    pub architecture: Architecture,
    pub gbt: GbtParams,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            method: Method::Nn,
            target: Target::Final,
            plan: TrainPlan::compact(),
            architecture: Architecture::compact(),
            gbt: GbtParams::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub source: String,
    pub optimizer: String,
    pub weight_decay: f64,
    pub axes: Vec<GridAxis>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            source: "synthetic".into(),
            optimizer: "adamw".into(),
            weight_decay: 0.1,
            axes: vec![
                GridAxis::log_spaced("peak_lr", 1.5e-4, 4.8e-3, 11),
                GridAxis::new("batch_size", &[64.0, 96.0, 128.0, 192.0, 256.0, 384.0, 512.0, 768.0, 1024.0], AxisScale::Log),
            ],
        }
    }
}

/// Thresholds checked by `eval`; a miss is reported but does not fail the command.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalTargets {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_spearman: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub paths: Paths,
    pub synth: SynthSection,
    pub ingest: IngestSection,
    pub split: SplitParams,
    pub fit: FitSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub eval: EvalTargets,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            paths: Paths::default(),
            synth: SynthSection::default(),
            ingest: IngestSection::default(),
            split: SplitParams::default(),
            fit: FitSection::default(),
            train: TrainSection::default(),
            sweep: SweepSection::default(),
            eval: EvalTargets::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                field: "schema_version".into(),
                message: format!("config targets schema {}, this build uses {SCHEMA_VERSION}", cfg.schema_version),
            });
        }
        Ok(cfg)
    }

    /// Every seed in the pipeline.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.split.seed = seed;
        self.train.plan.seed = seed;
    }

    /// Writes the resolved config as `<command>.config.toml` in `dir`.
    pub fn write_resolved(&self, dir: &Path, command: &str) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{command}.config.toml"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
