//! Run configuration schema: field typing, unit conventions and the fixed per-field
//! scaling applied before encoding.
//!
//! Units follow the run logs: model size in millions of non-embedding parameters, data
//! size in billions of tokens, batch size in sequences per step. Every numerical field
//! is multiplied by its scale factor so that all fields land in a comparable range
//! before they reach the numerical encoders. The momentum pair, ε and the Kron
//! preconditioner learning rate come from small discrete sets and are categorical;
//! ε is stored by its negative base-10 logarithm.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Number of hash buckets for optimizer extras that have no dedicated field.
pub const EXTRA_BUCKETS: usize = 16;

/// Optimizer extras with a dedicated field, and the optimizer each belongs to.
pub const KNOWN_EXTRAS: &[(&str, &str)] = &[
    ("muon_adam_lr", "muon"),
    ("soap_block_size", "soap"),
    ("kron_precond_lr", "kron"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    Numerical,
    /// Free-form optimizer extras: hashed categorical key plus scaled value.
    HashedPairs,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldSpec {
    pub name: &'static str,
    pub kind: FieldKind,
    /// Multiplier applied before encoding; 1 for non-numerical fields.
    pub scale_factor: f64,
    pub vocabulary: &'static [&'static str],
}

const fn num(name: &'static str, scale_factor: f64) -> FieldSpec {
    FieldSpec {
        name,
        kind: FieldKind::Numerical,
        scale_factor,
        vocabulary: &[],
    }
}

const fn cat(name: &'static str, vocabulary: &'static [&'static str]) -> FieldSpec {
    FieldSpec {
        name,
        kind: FieldKind::Categorical,
        scale_factor: 1.0,
        vocabulary,
    }
}

pub const SOURCES: &[&str] = &["marin", "steplaw", "synthetic"];
pub const OPTIMIZERS: &[&str] = &[
    "adamw", "adam", "muon", "soap", "lion", "mars", "kron", "scion", "nadamw", "nadam",
    "cautious", "sophia", "sgd",
];
pub const LR_SCHEDULES: &[&str] = &["cosine", "linear", "wsd", "constant", "inverse_sqrt"];
pub const WARMUP_UNITS: &[&str] = &["steps", "ratio"];
pub const BETAS: &[&str] = &["0.8", "0.85", "0.9", "0.95", "0.98", "0.99", "0.995", "0.999"];
pub const NEG_LOG_EPSILONS: &[&str] = &[
    "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12", "13", "14", "15", "16",
    "17", "18", "19", "20",
];
pub const KRON_PRECOND_LRS: &[&str] = &["0.01", "0.02", "0.05", "0.1", "0.2", "0.3", "0.5", "1"];

/// Canonical field order. Encoders, checkpoints and the schema dump all follow it.
pub const FIELDS: &[FieldSpec] = &[
    cat("source", SOURCES),
    num("model_size", 1e-2),
    num("num_layers", 1.0),
    num("num_heads", 1.0),
    num("hidden_dim", 1e-2),
    num("data_size", 1.0),
    num("total_steps", 1e-3),
    cat("optimizer", OPTIMIZERS),
    num("peak_lr", 1e4),
    cat("lr_schedule", LR_SCHEDULES),
    num("min_lr", 1e4),
    num("min_lr_ratio", 200.0),
    num("weight_decay", 1e2),
    num("batch_size", 1e-1),
    num("warmup", 1e-2),
    cat("warmup_unit", WARMUP_UNITS),
    num("max_grad_norm", 1.0),
    cat("beta1", BETAS),
    cat("beta2", BETAS),
    cat("epsilon", NEG_LOG_EPSILONS),
    num("muon_adam_lr", 1e4),
    num("soap_block_size", 2e-2),
    cat("kron_precond_lr", KRON_PRECOND_LRS),
    FieldSpec {
        name: "optimizer_extras",
        kind: FieldKind::HashedPairs,
        scale_factor: 1.0,
        vocabulary: &[],
    },
];

/// Ratio of total training steps completed; only present for intermediate-loss targets.
pub const FRAC_FIELD: FieldSpec = num("frac", 1.0);

pub fn field(name: &str) -> Option<&'static FieldSpec> {
    FIELDS.iter().find(|f| f.name == name)
}

pub fn field_index(name: &str) -> Option<usize> {
    FIELDS.iter().position(|f| f.name == name)
}

/// Warmup length, either as a step count or as a ratio of total steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    Steps(f64),
    Ratio(f64),
}

/// Full training configuration of one pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub source: String,
    /// N, millions of non-embedding parameters.
    pub model_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<u32>,
    /// D, billions of tokens.
    pub data_size: f64,
    pub total_steps: u64,
    pub optimizer: String,
    pub peak_lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_lr_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    /// Sequences per optimizer step.
    pub batch_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<Warmup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub optimizer_extras: BTreeMap<String, f64>,
}

impl RunConfig {
    /// A configuration with only the required fields set.
    pub fn minimal(
        source: &str,
        model_size: f64,
        data_size: f64,
        total_steps: u64,
        optimizer: &str,
        peak_lr: f64,
        batch_size: u64,
    ) -> Self {
        RunConfig {
            source: source.to_string(),
            model_size,
            num_layers: None,
            num_heads: None,
            hidden_dim: None,
            data_size,
            total_steps,
            optimizer: optimizer.to_string(),
            peak_lr,
            lr_schedule: None,
            min_lr: None,
            min_lr_ratio: None,
            weight_decay: None,
            batch_size,
            warmup: None,
            max_grad_norm: None,
            beta1: None,
            beta2: None,
            epsilon: None,
            optimizer_extras: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::schema(name, format!("must be finite and > 0, got {v}")))
            }
        };
        positive("model_size", self.model_size)?;
        positive("data_size", self.data_size)?;
        positive("peak_lr", self.peak_lr)?;
        if self.total_steps == 0 {
            return Err(Error::schema("total_steps", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::schema("batch_size", "must be >= 1"));
        }
        if let (Some(min_lr), Some(ratio)) = (self.min_lr, self.min_lr_ratio) {
            let expect = min_lr / self.peak_lr;
            if (ratio - expect).abs() > 1e-9 * expect.abs().max(ratio.abs()).max(f64::MIN_POSITIVE)
            {
                return Err(Error::schema(
                    "min_lr_ratio",
                    format!("{ratio} disagrees with min_lr / peak_lr = {expect}"),
                ));
            }
        }
        for (key, owner) in KNOWN_EXTRAS {
            if self.optimizer_extras.contains_key(*key) && self.optimizer != *owner {
                return Err(Error::schema(
                    *key,
                    format!("only valid for optimizer `{owner}`, not `{}`", self.optimizer),
                ));
            }
        }
        for (key, value) in &self.optimizer_extras {
            if !value.is_finite() {
                return Err(Error::schema(key.as_str(), "non-finite value"));
            }
        }
        Ok(())
    }

    /// Fills whichever of `min_lr` / `min_lr_ratio` is derivable from the other.
    pub fn normalized(&self) -> RunConfig {
        let mut c = self.clone();
        match (c.min_lr, c.min_lr_ratio) {
            (Some(m), None) => c.min_lr_ratio = Some(m / c.peak_lr),
            (None, Some(r)) => c.min_lr = Some(r * c.peak_lr),
            _ => {}
        }
        c
    }

    /// Warmup expressed as a ratio of total steps.
    pub fn warmup_ratio(&self) -> Option<f64> {
        self.warmup.map(|w| match w {
            Warmup::Steps(s) => s / self.total_steps as f64,
            Warmup::Ratio(r) => r,
        })
    }

    pub fn warmup_steps(&self) -> Option<f64> {
        self.warmup.map(|w| match w {
            Warmup::Steps(s) => s,
            Warmup::Ratio(r) => r * self.total_steps as f64,
        })
    }
}

/// Deterministic dump of the field table: one tab-separated row per field.
pub fn dump_table() -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# schema_version\t{SCHEMA_VERSION}");
    let _ = writeln!(out, "# extra_buckets\t{EXTRA_BUCKETS}");
    let _ = writeln!(out, "index\tname\tkind\tscale_factor\tvocabulary");
    for (i, f) in FIELDS.iter().chain(std::iter::once(&FRAC_FIELD)).enumerate() {
        let kind = match f.kind {
            FieldKind::Categorical => "categorical",
            FieldKind::Numerical => "numerical",
            FieldKind::HashedPairs => "hashed_pairs",
        };
        let scale = match f.kind {
            FieldKind::Numerical | FieldKind::HashedPairs => format!("{:e}", f.scale_factor),
            FieldKind::Categorical => "-".to_string(),
        };
        let vocab = if f.vocabulary.is_empty() {
            "-".to_string()
        } else {
            f.vocabulary.join(",")
        };
        let _ = writeln!(out, "{i}\t{}\t{kind}\t{scale}\t{vocab}", f.name);
    }
    out
}

/// SHA-256 of the field table dump, hex encoded. Checkpoints refuse to load on mismatch.
pub fn schema_hash() -> String {
    let digest = Sha256::digest(dump_table().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable bucket for a free-form optimizer extra key.
pub fn extra_bucket(key: &str) -> u32 {
    let digest = Sha256::digest(key.as_bytes());
    let word = u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]);
    word % EXTRA_BUCKETS as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_table_is_complete() {
        // Independent (field, factor) list checked against the field table.
        let expected: &[(&str, f64)] = &[
            ("model_size", 0.01),
            ("num_layers", 1.0),
            ("num_heads", 1.0),
            ("hidden_dim", 0.01),
            ("data_size", 1.0),
            ("total_steps", 0.001),
            ("peak_lr", 1e4),
            ("min_lr", 1e4),
            ("min_lr_ratio", 200.0),
            ("weight_decay", 1e2),
            ("batch_size", 0.1),
            ("warmup", 0.01),
            ("max_grad_norm", 1.0),
            ("muon_adam_lr", 1e4),
            ("soap_block_size", 0.02),
        ];
        for (name, factor) in expected {
            let spec = field(name).unwrap_or_else(|| panic!("missing field {name}"));
            assert_eq!(spec.kind, FieldKind::Numerical, "{name}");
            assert_eq!(spec.scale_factor, *factor, "{name}");
        }
        assert_eq!(FRAC_FIELD.scale_factor, 1.0);
        for name in [
            "source",
            "optimizer",
            "lr_schedule",
            "beta1",
            "beta2",
            "epsilon",
            "kron_precond_lr",
        ] {
            assert_eq!(field(name).unwrap().kind, FieldKind::Categorical, "{name}");
        }
    }

    #[test]
    fn every_config_field_has_exactly_one_spec() {
        let cfg = RunConfig::minimal("steplaw", 268.0, 25.0, 127155, "adamw", 9.77e-4, 960);
        let value = serde_json::to_value(cfg).unwrap();
        let mut names: Vec<&str> = FIELDS.iter().map(|f| f.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), FIELDS.len(), "duplicate field spec");
        let all_keys = [
            "source", "model_size", "num_layers", "num_heads", "hidden_dim", "data_size",
            "total_steps", "optimizer", "peak_lr", "lr_schedule", "min_lr", "min_lr_ratio",
            "weight_decay", "batch_size", "warmup", "max_grad_norm", "beta1", "beta2",
            "epsilon", "optimizer_extras",
        ];
        for key in all_keys {
            assert!(field(key).is_some(), "no spec for {key}");
        }
        for key in value.as_object().unwrap().keys() {
            assert!(all_keys.contains(&key.as_str()), "unlisted config key {key}");
        }
    }

    #[test]
    fn validate_rejects_bad_values() {
        let base = RunConfig::minimal("steplaw", 268.0, 25.0, 1000, "adamw", 1e-3, 256);
        assert!(base.validate().is_ok());
        let mut c = base.clone();
        c.model_size = 0.0;
        assert!(matches!(c.validate(), Err(Error::Schema { field, .. }) if field == "model_size"));
        let mut c = base.clone();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.min_lr = Some(1e-5);
        c.min_lr_ratio = Some(0.5);
        assert!(c.validate().is_err());
        c.min_lr_ratio = Some(1e-2);
        assert!(c.validate().is_ok());
        let mut c = base;
        c.optimizer_extras.insert("soap_block_size".into(), 256.0);
        assert!(matches!(c.validate(), Err(Error::Schema { field, .. }) if field == "soap_block_size"));
        c.optimizer = "soap".into();
        assert!(c.validate().is_ok());
    }

    #[test]
    fn normalized_derives_missing_lr_floor() {
        let mut c = RunConfig::minimal("steplaw", 268.0, 25.0, 1000, "adamw", 1e-3, 256);
        c.min_lr = Some(1e-5);
        let n = c.normalized();
        assert!((n.min_lr_ratio.unwrap() - 0.01).abs() < 1e-15);
        c.min_lr = None;
        c.min_lr_ratio = Some(0.1);
        assert!((c.normalized().min_lr.unwrap() - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn warmup_normalizes_to_ratio() {
        let mut c = RunConfig::minimal("steplaw", 268.0, 25.0, 10_000, "adamw", 1e-3, 256);
        c.warmup = Some(Warmup::Steps(2000.0));
        assert_eq!(c.warmup_ratio(), Some(0.2));
        c.warmup = Some(Warmup::Ratio(0.05));
        assert_eq!(c.warmup_steps(), Some(500.0));
    }

    #[test]
    fn dump_and_hash_are_stable() {
        assert_eq!(dump_table(), dump_table());
        assert_eq!(schema_hash().len(), 64);
        assert!(dump_table().contains("peak_lr\tnumerical\t1e4"));
        assert!(extra_bucket("anything") < EXTRA_BUCKETS as u32);
        assert_eq!(extra_bucket("x"), extra_bucket("x"));
    }
}
