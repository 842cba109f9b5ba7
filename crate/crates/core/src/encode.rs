//! Structural encoding of a [`RunConfig`] into a fixed-order feature vector and back.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{self, FieldKind, RunConfig, Warmup, FIELDS, KNOWN_EXTRAS};

/// Value held by one encoded field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Scalar(f64),
    Category(u32),
    Missing,
}

/// Optimizer extra without a dedicated field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraSlot {
    pub key: String,
    pub bucket: u32,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedField {
    pub name: String,
    pub slot: Slot,
}

/// Encoded configuration in canonical field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub fields: Vec<EncodedField>,
    pub extras: Vec<ExtraSlot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frac: Option<f64>,
}

impl FeatureVector {
    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.fields.iter().find(|f| f.name == name).map(|f| f.slot)
    }

    pub fn with_frac(mut self, frac: f64) -> Result<Self> {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::Argument(format!("frac {frac} outside (0, 1]")));
        }
        self.frac = Some(frac);
        Ok(self)
    }

    /// Checks that the field list follows the canonical schema order.
    pub fn check_schema(&self) -> Result<()> {
        if self.fields.len() != FIELDS.len() {
            return Err(Error::Shape(format!(
                "feature vector has {} fields, schema has {}",
                self.fields.len(),
                FIELDS.len()
            )));
        }
        for (got, spec) in self.fields.iter().zip(FIELDS) {
            if got.name != spec.name {
                return Err(Error::Shape(format!(
                    "field `{}` where schema expects `{}`",
                    got.name, spec.name
                )));
            }
        }
        Ok(())
    }
}

fn categorical(field: &str, value: &str) -> Result<Slot> {
    let spec = schema::field(field).expect("categorical field in schema");
    spec.vocabulary
        .iter()
        .position(|v| *v == value)
        .map(|i| Slot::Category(i as u32))
        .ok_or_else(|| Error::schema(field, format!("unknown value `{value}`")))
}

fn scaled(field: &str, value: Option<f64>) -> Result<Slot> {
    match value {
        None => Ok(Slot::Missing),
        Some(v) if v.is_finite() => Ok(Slot::Scalar(v * schema::field(field).unwrap().scale_factor)),
        Some(v) => Err(Error::schema(field, format!("non-finite value {v}"))),
    }
}

fn neg_log10_category(eps: f64) -> Result<Slot> {
    if !(eps > 0.0) {
        return Err(Error::schema("epsilon", format!("must be > 0, got {eps}")));
    }
    let k = -eps.log10();
    let rounded = k.round();
    if (k - rounded).abs() > 1e-6 {
        return Err(Error::schema(
            "epsilon",
            format!("{eps} is not a power of ten"),
        ));
    }
    categorical("epsilon", &format!("{}", rounded as i64))
}

/// Encodes a configuration: numerical fields are multiplied by their scale factor,
/// ε is replaced by its negative base-10 log and looked up as a category.
pub fn canonicalize(raw: &RunConfig) -> Result<FeatureVector> {
    raw.validate()?;
    let c = raw.normalized();
    let extra = |k: &str| c.optimizer_extras.get(k).copied();

    let mut fields = Vec::with_capacity(FIELDS.len());
    for spec in FIELDS {
        let slot = match spec.name {
            "source" => categorical("source", &c.source)?,
            "model_size" => scaled("model_size", Some(c.model_size))?,
            "num_layers" => scaled("num_layers", c.num_layers.map(f64::from))?,
            "num_heads" => scaled("num_heads", c.num_heads.map(f64::from))?,
            "hidden_dim" => scaled("hidden_dim", c.hidden_dim.map(f64::from))?,
            "data_size" => scaled("data_size", Some(c.data_size))?,
            "total_steps" => scaled("total_steps", Some(c.total_steps as f64))?,
            "optimizer" => categorical("optimizer", &c.optimizer)?,
            "peak_lr" => scaled("peak_lr", Some(c.peak_lr))?,
            "lr_schedule" => match &c.lr_schedule {
                Some(s) => categorical("lr_schedule", s)?,
                None => Slot::Missing,
            },
            "min_lr" => scaled("min_lr", c.min_lr)?,
            "min_lr_ratio" => scaled("min_lr_ratio", c.min_lr_ratio)?,
            "weight_decay" => scaled("weight_decay", c.weight_decay)?,
            "batch_size" => scaled("batch_size", Some(c.batch_size as f64))?,
            "warmup" => scaled("warmup", c.warmup_steps())?,
            "warmup_unit" => match c.warmup {
                Some(Warmup::Steps(_)) => categorical("warmup_unit", "steps")?,
                Some(Warmup::Ratio(_)) => categorical("warmup_unit", "ratio")?,
                None => Slot::Missing,
            },
            "max_grad_norm" => scaled("max_grad_norm", c.max_grad_norm)?,
            "beta1" => match c.beta1 {
                Some(b) => categorical("beta1", &format!("{b}"))?,
                None => Slot::Missing,
            },
            "beta2" => match c.beta2 {
                Some(b) => categorical("beta2", &format!("{b}"))?,
                None => Slot::Missing,
            },
            "epsilon" => match c.epsilon {
                Some(e) => neg_log10_category(e)?,
                None => Slot::Missing,
            },
            "muon_adam_lr" => scaled("muon_adam_lr", extra("muon_adam_lr"))?,
            "soap_block_size" => scaled("soap_block_size", extra("soap_block_size"))?,
            "kron_precond_lr" => match extra("kron_precond_lr") {
                Some(v) => categorical("kron_precond_lr", &format!("{v}"))?,
                None => Slot::Missing,
            },
            "optimizer_extras" => Slot::Missing,
            other => unreachable!("field `{other}` has no encoder"),
        };
        fields.push(EncodedField {
            name: spec.name.to_string(),
            slot,
        });
    }

    let extras = c
        .optimizer_extras
        .iter()
        .filter(|(k, _)| !KNOWN_EXTRAS.iter().any(|(known, _)| known == k))
        .map(|(k, v)| ExtraSlot {
            key: k.clone(),
            bucket: schema::extra_bucket(k),
            value: *v,
        })
        .collect();

    Ok(FeatureVector {
        fields,
        extras,
        frac: None,
    })
}

fn vocab_value(field: &str, slot: Slot) -> Result<Option<&'static str>> {
    let spec = schema::field(field).unwrap();
    match slot {
        Slot::Missing => Ok(None),
        Slot::Category(i) => spec
            .vocabulary
            .get(i as usize)
            .copied()
            .map(Some)
            .ok_or_else(|| Error::schema(field, format!("category index {i} out of vocabulary"))),
        Slot::Scalar(_) => Err(Error::schema(field, "expected a categorical slot")),
    }
}

fn unscaled(field: &str, slot: Slot) -> Result<Option<f64>> {
    let spec = schema::field(field).unwrap();
    match slot {
        Slot::Missing => Ok(None),
        Slot::Scalar(x) => Ok(Some(x / spec.scale_factor)),
        Slot::Category(_) => Err(Error::schema(field, "expected a numerical slot")),
    }
}

fn required(field: &str, v: Option<f64>) -> Result<f64> {
    v.ok_or_else(|| Error::schema(field, "missing required field"))
}

fn parse_f64(field: &str, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::schema(field, format!("vocabulary entry `{s}` is not numeric")))
}

/// Inverse of [`canonicalize`] on its image.
pub fn decanonicalize(fv: &FeatureVector) -> Result<RunConfig> {
    fv.check_schema()?;
    let mut map = BTreeMap::new();
    for f in &fv.fields {
        map.insert(f.name.as_str(), f.slot);
    }
    let s = |name: &str| map[name];

    let source = vocab_value("source", s("source"))?
        .ok_or_else(|| Error::schema("source", "missing required field"))?;
    let optimizer = vocab_value("optimizer", s("optimizer"))?
        .ok_or_else(|| Error::schema("optimizer", "missing required field"))?;
    let total_steps = required("total_steps", unscaled("total_steps", s("total_steps"))?)?.round() as u64;
    let count = |name: &str| -> Result<Option<u32>> { Ok(unscaled(name, s(name))?.map(|v| v.round() as u32)) };

    let warmup_steps = unscaled("warmup", s("warmup"))?;
    let warmup = match (warmup_steps, vocab_value("warmup_unit", s("warmup_unit"))?) {
        (None, _) => None,
        (Some(st), Some("ratio")) => Some(Warmup::Ratio(st / total_steps as f64)),
        (Some(st), _) => Some(Warmup::Steps(st)),
    };

    let mut optimizer_extras = BTreeMap::new();
    if let Some(v) = unscaled("muon_adam_lr", s("muon_adam_lr"))? {
        optimizer_extras.insert("muon_adam_lr".to_string(), v);
    }
    if let Some(v) = unscaled("soap_block_size", s("soap_block_size"))? {
        optimizer_extras.insert("soap_block_size".to_string(), v);
    }
    if let Some(v) = vocab_value("kron_precond_lr", s("kron_precond_lr"))? {
        optimizer_extras.insert("kron_precond_lr".to_string(), parse_f64("kron_precond_lr", v)?);
    }
    for e in &fv.extras {
        if e.bucket != schema::extra_bucket(&e.key) {
            return Err(Error::schema("optimizer_extras", format!("bucket mismatch for `{}`", e.key)));
        }
        optimizer_extras.insert(e.key.clone(), e.value);
    }

    let cfg = RunConfig {
        source: source.to_string(),
        model_size: required("model_size", unscaled("model_size", s("model_size"))?)?,
        num_layers: count("num_layers")?,
        num_heads: count("num_heads")?,
        hidden_dim: count("hidden_dim")?,
        data_size: required("data_size", unscaled("data_size", s("data_size"))?)?,
        total_steps,
        optimizer: optimizer.to_string(),
        peak_lr: required("peak_lr", unscaled("peak_lr", s("peak_lr"))?)?,
        lr_schedule: vocab_value("lr_schedule", s("lr_schedule"))?.map(str::to_string),
        min_lr: unscaled("min_lr", s("min_lr"))?,
        min_lr_ratio: unscaled("min_lr_ratio", s("min_lr_ratio"))?,
        weight_decay: unscaled("weight_decay", s("weight_decay"))?,
        batch_size: required("batch_size", unscaled("batch_size", s("batch_size"))?)?.round() as u64,
        warmup,
        max_grad_norm: unscaled("max_grad_norm", s("max_grad_norm"))?,
        beta1: vocab_value("beta1", s("beta1"))?.map(|v| parse_f64("beta1", v)).transpose()?,
        beta2: vocab_value("beta2", s("beta2"))?.map(|v| parse_f64("beta2", v)).transpose()?,
        epsilon: vocab_value("epsilon", s("epsilon"))?
            .map(|v| parse_f64("epsilon", &format!("1e-{v}")))
            .transpose()?,
        optimizer_extras,
    };
    Ok(cfg)
}

/// Width of the dense numeric row produced by [`dense_row`].
pub fn dense_width(with_frac: bool) -> usize {
    FIELDS
        .iter()
        .map(|f| match f.kind {
            FieldKind::Numerical => 1,
            FieldKind::Categorical => f.vocabulary.len() + 1,
            FieldKind::HashedPairs => schema::EXTRA_BUCKETS,
        })
        .sum::<usize>()
        + usize::from(with_frac)
}

/// Value used for absent numerical fields in dense rows.
pub const DENSE_MISSING: f64 = -1.0e9;

/// Flattens a feature vector into a numeric row for tree models: numerical slots as-is,
/// categoricals one-hot (last column = missing), extras one column per hash bucket.
pub fn dense_row(fv: &FeatureVector, with_frac: bool) -> Result<Vec<f64>> {
    fv.check_schema()?;
    if fv.frac.is_some() != with_frac {
        return Err(Error::Shape(format!(
            "frac present = {}, model expects {}",
            fv.frac.is_some(),
            with_frac
        )));
    }
    let mut row = Vec::with_capacity(dense_width(with_frac));
    for (spec, f) in FIELDS.iter().zip(&fv.fields) {
        match spec.kind {
            FieldKind::Numerical => row.push(match f.slot {
                Slot::Scalar(x) => x,
                _ => DENSE_MISSING,
            }),
            FieldKind::Categorical => {
                let k = spec.vocabulary.len() + 1;
                let hot = match f.slot {
                    Slot::Category(i) => i as usize,
                    _ => k - 1,
                };
                row.extend((0..k).map(|j| if j == hot { 1.0 } else { 0.0 }));
            }
            FieldKind::HashedPairs => {
                let start = row.len();
                row.extend(std::iter::repeat_n(DENSE_MISSING, schema::EXTRA_BUCKETS));
                for e in &fv.extras {
                    let cell = &mut row[start + e.bucket as usize];
                    *cell = if *cell == DENSE_MISSING { e.value } else { *cell + e.value };
                }
            }
        }
    }
    if let Some(frac) = fv.frac {
        row.push(frac);
    }
    Ok(row)
}
