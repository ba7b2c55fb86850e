//! Run configuration: one JSON document, optionally patched by dotted
//! `key=value` overrides, and its SHA-256 fingerprint.

use std::path::Path;

use gssl_core::metrics::ProtocolConfig;
use gssl_core::synth::{DomainSpec, Style, GENERATED_CLASSES};
use gssl_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{IoError, Result};

/// Shapes of the synthetic benchmark: a labelled source domain `a`, an
/// intermediate domain `b` and a far domain `c` that also contains an
/// unknown object family. Each has an unlabelled training split and a
/// labelled test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub extent: [usize; 2],
    pub n_source: usize,
    pub n_unlabelled: usize,
    pub n_test: usize,
    pub shift_b: f64,
    pub shift_c: f64,
    pub noise: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: [40, 40],
            n_source: 48,
            n_unlabelled: 48,
            n_test: 24,
            shift_b: 0.4,
            shift_c: 0.8,
            noise: 0.0,
        }
    }
}

pub const DOMAINS: [&str; 6] = ["a", "b", "c", "a_test", "b_test", "c_test"];

impl BenchmarkConfig {
    /// Spec of a named benchmark domain.
    pub fn domain(&self, name: &str) -> Option<DomainSpec> {
        let index = DOMAINS.iter().position(|&d| d == name)? as u64;
        let (shift, ood) = match name.trim_end_matches("_test") {
            "a" => (0.0, false),
            "b" => (self.shift_b, false),
            _ => (self.shift_c, true),
        };
        let n_images = match name {
            "a" => self.n_source,
            "b" | "c" => self.n_unlabelled,
            _ => self.n_test,
        };
        Some(DomainSpec {
            name: name.to_string(),
            k_known: GENERATED_CLASSES,
            include_ood: ood,
            style: Style {
                shift,
                noise: self.noise,
            },
            n_images,
            extent: self.extent,
            seed: self.seed.wrapping_mul(1000).wrapping_add(index),
        })
    }

    /// Training splits are used without their labels.
    pub fn is_labelled(name: &str) -> bool {
        name == "a" || name.ends_with("_test")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Weight of recall in the F-score.
    pub beta: f64,
    /// Images per forward pass at evaluation.
    pub chunk: usize,
    pub protocol: ProtocolConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            chunk: 8,
            protocol: ProtocolConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub benchmark: BenchmarkConfig,
    /// Unlabelled domains visited in order after pretraining on `a`.
    pub curriculum: Vec<String>,
    /// Labelled domain used for evaluation.
    pub test: String,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.model.widths = [8, 16];
        train.model.feature_dim = 16;
        train.augment.crop = [32, 32];
        train.steps_pretrain = 1500;
        train.steps_ssl = 400;
        train.batch_source = 8;
        train.prototype_batch = 8;
        train.weights.uniformity = 0.1;
        train.weights.consistency = 0.3;
        Self {
            train,
            benchmark: BenchmarkConfig::default(),
            curriculum: vec!["b".into(), "c".into()],
            test: "c_test".into(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| IoError::Config {
            path: path.to_string(),
            message,
        };
        self.train.validate().map_err(|e| bad("train", e.to_string()))?;
        for (i, d) in self.curriculum.iter().enumerate() {
            if self.benchmark.domain(d).is_none() {
                return Err(bad(&format!("curriculum[{i}]"), format!("unknown domain `{d}`")));
            }
        }
        if self.benchmark.domain(&self.test).is_none() || !BenchmarkConfig::is_labelled(&self.test) {
            return Err(bad("test", format!("`{}` is not a labelled domain", self.test)));
        }
        for name in DOMAINS {
            let spec = self.benchmark.domain(name).expect("known domain");
            spec.validate().map_err(|e| bad("benchmark", e.to_string()))?;
        }
        if !(self.eval.beta > 0.0) || self.eval.chunk == 0 {
            return Err(bad("eval", "beta and chunk must be positive".into()));
        }
        Ok(())
    }

    /// Parses `text`, applies `overrides` and validates.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = match text {
            Some(t) => serde_json::from_str(t).map_err(|e| IoError::Config {
                path: format!("line {} column {}", e.line(), e.column()),
                message: e.to_string(),
            })?,
            None => serde_json::to_value(Self::default()).expect("default config serialises"),
        };
        // fill fields a partial document leaves out, so overrides can reach them
        let parsed: Self = from_value(value)?;
        value = serde_json::to_value(&parsed).expect("config serialises");
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| IoError::path(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    /// Canonical JSON (sorted keys, no whitespace).
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        serde_json::to_string(&value).expect("value serialises")
    }

    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn from_value(value: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| IoError::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Sets `key.path=value` in `root`. The value is read as JSON when it parses
/// and as a string otherwise; the key must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| IoError::Config {
        path: assignment.to_string(),
        message: "override must look like key.path=value".into(),
    })?;
    let mut slot = root;
    let mut walked = Vec::new();
    for part in key.split('.') {
        walked.push(part);
        let here = walked.join(".");
        slot = match slot {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| IoError::Config {
            path: here,
            message: "no such key".into(),
        })?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
