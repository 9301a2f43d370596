//! Experiment configuration: every hyperparameter of the pipeline in one
//! document, read from JSON or from `dotted.key = value` lines.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::InferenceConfig;
use crate::losses::LossConfig;
use crate::model::{ModelConfig, ProposalConfig};
use crate::trainer::{StudentConfig, TeacherConfig};
use crate::world::DataConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub proposals: ProposalConfig,
    pub loss: LossConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub inference: InferenceConfig,
}

impl ExperimentConfig {
    /// Sets every seed (data, teacher, student) to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.teacher.seed = seed;
        self.student.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.proposals.validate()?;
        self.loss.validate()?;
        self.teacher.optim.validate()?;
        self.student.optim.validate()?;
        Ok(())
    }

    /// Parses JSON (when the text starts with `{`) or `key = value` lines.
    /// Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::config(format!("config JSON: {e}")))?
        } else {
            parse_key_values(text)?
        };
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// `a.b.c = value` lines into nested JSON. Values are parsed as JSON
/// literals when possible and kept as strings otherwise; `#` starts a
/// comment line.
pub fn parse_key_values(text: &str) -> Result<Value> {
    let mut root = Map::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, raw) = line.split_once('=').ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
        let raw = raw.trim();
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').map(str::trim).collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::config(format!("line {}: malformed key {key:?}", n + 1)));
        }
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry.as_object_mut().ok_or_else(|| Error::config(format!("line {}: {p:?} is both a value and a section", n + 1)))?;
        }
        if node.insert(parts[parts.len() - 1].to_string(), value).is_some() {
            return Err(Error::config(format!("line {}: duplicate key {key:?}", n + 1)));
        }
    }
    Ok(Value::Object(root))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_override_defaults() {
        let cfg = ExperimentConfig::parse("# small run\ndata.n_base = 10\nstudent.optim.lr = 0.05\nloss.noise.aggregation = loss\n").unwrap();
        assert_eq!(cfg.data.n_base, 10);
        assert_eq!(cfg.student.optim.lr, 0.05);
        assert_eq!(cfg.loss.noise.aggregation, crate::losses::McAggregation::Loss);
        assert_eq!(cfg.teacher, TeacherConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::parse("data.n_bsae = 3"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse(r#"{"model": {"stem": 3}}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("data.n_base"), Err(Error::Config(_))));
    }

    #[test]
    fn json_roundtrip_and_digest() {
        let cfg = ExperimentConfig::default().with_seed(7);
        let back = ExperimentConfig::parse(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert_ne!(cfg.digest(), ExperimentConfig::default().digest());
    }
}
