//! Run configuration: one TOML file plus dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::chain::RolloutSpec;
use crate::error::{Error, Result};
use crate::pipeline::ModelConfig;
use crate::scenario::ScenarioConfig;
use crate::tensor::checkpoint::{config_digest, ConfigDigest};
use crate::training::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "CHAINFLOW_CONFIG";

/// File name of the resolved config echoed into output directories.
pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenario: ScenarioConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Seed for the refinement noise.
    pub noise_seed: u64,
    /// Number of constructed collision pairs for the scorer check.
    pub pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            noise_seed: 0,
            pairs: 200,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or defaults when `None`), applies `key=value` overrides
    /// and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), one_line(&e.to_string()))))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let s = &self.scenario;
        if s.horizon == 0 || !(s.dt > 0.0) {
            return Err(Error::Config("scenario.horizon and scenario.dt must be positive".into()));
        }
        if s.n_tokens < 1 + s.max_obstacles + s.lane_tokens {
            return Err(Error::Config(format!(
                "scenario.n_tokens {} cannot hold 1 + {} obstacles + {} lane tokens",
                s.n_tokens, s.max_obstacles, s.lane_tokens
            )));
        }
        let m = &self.model;
        for (name, dim) in [
            ("model.chain.token_dim", m.chain.token_dim),
            ("model.flow.token_dim", m.flow.token_dim),
            ("model.scorer.token_dim", m.scorer.token_dim),
        ] {
            if dim != s.token_dim {
                return Err(Error::Config(format!("{name} {dim} differs from scenario.token_dim {}", s.token_dim)));
            }
        }
        if m.flow.semantic_dim != s.semantic_dim {
            return Err(Error::Config(format!(
                "model.flow.semantic_dim {} differs from scenario.semantic_dim {}",
                m.flow.semantic_dim, s.semantic_dim
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> RolloutSpec {
        RolloutSpec::from(&self.scenario)
    }

    /// Digest stored in full checkpoints; covers everything that shapes
    /// parameters or their meaning.
    pub fn model_digest(&self) -> ConfigDigest {
        config_digest(&(&self.model, self.scenario.token_dim, self.scenario.semantic_dim))
    }

    /// Digest stored in Stage I checkpoints. The refiner is untrained there,
    /// so only the chain and scorer settings count.
    pub fn stage1_digest(&self) -> ConfigDigest {
        config_digest(&(&self.model.chain, &self.model.scorer, self.scenario.token_dim))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved config into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Applies one `a.b.c=value` override. The value is parsed as a TOML value
/// and falls back to a bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {} is not a table", path[..=i].join("."))))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
