//! Run configuration: a TOML document with top-level run keys and one table
//! per component. Every key has a default, unknown keys are rejected, and
//! `section.key=value` overrides are applied to the parsed document before
//! it is deserialized.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::GridConfig;
use crate::error::{AceError, Result};
use crate::learner::{EpsilonSchedule, EvalConfig, TrainConfig};
use crate::model::{ModelConfig, UnitPool};
use crate::ppo::PpoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    #[default]
    Ace,
    AcePpo,
}

impl std::str::FromStr for Algo {
    type Err = AceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ace" => Ok(Algo::Ace),
            "ace_ppo" => Ok(Algo::AcePpo),
            other => Err(AceError::Config(format!(
                "algo: unknown algorithm {other:?} (expected ace or ace_ppo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub side: u32,
    pub max_steps: u32,
    /// Spiders must start strictly farther than this from the fly; defaults
    /// to 4, or `side - 1` on grids smaller than 5.
    pub min_start_distance: Option<u32>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let g = GridConfig::new(5);
        Self {
            side: g.side,
            max_steps: g.max_steps,
            min_start_distance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub pool: UnitPool,
    pub post_pool_hidden: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: 128,
            pool: UnitPool::Max,
            post_pool_hidden: false,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, ia_enabled: bool) -> ModelConfig {
        ModelConfig {
            ia_enabled,
            pool: self.pool,
            post_pool_hidden: self.post_pool_hidden,
            ..ModelConfig::spiders_fly(self.hidden)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub algo: Algo,
    /// Environment-sample budget.
    pub budget: u64,
    /// Collection threads; unset means `ACE_THREADS` or the machine's
    /// parallelism.
    pub threads: Option<usize>,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub eps: EpsilonSchedule,
    pub model: ModelSection,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            algo: Algo::Ace,
            budget: 200_000,
            threads: None,
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            eps: EpsilonSchedule::default(),
            model: ModelSection::default(),
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn grid(&self) -> GridConfig {
        let mut g = GridConfig::new(self.env.side);
        g.max_steps = self.env.max_steps;
        if let Some(d) = self.env.min_start_distance {
            g.min_start_distance = d;
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        self.grid().validate()?;
        if self.model.hidden == 0 {
            return Err(AceError::Config("model.hidden must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(AceError::Config("threads must be positive".into()));
        }
        self.train.validate()?;
        self.eps.validate()?;
        self.ppo.validate()?;
        self.eval.validate()
    }

    /// Parses a TOML document, applies overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| AceError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| AceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| AceError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// The fully resolved document, loadable with [`RunConfig::from_toml_str`].
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AceError::Format(e.to_string()))
    }
}

/// Sets `dotted.key=value`; the value is read as a TOML literal, falling
/// back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| AceError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_literal(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| AceError::Config(format!("override {assignment:?} has an empty key")))?;
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| AceError::Config(format!("override {key}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
