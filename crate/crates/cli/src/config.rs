//! Run configuration: a TOML file plus `key=value` overrides on dotted keys.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use dsq_core::data::synth::SynthTaskConfig;
use dsq_core::decoding::DecodeConfig;
use dsq_core::training::TrainingConfig;
use dsq_core::ModelConfig;

use crate::UsageError;

pub const SEED_ENV: &str = "DSQ_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model initialization and training seed.
    pub seed: u64,
    pub data: SynthTaskConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: SynthTaskConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| UsageError(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| UsageError(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// File values, then `overrides` (`key=value`) in order; the seed from
    /// the environment wins last.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| UsageError(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| UsageError(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: i64 = seed
                .parse()
                .map_err(|_| UsageError(format!("{SEED_ENV}={seed} is not an integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let usage = |e: dsq_core::Error| anyhow!(UsageError(e.to_string()));
        self.model.validate().map_err(usage)?;
        self.training.validate().map_err(usage)?;
        self.decode.validate().map_err(usage)?;
        self.data.validate().map_err(usage)?;
        if self.data.n_feats != self.model.n_feats {
            bail!(UsageError(format!(
                "data.n_feats = {} but model.n_feats = {}",
                self.data.n_feats, self.model.n_feats
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}
