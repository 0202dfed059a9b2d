//! Run configuration: every tunable of the pipeline in one TOML document.
//!
//! Layers apply in order defaults, optional profile, file, command line. Any
//! key not known to the schema is rejected.

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::features::MelConfig;
use crate::losses::LossConfig;
use crate::metrics::{DecodingConfig, MetricConfig};
use crate::model::{EnhancementConfig, ModelConfig};
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub features: MelConfig,
    pub model: ModelConfig,
    pub enhancement: EnhancementConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub decoding: DecodingConfig,
    pub metrics: MetricConfig,
}

impl RunConfig {
    /// Small profile: 8 mel bands, narrow layers, 4 classes, 200/50/50
    /// records, 20 epochs.
    pub fn mini() -> Self {
        let mut c = Self::default();
        c.features.n_mels = 8;
        c.model = ModelConfig::mini();
        c.data.bank.n_classes = 4;
        c.data.sizes = [200, 50, 50];
        c.train.epochs = 20;
        c.train.batch_size = 8;
        c.enhancement.warmup_epochs = 10;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.features.validate()?;
        self.model.validate()?;
        self.enhancement.validate()?;
        self.loss.validate()?;
        self.train.validate(self.enhancement.warmup_epochs)?;
        self.decoding.validate()?;
        self.metrics.validate()?;
        if self.features.n_mels != self.model.n_mels {
            return Err(Error::Config(format!(
                "features.n_mels = {} but model.n_mels = {}",
                self.features.n_mels, self.model.n_mels
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies a TOML document on top of `self`. Keys absent from the document
    /// keep their current values.
    pub fn overlay(&self, text: &str) -> Result<Self> {
        let patch: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, patch);
        base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn overlay_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.overlay(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets one dotted key, e.g. `("enhancement.tau", "0.6")`. The value is
    /// parsed as a TOML value, falling back to a string.
    pub fn set(&self, key: &str, value: &str) -> Result<Self> {
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut patch = toml::Table::new();
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad key `{key}`")))?;
        let mut leaf = toml::Table::new();
        leaf.insert(last.to_string(), parsed);
        for p in parts.into_iter().rev() {
            let mut outer = toml::Table::new();
            outer.insert(p.to_string(), toml::Value::Table(leaf));
            leaf = outer;
        }
        patch.extend(leaf);
        let text = toml::to_string(&patch).map_err(|e| Error::Config(e.to_string()))?;
        self.overlay(&text).map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
    }

    /// SHA-256 over the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Writes the resolved configuration into a run directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
