//! Run configuration files (TOML).
//!
//! ```toml
//! version = 1
//!
//! [model]
//! preset = "tiny"          # base | tiny | smoke
//! base_channels = 4        # any ModelConfig field overrides the preset
//!
//! [dataset]
//! n_items = 200
//! val_items = 40
//! snr_db = 0.0
//!
//! [train]
//! epochs = 30
//! lr = 0.003
//! ```
//!
//! Every section and key is optional except `version`. Unknown keys are
//! errors, and so is any version other than [`VERSION`].

use std::path::Path;

use imse_core::model::{ModelConfig, SplitRule};
use imse_core::nn::AttentionAxis;
use imse_core::train::{NoiseKind, ToyDatasetConfig, TrainOptions};
use serde::Deserialize;

use crate::error::{CliError, Result};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub base_channels: Option<usize>,
    pub levels: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_ratio: Option<usize>,
    pub attention_axis: Option<AttentionAxis>,
    pub split: Option<SplitRule>,
    pub compress: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub n_items: Option<usize>,
    pub val_items: Option<usize>,
    pub duration: Option<f64>,
    pub snr_db: Option<f64>,
    pub chirp: Option<bool>,
    pub noise: Option<NoiseKind>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    /// Zero or negative disables clipping.
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: TrainSection,
}

pub const DEFAULT_VAL_ITEMS: usize = 40;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: VERSION,
            model: ModelSection::default(),
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
        }
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    ModelConfig::preset(name).ok_or_else(|| {
        CliError::Core(imse_core::Error::Config(format!(
            "unknown preset `{name}` (expected base, tiny or smoke)"
        )))
    })
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |reason: String| CliError::Config {
            path: path.to_path_buf(),
            reason,
        };
        let value: toml::Table = toml::from_str(text).map_err(|e| err(e.to_string()))?;
        match value.get("version").and_then(|v| v.as_integer()) {
            Some(v) if v == VERSION as i64 => {}
            Some(v) => return Err(err(format!("config version {v} is not supported (expected {VERSION})"))),
            None => return Err(err("missing integer `version` key".into())),
        }
        toml::from_str(text).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Model config from the section, starting from `fallback` when the
    /// section names no preset.
    pub fn model(&self, fallback: &str) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = preset(m.preset.as_deref().unwrap_or(fallback))?;
        if let Some(v) = m.base_channels {
            cfg.base_channels = v;
        }
        if let Some(v) = m.levels {
            cfg.levels = v;
        }
        if let Some(v) = m.heads {
            cfg.heads = v;
        }
        if let Some(v) = m.ffn_ratio {
            cfg.ffn_ratio = v;
        }
        if let Some(v) = m.attention_axis {
            cfg.attention_axis = v;
        }
        if let Some(v) = m.split {
            cfg.split = v;
        }
        if let Some(v) = m.compress {
            cfg.compress = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Toy dataset config and the held-out item count.
    pub fn dataset(&self) -> (ToyDatasetConfig, usize) {
        let d = &self.dataset;
        let base = ToyDatasetConfig::default();
        let cfg = ToyDatasetConfig {
            n_items: d.n_items.unwrap_or(base.n_items),
            duration: d.duration.unwrap_or(base.duration),
            snr_db: d.snr_db.unwrap_or(base.snr_db),
            chirp: d.chirp.unwrap_or(base.chirp),
            noise: d.noise.unwrap_or(base.noise),
            ..base
        };
        (cfg, d.val_items.unwrap_or(DEFAULT_VAL_ITEMS))
    }

    pub fn train(&self) -> TrainOptions {
        let t = &self.train;
        let mut opts = TrainOptions::default();
        if let Some(v) = t.epochs {
            opts.epochs = v;
        }
        if let Some(v) = t.batch_size {
            opts.batch_size = v;
        }
        if let Some(v) = t.lr {
            opts.optimizer.lr = v;
        }
        if let Some(v) = t.weight_decay {
            opts.optimizer.weight_decay = v;
        }
        if let Some(v) = t.clip_norm {
            opts.clip_norm = (v > 0.0).then_some(v);
        }
        opts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig> {
        RunConfig::parse(s, Path::new("test.toml"))
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let c = parse("version = 1\n[model]\npreset = \"tiny\"\nheads = 1\nsplit = \"inception_next\"\n[train]\nepochs = 3\n")
            .unwrap();
        let m = c.model("base").unwrap();
        assert_eq!(m.base_channels, 4);
        assert_eq!(m.heads, 1);
        assert_eq!(m.split, SplitRule::InceptionNext);
        assert_eq!(c.train().epochs, 3);
        assert_eq!(c.dataset().0, ToyDatasetConfig::default());
    }

    #[test]
    fn version_is_required_and_checked() {
        assert!(matches!(parse("[model]\n"), Err(CliError::Config { .. })));
        let e = parse("version = 2\n").unwrap_err().to_string();
        assert!(e.contains("version 2"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("version = 1\n[model]\nchannels = 3\n").is_err());
        assert!(parse("version = 1\n[optim]\n").is_err());
    }

    #[test]
    fn unknown_preset_is_an_error() {
        let c = parse("version = 1\n[model]\npreset = \"huge\"\n").unwrap();
        assert!(c.model("tiny").is_err());
    }
}
