//! Run configuration: built-in presets, TOML files, and overrides.
//!
//! Precedence, lowest first: the preset named by `preset`, then the values
//! in the config file, then command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distant::{NoiseSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::pipeline::CleanConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Preset {
    /// Five epochs; `k_pos = 100`, `k_neg = 90`.
    #[default]
    #[serde(rename = "conll-preset")]
    Conll,
    /// Ten epochs for small corpora; `k_pos = 100`, `k_neg = 90`.
    #[serde(rename = "small-corpus-preset")]
    SmallCorpus,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Conll => "conll-preset",
            Preset::SmallCorpus => "small-corpus-preset",
        }
    }

    pub fn clean_config(self) -> CleanConfig {
        let epochs = match self {
            Preset::Conll => 5,
            Preset::SmallCorpus => 10,
        };
        CleanConfig {
            epochs,
            k_pos: 100.0,
            k_neg: 90.0,
            ..Default::default()
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conll-preset" => Ok(Preset::Conll),
            "small-corpus-preset" => Ok(Preset::SmallCorpus),
            _ => Err(Error::config(format!(
                "unknown preset {s:?} (expected conll-preset or small-corpus-preset)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Bio,
    #[default]
    Spans,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Distantly annotated training corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    /// Gold annotation for the training sentences.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gazetteer: Option<PathBuf>,
    pub format: Format,
}

/// Sizes for `synth` beyond the training corpus shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSplits {
    pub test_sentences: usize,
}

impl Default for SynthSplits {
    fn default() -> Self {
        SynthSplits { test_sentences: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub clean: CleanConfig,
    pub noise: NoiseSpec,
    pub synth: SynthConfig,
    pub synth_splits: SynthSplits,
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        RunConfig {
            preset,
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            clean: preset.clean_config(),
            noise: NoiseSpec::default(),
            synth: SynthConfig::default(),
            synth_splits: SynthSplits::default(),
        }
    }

    /// Parses a TOML config, layering it over its preset. `preset_override`
    /// replaces the file's `preset` key.
    pub fn from_toml(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let preset = match (preset_override, file.get("preset")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(v)) => return Err(Error::config(format!("preset must be a string, got {v}"))),
            (None, None) => Preset::default(),
        };
        let mut merged =
            toml::Table::try_from(RunConfig::from_preset(preset)).map_err(|e| Error::config(e.to_string()))?;
        deep_merge(&mut merged, file);
        merged.insert("preset".into(), toml::Value::String(preset.name().into()));
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, preset_override: Option<Preset>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text, preset_override)
            }
            None => Ok(Self::from_preset(preset_override.unwrap_or_default())),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.clean.validate()?;
        self.noise.validate()?;
        Ok(())
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            seed: self.seed,
            ..self.noise
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth
        }
    }

    /// A configured path that must exist; the error names the field.
    pub fn require_path<'a>(&self, field: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        let p = value
            .as_deref()
            .ok_or_else(|| Error::config(format!("{field} is required (set it in the config file or by flag)")))?;
        if !p.exists() {
            return Err(Error::config(format!("{field}: {} does not exist", p.display())));
        }
        Ok(p)
    }
}

fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
