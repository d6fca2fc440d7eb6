//! Experiment configuration: one TOML file with `[synth]`, `[train]`,
//! `[eval]` and `[ablate]` tables, every field optional.

use std::fs;
use std::path::Path;

use pgan_core::data::ProtocolKind;
use pgan_core::synth::SynthConfig;
use pgan_core::{Metric, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub metric: Metric,
    pub protocol: ProtocolKind,
    /// Seed of the query/gallery split; repeated draws use `seed..seed + repeats`.
    pub seed: u64,
    /// Gallery draws averaged under the repeated-gallery protocol.
    pub repeats: usize,
    /// Images per inference batch.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { metric: Metric::Cosine, protocol: ProtocolKind::Veri, seed: 0, repeats: 10, batch: 64 }
    }
}

/// Settings swept by `pgan ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    pub parts: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec(), parts: vec![8], lambdas: vec![2.0], seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg = Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.eval.repeats == 0 || self.eval.batch == 0 {
            return Err(pgan_core::Error::Config("eval.repeats and eval.batch must be positive".into()).into());
        }
        let a = &self.ablate;
        if a.variants.is_empty() || a.parts.is_empty() || a.lambdas.is_empty() || a.seeds.is_empty() {
            return Err(pgan_core::Error::Config("ablate: every swept list needs at least one value".into()).into());
        }
        if a.parts.contains(&0) || a.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(pgan_core::Error::Config(
                "ablate: parts must be positive and lambdas finite and non-negative".into(),
            )
            .into());
        }
        Ok(())
    }
}
