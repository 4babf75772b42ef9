//! One serializable struct that pins every knob of a run.
//!
//! A config plus the code version determines every artifact bit for
//! bit, so artifacts embed the config's content hash and readers can
//! tell at a glance whether two outputs are comparable. Command-line
//! overrides go through [`ExperimentConfig::with_overrides`], which
//! only touches fields that already exist; a typo in a dot-path is an
//! error, not a silently ignored extra key.

use crate::customize::FinetuneConfig;
use crate::diffusion::{scaled_linear, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::scene::corpus::{BenchmarkSpec, CorpusConfig};
use crate::unet::UNetConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Recorded in artifacts next to the config hash.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: UNetConfig,
    /// Forward-process length; the noise schedule is derived from it.
    pub timesteps: usize,
    pub sampler: SamplerConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: UNetConfig::default(),
            timesteps: 1000,
            sampler: SamplerConfig::default(),
            corpus: CorpusConfig {
                items: 480,
                frames: 8,
                height: 32,
                width: 32,
                held_out: BenchmarkSpec::standard().held_out_triples(),
            },
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Small profile for single-core end-to-end runs: quarter-resolution
    /// frames, short clips, a narrow network, and budgets in minutes.
    pub fn bench() -> Self {
        ExperimentConfig {
            model: UNetConfig {
                in_channels: 3,
                c1: 32,
                c2: 64,
                frames: 4,
                height: 16,
                width: 16,
                groups: 8,
                time_dim: 32,
            },
            timesteps: 100,
            sampler: SamplerConfig {
                steps: 20,
                eta: 0.0,
                cfg_scale: 3.0,
                seed: 0,
            },
            corpus: CorpusConfig {
                items: 120,
                frames: 4,
                height: 16,
                width: 16,
                held_out: BenchmarkSpec::standard().held_out_triples(),
            },
            pretrain: PretrainConfig {
                image_steps: 300,
                temporal_steps: 120,
                batch: 4,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                iterations: 60,
                ..FinetuneConfig::default()
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.sampler.steps == 0 || self.sampler.steps > self.timesteps {
            return Err(Error::Config(format!(
                "sampler steps {} outside 1..={}",
                self.sampler.steps, self.timesteps
            )));
        }
        let (c, m) = (&self.corpus, &self.model);
        if c.height != m.height || c.width != m.width || c.frames != m.frames {
            return Err(Error::Config(format!(
                "corpus geometry {}x{}x{} does not match model {}x{}x{}",
                c.frames, c.height, c.width, m.frames, m.height, m.width
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        scaled_linear(self.timesteps)
    }

    /// Content hash of the serialized config. Field order is fixed by
    /// the struct declaration, so equal configs hash equally.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("missing config {path:?}: {e}")))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` pairs where the key is a dot-path into this
    /// struct (`model.c1`, `pretrain.lr`). Values parse as JSON, with a
    /// bare-string fallback. Unknown paths are errors.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<ExperimentConfig> {
        let mut root = serde_json::to_value(self)?;
        for (path, raw) in pairs {
            let segments: Vec<&str> = path.split('.').collect();
            let (last, parents) = segments.split_last().expect("split yields a segment");
            let mut cur = &mut root;
            for seg in parents {
                cur = { cur }
                    .as_object_mut()
                    .and_then(|obj| obj.get_mut(*seg))
                    .ok_or_else(|| Error::Config(format!("unknown config field {path}")))?;
            }
            let slot = cur
                .as_object_mut()
                .and_then(|obj| obj.get_mut(*last))
                .ok_or_else(|| Error::Config(format!("unknown config field {path}")))?;
            *slot = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
