//! Run configuration: one JSON document, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::TaskKind;
use crate::denoiser::{ModelConfig, PredTarget};
use crate::error::{Error, Result};
use crate::sample::SamplerKind;
use crate::textspace::Granularity;
use crate::train::{TimeStrategy, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub task: TaskKind,
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of content tokens.
    pub vocab_size: usize,
    pub split: [f64; 3],
    pub granularity: Granularity,
    /// Existing JSONL file to split instead of generating a task.
    pub source: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Reverse,
            n: 2000,
            min_len: 8,
            max_len: 12,
            vocab_size: 32,
            split: [0.9, 0.05, 0.05],
            granularity: Granularity::Word,
            source: None,
        }
    }
}

/// Model dimensions; vocabulary size and slot counts come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub rescale_max: f32,
    pub emb_std: f32,
}

impl Default for ModelDims {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            dim: m.dim,
            hidden: m.hidden,
            layers: m.layers,
            heads: m.heads,
            max_len: m.max_len,
            rescale_max: m.rescale_max,
            emb_std: m.emb_std,
        }
    }
}

impl ModelDims {
    pub fn model_config(&self, vocab_size: usize, src_len: usize, tgt_len: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            dim: self.dim,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len,
            src_len,
            tgt_len,
            rescale_max: self.rescale_max,
            emb_std: self.emb_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub batch: usize,
    pub clamp: bool,
    pub mbr: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::FlowAvg,
            steps: 5,
            batch: 64,
            clamp: false,
            mbr: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelDims,
    /// The nested `seed` is replaced by one derived from the run seed.
    /// Pretraining defaults to loss-aware time sampling, fine-tuning to uniform.
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub sampler: SamplerConfig,
    /// Probe-set size for the quartile diagnostic.
    pub probe_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelDims::default(),
            pretrain: TrainConfig {
                time_strategy: TimeStrategy::LossAware,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 40,
                warmup_steps: 100,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            probe_size: 512,
        }
    }
}

/// Stream seed for a named stage of a run.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    stage
        .bytes()
        .fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Applies a seed override and fans the run seed out to every stage.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.pretrain.seed = derive_seed(self.seed, "pretrain");
        self.finetune.seed = derive_seed(self.seed, "finetune");
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.pretrain.pred_target != PredTarget::Z0 {
            return Err(Error::Config("pretraining predicts z0".into()));
        }
        if self.sampler.steps == 0 || self.sampler.batch == 0 || self.sampler.mbr == 0 {
            return Err(Error::Config("sampler steps, batch and mbr must be positive".into()));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pretrain": {"lr": 0.1, "lrr": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"corpus": {"task": "reverse"}}"#).is_ok());
        let c = RunConfig::from_json(r#"{"finetune": {"time_strategy": {"kind": "logit_normal", "mu": 0.0, "sigma": 1.0}}}"#);
        assert!(c.is_ok());
    }

    #[test]
    fn seeds_fan_out() {
        let a = RunConfig::default().resolve(Some(3)).unwrap();
        let b = RunConfig::default().resolve(Some(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pretrain.seed, a.finetune.seed);
        let c = RunConfig::default().resolve(Some(4)).unwrap();
        assert_ne!(a.pretrain.seed, c.pretrain.seed);
    }
}
