//! Experiment configuration: one JSON file drives data generation, all three
//! training phases and evaluation. The schema is versioned and strict —
//! unknown keys are rejected at load time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AugmentConfig, CorpusConfig};
use crate::decoder::{DecoderConfig, Variant};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::RareRule;
use crate::nn::{LoraConfig, MaskScheme};
use crate::trainer::{OptimizerConfig, ScheduleConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Causal,
    PrefixFull,
}

impl MaskKind {
    pub fn scheme(self) -> MaskScheme {
        match self {
            MaskKind::Causal => MaskScheme::Causal,
            MaskKind::PrefixFull => MaskScheme::PrefixFull { prefix_len: 0 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedules {
    pub ctc: PhaseSchedule,
    pub lm: PhaseSchedule,
    pub finetune: PhaseSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// 0 evaluates the whole eval split.
    pub max_samples: usize,
    pub rare_rule: RareRule,
    pub rare_percentile: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_samples: 0,
            rare_rule: RareRule::TokenMass,
            rare_percentile: 0.9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub lora: LoraConfig,
    pub optimizer: OptimizerConfig,
    pub schedules: Schedules,
    pub context_in_training: bool,
    pub context_in_eval: bool,
    pub mask_scheme: MaskKind,
    pub variant: Variant,
    /// `null` disables augmentation.
    pub augment: Option<AugmentConfig>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let feat_dim = corpus.feat_dim;
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 1,
            corpus,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            lora: LoraConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedules: Schedules {
                ctc: PhaseSchedule {
                    schedule: ScheduleConfig {
                        peak_lr: 2e-3,
                        floor_lr: 1e-4,
                        warmup_steps: 100,
                        total_steps: 1200,
                    },
                    batch_size: 8,
                },
                lm: PhaseSchedule {
                    schedule: ScheduleConfig {
                        peak_lr: 1e-3,
                        floor_lr: 1e-4,
                        warmup_steps: 100,
                        total_steps: 1200,
                    },
                    batch_size: 16,
                },
                finetune: PhaseSchedule {
                    schedule: ScheduleConfig::default(),
                    batch_size: 8,
                },
            },
            context_in_training: true,
            context_in_eval: true,
            mask_scheme: MaskKind::Causal,
            variant: Variant::DecoderOnly,
            augment: Some(AugmentConfig::scaled_default(feat_dim)),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.corpus.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.lora.validate()?;
        self.optimizer.validate()?;
        for s in [
            &self.schedules.ctc,
            &self.schedules.lm,
            &self.schedules.finetune,
        ] {
            s.schedule.validate()?;
            if s.batch_size == 0 {
                return Err(Error::Config("batch_size must be >= 1".into()));
            }
        }
        if let Some(aug) = &self.augment {
            aug.validate(self.corpus.feat_dim)?;
        }
        if self.encoder.feat_dim != self.corpus.feat_dim {
            return Err(Error::Config(format!(
                "encoder feat_dim {} != corpus feat_dim {}",
                self.encoder.feat_dim, self.corpus.feat_dim
            )));
        }
        if self.encoder.decoder_dim != self.decoder.model_dim {
            return Err(Error::Config(format!(
                "encoder decoder_dim {} != decoder model_dim {}",
                self.encoder.decoder_dim, self.decoder.model_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.rare_percentile) {
            return Err(Error::Config("rare_percentile outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
