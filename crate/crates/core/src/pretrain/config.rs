use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingTying;
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Generator + discriminator, replaced-token detection.
    Rtd,
    /// A single masked-language model.
    Mlm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mask_fraction: f64,
    pub steps: u64,
    pub batch_size: usize,
    /// Packed window length, `[CLS]` included.
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Weight λ of the discriminator loss in `mlm + λ·disc`.
    pub disc_loss_weight: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Steps per metrics row.
    pub log_every: u64,
    pub tying: EmbeddingTying,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        PretrainConfig {
            mask_fraction: 0.15,
            steps: 300,
            batch_size: 32,
            seq_len: 32,
            peak_lr: 1e-3,
            warmup_steps: 30,
            disc_loss_weight: 50.0,
            temperature: 1.0,
            seed: 0,
            log_every: 10,
            tying: EmbeddingTying::TOKEN_AND_POSITION,
            adam: AdamConfig::default(),
        }
    }
}

impl PretrainConfig {
    /// Full-scale hyperparameters: 2M steps of 256 × 512 tokens, peak 2e-4
    /// after 10k warmup steps.
    pub fn paper() -> Self {
        PretrainConfig {
            steps: 2_000_000,
            batch_size: 256,
            seq_len: 512,
            peak_lr: 2e-4,
            warmup_steps: 10_000,
            log_every: 100,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return bad(format!("mask_fraction must be in (0, 1), got {}", self.mask_fraction));
        }
        if self.warmup_steps > self.steps {
            return bad(format!("warmup_steps {} exceeds steps {}", self.warmup_steps, self.steps));
        }
        if !(self.disc_loss_weight >= 0.0 && self.disc_loss_weight.is_finite()) {
            return bad(format!("disc_loss_weight must be finite and >= 0, got {}", self.disc_loss_weight));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be finite and >= 0, got {}", self.peak_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.seq_len < 3 {
            return bad(format!("seq_len must be at least 3, got {}", self.seq_len));
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        Ok(())
    }
}
