use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rtd_core::data::SyntheticLangSpec;
use rtd_core::finetune::FinetuneConfig;
use rtd_core::model::EncoderConfig;
use rtd_core::pretrain::{PretrainConfig, ProbeConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
    pub min_frequency: u64,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings {
            vocab_size: 8192,
            min_frequency: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub budget_steps: u64,
    pub probe_every: u64,
    pub seeds: Vec<u64>,
    /// MLM baseline; must equal the discriminator. Defaults to it.
    pub mlm_encoder: Option<EncoderConfig>,
    pub probe: ProbeConfig,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            budget_steps: 300,
            probe_every: 100,
            seeds: vec![0, 1, 2, 3, 4],
            mlm_encoder: None,
            probe: ProbeConfig::default(),
        }
    }
}

/// Everything a run reads. `seed` is copied into every seeded section, and
/// `vocab_size` of both encoders follows the vocabulary actually used, so
/// the effective config written to `run.json` is the one that ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub tokenizer: TokenizerSettings,
    pub generator: EncoderConfig,
    pub discriminator: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub synthetic: SyntheticLangSpec,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    /// Runs in minutes on one core.
    pub fn toy() -> Self {
        let v = SyntheticLangSpec::default().vocab_size;
        RunConfig {
            seed: 0,
            tokenizer: TokenizerSettings::default(),
            generator: EncoderConfig::toy_generator(v),
            discriminator: EncoderConfig::toy_discriminator(v),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            synthetic: SyntheticLangSpec::default(),
            bench: BenchSettings::default(),
        }
    }

    /// Full-size hyperparameters, for reference and parameter counts.
    pub fn paper() -> Self {
        RunConfig {
            tokenizer: TokenizerSettings {
                vocab_size: 64_000,
                min_frequency: 2,
            },
            generator: EncoderConfig::paper_generator(64_000),
            discriminator: EncoderConfig::paper_discriminator(64_000),
            pretrain: PretrainConfig::paper(),
            synthetic: SyntheticLangSpec {
                vocab_size: 64_000,
                ..SyntheticLangSpec::default()
            },
            ..Self::toy()
        }
    }

    /// Reads a JSON config; errors name the offending field.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            anyhow::anyhow!("config {}: at `{at}`: {}", path.display(), e.into_inner())
        })
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.synthetic.seed = seed;
    }

    pub fn set_vocab_size(&mut self, n: usize) {
        self.generator.vocab_size = n;
        self.discriminator.vocab_size = n;
        if let Some(m) = &mut self.bench.mlm_encoder {
            m.vocab_size = n;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, r: rtd_core::Result<()>| r.with_context(|| format!("config field `{name}`"));
        field("generator", self.generator.validate())?;
        field("discriminator", self.discriminator.validate())?;
        field("pretrain", self.pretrain.validate())?;
        if self.pretrain.seq_len > self.discriminator.max_positions || self.pretrain.seq_len > self.generator.max_positions {
            bail!(
                "config field `pretrain.seq_len`: {} exceeds max_positions of the models",
                self.pretrain.seq_len
            );
        }
        if self.tokenizer.vocab_size < rtd_core::tokenizer::SPECIAL_TOKENS.len() + 1 {
            bail!("config field `tokenizer.vocab_size`: too small ({})", self.tokenizer.vocab_size);
        }
        if self.bench.seeds.is_empty() {
            bail!("config field `bench.seeds`: at least one seed is required");
        }
        Ok(())
    }
}
