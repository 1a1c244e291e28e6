use std::collections::HashMap;
use std::io::Write;
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{Objective, PretrainConfig};
use super::masking::{make_masked_batch, MaskedBatch};
use super::objective::{
    discriminator_step, generator_step, sample_replacements, token_accuracy, MlmModel, RtdModels,
};
use super::schedule::learning_rate;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, EncoderConfig, EncoderModel};
use crate::rng::stream_rng;
use crate::tensor::{Adam, Graph, ParamStore};
use crate::tokenizer::SpecialIds;

/// Batches prepared ahead of the training step.
const PREFETCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub mlm_loss: f64,
    pub disc_loss: Option<f64>,
    pub disc_acc: Option<f64>,
    pub total_loss: f64,
    pub masked: usize,
    /// Non-pad tokens seen by the discriminator, and how many were replaced.
    pub tokens: usize,
    pub replaced: usize,
    pub skipped: usize,
}

/// One joint update: `mlm + λ·disc`, a single backward pass and one Adam
/// step over the union of generator and discriminator parameters.
#[allow(clippy::too_many_arguments)]
pub fn rtd_train_step(
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    models: &RtdModels,
    batch: &MaskedBatch,
    config: &PretrainConfig,
    step: u64,
) -> Result<StepMetrics> {
    let lr = learning_rate(step, config.peak_lr, config.warmup_steps, config.steps);
    let mut dropout = stream_rng(config.seed, "dropout", step);
    let mut sampler = stream_rng(config.seed, "sample", step);
    let mut g = Graph::new();
    let gen = generator_step(
        &mut g,
        store,
        &models.generator,
        &models.generator_head,
        batch,
        Some(&mut dropout),
    )?;
    let (corrupted, labels) = sample_replacements(g.value(gen.logits), batch, config.temperature, &mut sampler)?;
    let disc = discriminator_step(
        &mut g,
        store,
        &models.discriminator,
        &models.discriminator_head,
        &corrupted,
        &labels,
        &batch.attention,
        (batch.batch, batch.seq_len),
        Some(&mut dropout),
    )?;
    let weighted = g.scale(disc.loss, config.disc_loss_weight as f32);
    let total = g.add(gen.loss, weighted)?;
    let total_value = g.value(total).item();
    if !total_value.is_finite() {
        return Err(Error::NonFinite {
            what: "total loss".into(),
            detail: format!("step {step}: {total_value}"),
        });
    }
    let metrics = StepMetrics {
        step,
        lr,
        mlm_loss: g.value(gen.loss).item() as f64,
        disc_loss: Some(g.value(disc.loss).item() as f64),
        disc_acc: Some(token_accuracy(g.value(disc.logits).data(), &labels, &batch.attention)),
        total_loss: total_value as f64,
        masked: batch.num_masked(),
        tokens: batch.attention.iter().filter(|&&a| a).count(),
        replaced: labels.iter().filter(|&&l| l).count(),
        skipped: batch.skipped,
    };
    let grads = g.backward(total)?.into_param_grads(store.len());
    drop(g);
    adam.step(store, &grads, lr)?;
    Ok(metrics)
}

/// Masked-language-model update for the single-model baseline.
pub fn mlm_train_step(
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    model: &MlmModel,
    batch: &MaskedBatch,
    config: &PretrainConfig,
    step: u64,
) -> Result<StepMetrics> {
    let lr = learning_rate(step, config.peak_lr, config.warmup_steps, config.steps);
    let mut dropout = stream_rng(config.seed, "dropout", step);
    let mut g = Graph::new();
    let out = generator_step(&mut g, store, &model.encoder, &model.head, batch, Some(&mut dropout))?;
    let loss = g.value(out.loss).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "mlm loss".into(),
            detail: format!("step {step}: {loss}"),
        });
    }
    let metrics = StepMetrics {
        step,
        lr,
        mlm_loss: loss as f64,
        disc_loss: None,
        disc_acc: None,
        total_loss: loss as f64,
        masked: batch.num_masked(),
        tokens: batch.attention.iter().filter(|&&a| a).count(),
        replaced: 0,
        skipped: batch.skipped,
    };
    let grads = g.backward(out.loss)?.into_param_grads(store.len());
    drop(g);
    adam.step(store, &grads, lr)?;
    Ok(metrics)
}

/// The masked batch for update `step` (1-based). Sequence order is a fresh
/// seeded permutation per epoch, so any step's batch can be rebuilt without
/// replaying earlier ones.
pub fn prepare_batch(
    windows: &[Vec<u32>],
    config: &PretrainConfig,
    specials: SpecialIds,
    step: u64,
) -> Result<MaskedBatch> {
    let n = windows.len() as u64;
    if n == 0 {
        return Err(Error::Invalid("no training sequences".into()));
    }
    let b = config.batch_size as u64;
    let mut perms: HashMap<u64, Vec<usize>> = HashMap::new();
    let seqs: Vec<&[u32]> = (0..b)
        .map(|j| {
            let i = (step - 1) * b + j;
            let (epoch, pos) = (i / n, (i % n) as usize);
            let perm = perms.entry(epoch).or_insert_with(|| {
                let mut p: Vec<usize> = (0..n as usize).collect();
                p.shuffle(&mut stream_rng(config.seed, "order", epoch));
                p
            });
            windows[perm[pos]].as_slice()
        })
        .collect();
    make_masked_batch(
        &seqs,
        config.mask_fraction,
        specials,
        &mut stream_rng(config.seed, "mask", step),
    )
}

/// Self-description stored in pretraining checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainMeta {
    pub objective: Objective,
    pub encoder: EncoderConfig,
    pub generator: Option<EncoderConfig>,
    pub pretrain: PretrainConfig,
    pub specials: SpecialIds,
}

impl PretrainMeta {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))
    }
}

/// Fails with every differing field when `found` is not `expected`.
pub fn check_config(what: &str, expected: &EncoderConfig, found: &EncoderConfig) -> Result<()> {
    let diff = found.diff(expected);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} config does not match the checkpoint ({})",
            diff.join(", ")
        )))
    }
}

#[derive(Clone, Debug)]
enum Models {
    Rtd(RtdModels),
    Mlm(MlmModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutMetrics {
    pub mlm_loss: f64,
    pub disc_loss: Option<f64>,
    pub disc_acc: Option<f64>,
    pub sequences: usize,
}

/// Owns parameters, optimizer state and the data for one pretraining run.
pub struct Pretrainer {
    meta: PretrainMeta,
    store: ParamStore<f32>,
    adam: Adam<f32>,
    models: Models,
    step: u64,
    windows: Arc<Vec<Vec<u32>>>,
}

impl Pretrainer {
    pub fn new_rtd(
        generator: &EncoderConfig,
        discriminator: &EncoderConfig,
        config: &PretrainConfig,
        windows: Vec<Vec<u32>>,
        specials: SpecialIds,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let models = RtdModels::build(generator, discriminator, config.tying, &mut store, config.seed)?;
        Self::assemble(
            PretrainMeta {
                objective: Objective::Rtd,
                encoder: discriminator.clone(),
                generator: Some(generator.clone()),
                pretrain: config.clone(),
                specials,
            },
            store,
            None,
            Models::Rtd(models),
            0,
            windows,
        )
    }

    pub fn new_mlm(
        encoder: &EncoderConfig,
        config: &PretrainConfig,
        windows: Vec<Vec<u32>>,
        specials: SpecialIds,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = MlmModel::build(encoder, &mut store, config.seed)?;
        Self::assemble(
            PretrainMeta {
                objective: Objective::Mlm,
                encoder: encoder.clone(),
                generator: None,
                pretrain: config.clone(),
                specials,
            },
            store,
            None,
            Models::Mlm(model),
            0,
            windows,
        )
    }

    fn assemble(
        meta: PretrainMeta,
        store: ParamStore<f32>,
        adam: Option<Adam<f32>>,
        models: Models,
        step: u64,
        windows: Vec<Vec<u32>>,
    ) -> Result<Self> {
        if let Some(bad) = windows.iter().find(|w| w.len() != meta.pretrain.seq_len) {
            return Err(Error::Invalid(format!(
                "training window of length {} for seq_len {}",
                bad.len(),
                meta.pretrain.seq_len
            )));
        }
        let adam = adam.unwrap_or_else(|| Adam::new(meta.pretrain.adam, &store));
        Ok(Pretrainer {
            meta,
            store,
            adam,
            models,
            step,
            windows: Arc::new(windows),
        })
    }

    /// Continues a run from `ckpt`. Data order and random streams depend
    /// only on the seed and the step number, so the continuation matches an
    /// uninterrupted run.
    pub fn resume(ckpt: Checkpoint, windows: Vec<Vec<u32>>) -> Result<Self> {
        let meta = PretrainMeta::from_checkpoint(&ckpt)?;
        meta.pretrain.validate()?;
        let models = match meta.objective {
            Objective::Rtd => {
                let gen = meta
                    .generator
                    .as_ref()
                    .ok_or_else(|| Error::Config("RTD checkpoint without a generator config".into()))?;
                Models::Rtd(RtdModels::attach(gen, &meta.encoder, meta.pretrain.tying, &ckpt.params)?)
            }
            Objective::Mlm => Models::Mlm(MlmModel::attach(&meta.encoder, &ckpt.params)?),
        };
        let adam = match ckpt.optimizer {
            Some(a) if a.step_count() == ckpt.step => a,
            Some(a) => {
                return Err(Error::Config(format!(
                    "optimizer is at step {} but the checkpoint at step {}",
                    a.step_count(),
                    ckpt.step
                )))
            }
            None => return Err(Error::Config("checkpoint has no optimizer state to resume from".into())),
        };
        Self::assemble(meta, ckpt.params, Some(adam), models, ckpt.step, windows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            meta: serde_json::to_value(&self.meta).expect("meta serializes"),
            params: self.store.clone(),
            optimizer: Some(self.adam.clone()),
        }
    }

    pub fn meta(&self) -> &PretrainMeta {
        &self.meta
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.meta.pretrain
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// The encoder kept for downstream use: the discriminator, or the MLM model.
    pub fn encoder(&self) -> &EncoderModel {
        match &self.models {
            Models::Rtd(m) => &m.discriminator,
            Models::Mlm(m) => &m.encoder,
        }
    }

    pub fn rtd_models(&self) -> Option<&RtdModels> {
        match &self.models {
            Models::Rtd(m) => Some(m),
            Models::Mlm(_) => None,
        }
    }

    fn update(&mut self, batch: &MaskedBatch, step: u64) -> Result<StepMetrics> {
        let m = match &self.models {
            Models::Rtd(models) => rtd_train_step(&mut self.store, &mut self.adam, models, batch, &self.meta.pretrain, step)?,
            Models::Mlm(model) => mlm_train_step(&mut self.store, &mut self.adam, model, batch, &self.meta.pretrain, step)?,
        };
        self.step = step;
        Ok(m)
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step + 1;
        let batch = prepare_batch(&self.windows, &self.meta.pretrain, self.meta.specials, step)?;
        self.update(&batch, step)
    }

    /// Trains until step `until` (inclusive). Batches are prepared on a
    /// producer thread through a bounded queue; they depend only on the step
    /// number, so results are independent of scheduling.
    pub fn run(&mut self, until: u64, mut on_step: impl FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        let start = self.step + 1;
        if start > until {
            return Ok(());
        }
        let windows = Arc::clone(&self.windows);
        let config = self.meta.pretrain.clone();
        let specials = self.meta.specials;
        std::thread::scope(|s| {
            let (tx, rx) = sync_channel(PREFETCH);
            s.spawn(move || {
                for step in start..=until {
                    let b = prepare_batch(&windows, &config, specials, step);
                    if tx.send((step, b)).is_err() {
                        break;
                    }
                }
            });
            for (step, batch) in rx {
                let m = self.update(&batch?, step)?;
                on_step(&m)?;
            }
            Ok(())
        })
    }

    /// Losses on held-out windows without dropout or updates. Masks and
    /// replacements come from `seed`, so repeated calls agree.
    pub fn evaluate(&self, windows: &[Vec<u32>], seed: u64) -> Result<HeldoutMetrics> {
        let cfg = &self.meta.pretrain;
        let (mut mlm, mut disc, mut acc, mut n_batches, mut n_seq) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (i, chunk) in windows.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<&[u32]> = chunk.iter().map(|w| w.as_slice()).collect();
            let Ok(batch) = make_masked_batch(
                &seqs,
                cfg.mask_fraction,
                self.meta.specials,
                &mut stream_rng(seed, "heldout.mask", i as u64),
            ) else {
                continue;
            };
            let mut g = Graph::new();
            match &self.models {
                Models::Rtd(m) => {
                    let gen = generator_step(&mut g, &self.store, &m.generator, &m.generator_head, &batch, None)?;
                    let (corrupted, labels) = sample_replacements(
                        g.value(gen.logits),
                        &batch,
                        cfg.temperature,
                        &mut stream_rng(seed, "heldout.sample", i as u64),
                    )?;
                    let d = discriminator_step(
                        &mut g,
                        &self.store,
                        &m.discriminator,
                        &m.discriminator_head,
                        &corrupted,
                        &labels,
                        &batch.attention,
                        (batch.batch, batch.seq_len),
                        None,
                    )?;
                    mlm += g.value(gen.loss).item() as f64;
                    disc += g.value(d.loss).item() as f64;
                    acc += token_accuracy(g.value(d.logits).data(), &labels, &batch.attention);
                }
                Models::Mlm(m) => {
                    let out = generator_step(&mut g, &self.store, &m.encoder, &m.head, &batch, None)?;
                    mlm += g.value(out.loss).item() as f64;
                }
            }
            n_batches += 1;
            n_seq += batch.batch;
        }
        if n_batches == 0 {
            return Err(Error::Invalid("no held-out sequence could be masked".into()));
        }
        let k = n_batches as f64;
        let rtd = matches!(self.models, Models::Rtd(_));
        Ok(HeldoutMetrics {
            mlm_loss: mlm / k,
            disc_loss: rtd.then_some(disc / k),
            disc_acc: rtd.then_some(acc / k),
            sequences: n_seq,
        })
    }
}

/// Writes `step,mlm_loss,disc_loss,disc_acc,lr` rows, each averaging the
/// steps since the previous row. Empty cells when there is no discriminator.
pub struct MetricsLog<W: Write> {
    out: W,
    every: u64,
    pending: Vec<StepMetrics>,
}

pub const METRICS_HEADER: &str = "step,mlm_loss,disc_loss,disc_acc,lr";

impl<W: Write> MetricsLog<W> {
    pub fn new(mut out: W, every: u64, write_header: bool) -> Result<Self> {
        if write_header {
            writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::Invalid(format!("metrics log: {e}")))?;
        }
        Ok(MetricsLog {
            out,
            every: every.max(1),
            pending: Vec::new(),
        })
    }

    pub fn record(&mut self, m: &StepMetrics) -> Result<()> {
        self.pending.push(m.clone());
        if m.step % self.every == 0 {
            self.flush_row()?;
        }
        Ok(())
    }

    /// Emits a row for any steps not yet written.
    pub fn finish(mut self) -> Result<W> {
        self.flush_row()?;
        Ok(self.out)
    }

    fn flush_row(&mut self) -> Result<()> {
        let Some(last) = self.pending.last() else {
            return Ok(());
        };
        let n = self.pending.len() as f64;
        let mean = |f: &dyn Fn(&StepMetrics) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = self.pending.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / n)
        };
        let cell = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        let row = format!(
            "{},{},{},{},{:e}",
            last.step,
            cell(mean(&|m| Some(m.mlm_loss))),
            cell(mean(&|m| m.disc_loss)),
            cell(mean(&|m| m.disc_acc)),
            last.lr
        );
        writeln!(self.out, "{row}").map_err(|e| Error::Invalid(format!("metrics log: {e}")))?;
        self.pending.clear();
        Ok(())
    }
}

/// Mean of the last `window` values (all of them if fewer).
pub fn trailing_mean(values: &[f64], window: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

