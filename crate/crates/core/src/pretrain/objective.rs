use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::masking::MaskedBatch;
use crate::error::{Error, Result};
use crate::model::{EmbeddingTying, EncoderConfig, EncoderInput, EncoderModel, Head, HeadKind, SharedEmbeddings};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const GENERATOR_PREFIX: &str = "generator.";

/// Generator and discriminator living in one parameter store. The
/// discriminator (registered under [`ENCODER_PREFIX`]) owns every embedding
/// table; the generator borrows those selected by the tying policy.
#[derive(Clone, Debug)]
pub struct RtdModels {
    pub generator: EncoderModel,
    pub generator_head: Head,
    pub discriminator: EncoderModel,
    pub discriminator_head: Head,
}

fn borrowed(from: &EncoderModel, tying: EmbeddingTying) -> SharedEmbeddings {
    let all = from.embeddings();
    SharedEmbeddings {
        token: all.token.filter(|_| tying.token),
        position: all.position.filter(|_| tying.position),
        segment: all.segment.filter(|_| tying.segment),
    }
}

impl RtdModels {
    pub fn build<T: Scalar>(
        generator: &EncoderConfig,
        discriminator: &EncoderConfig,
        tying: EmbeddingTying,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        if generator.vocab_size != discriminator.vocab_size {
            return Err(Error::Config(format!(
                "generator vocab_size {} differs from discriminator vocab_size {}",
                generator.vocab_size, discriminator.vocab_size
            )));
        }
        let d = EncoderModel::build(discriminator, ENCODER_PREFIX, store, seed, SharedEmbeddings::default())?;
        let dh = Head::build(HeadKind::Rtd, discriminator, ENCODER_PREFIX, store, seed, None)?;
        let g = EncoderModel::build(generator, GENERATOR_PREFIX, store, seed, borrowed(&d, tying))?;
        let gh = Head::build(HeadKind::Mlm, generator, GENERATOR_PREFIX, store, seed, Some(g.token_embeddings()))?;
        Ok(RtdModels {
            generator: g,
            generator_head: gh,
            discriminator: d,
            discriminator_head: dh,
        })
    }

    /// Rebinds to parameters already in `store`, e.g. from a checkpoint.
    pub fn attach<T: Scalar>(
        generator: &EncoderConfig,
        discriminator: &EncoderConfig,
        tying: EmbeddingTying,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        let d = EncoderModel::attach(discriminator, ENCODER_PREFIX, store, SharedEmbeddings::default())?;
        let dh = Head::attach(HeadKind::Rtd, discriminator, ENCODER_PREFIX, store, None)?;
        let g = EncoderModel::attach(generator, GENERATOR_PREFIX, store, borrowed(&d, tying))?;
        let gh = Head::attach(HeadKind::Mlm, generator, GENERATOR_PREFIX, store, Some(g.token_embeddings()))?;
        Ok(RtdModels {
            generator: g,
            generator_head: gh,
            discriminator: d,
            discriminator_head: dh,
        })
    }
}

/// A single encoder trained with masked-token prediction.
#[derive(Clone, Debug)]
pub struct MlmModel {
    pub encoder: EncoderModel,
    pub head: Head,
}

impl MlmModel {
    pub fn build<T: Scalar>(config: &EncoderConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let encoder = EncoderModel::build(config, ENCODER_PREFIX, store, seed, SharedEmbeddings::default())?;
        let head = Head::build(HeadKind::Mlm, config, ENCODER_PREFIX, store, seed, Some(encoder.token_embeddings()))?;
        Ok(MlmModel { encoder, head })
    }

    pub fn attach<T: Scalar>(config: &EncoderConfig, store: &ParamStore<T>) -> Result<Self> {
        let encoder = EncoderModel::attach(config, ENCODER_PREFIX, store, SharedEmbeddings::default())?;
        let head = Head::attach(HeadKind::Mlm, config, ENCODER_PREFIX, store, Some(encoder.token_embeddings()))?;
        Ok(MlmModel { encoder, head })
    }
}

pub struct MlmOutput {
    pub loss: Var,
    /// `[num_masked, vocab]`, rows in [`MaskedBatch::masked_indices`] order.
    pub logits: Var,
    pub positions: Vec<usize>,
}

/// Masked-token prediction: mean cross-entropy over masked positions only.
/// Only the masked rows of the hidden states reach the output layer.
pub fn generator_step<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    encoder: &EncoderModel,
    head: &Head,
    batch: &MaskedBatch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<MlmOutput> {
    let positions = batch.masked_indices();
    if positions.is_empty() {
        return Err(Error::Invalid("batch has no masked positions".into()));
    }
    let input = EncoderInput {
        ids: &batch.masked,
        segments: None,
        attention: &batch.attention,
        batch: batch.batch,
        seq_len: batch.seq_len,
    };
    let hidden = encoder.forward(g, store, &input, dropout)?.hidden;
    let h = encoder.config().hidden_size;
    let flat = g.reshape(hidden, &[batch.batch * batch.seq_len, h])?;
    let rows = g.embedding(flat, &positions, &[positions.len()])?;
    let logits = head.forward(g, store, rows)?;
    let targets: Vec<Option<usize>> = positions.iter().map(|&p| Some(batch.original[p] as usize)).collect();
    let loss = g.cross_entropy(logits, &targets)?;
    Ok(MlmOutput { loss, logits, positions })
}

/// Draws an index from `softmax(logits / temperature)`.
pub fn sample_categorical<T: Scalar>(logits: &[T], temperature: f64, rng: &mut impl Rng) -> Result<usize> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let z: Vec<f64> = logits
        .iter()
        .map(|x| x.to_f64().unwrap_or(f64::NAN) / temperature)
        .collect();
    if let Some(i) = z.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "generator logits".into(),
            detail: format!("entry {i}"),
        });
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    Ok(WeightedIndex::new(&weights).expect("max entry has weight 1").sample(rng))
}

/// Replaces every masked position by a sample from the generator. Works on
/// plain values, so nothing flows back into the generator through the
/// samples. Labels are `true` ("replaced") exactly where the sample differs
/// from the original token.
pub fn sample_replacements<T: Scalar>(
    logits: &Tensor<T>,
    batch: &MaskedBatch,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<u32>, Vec<bool>)> {
    let positions = batch.masked_indices();
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != positions.len() {
        return Err(Error::shape(
            "sample_replacements",
            format!("logits {shape:?} for {} masked positions", positions.len()),
        ));
    }
    let v = shape[1];
    let mut corrupted = batch.original.clone();
    for (r, &p) in positions.iter().enumerate() {
        corrupted[p] = sample_categorical(&logits.data()[r * v..(r + 1) * v], temperature, rng)? as u32;
    }
    let labels = rtd_labels(&batch.original, &corrupted);
    Ok((corrupted, labels))
}

pub fn rtd_labels(original: &[u32], corrupted: &[u32]) -> Vec<bool> {
    original.iter().zip(corrupted).map(|(a, b)| a != b).collect()
}

pub struct DiscOutput {
    pub loss: Var,
    /// `[batch, seq_len]`
    pub logits: Var,
}

/// Per-token sigmoid cross-entropy averaged over every non-`[PAD]` position.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    encoder: &EncoderModel,
    head: &Head,
    corrupted: &[u32],
    labels: &[bool],
    attention: &[bool],
    (batch, seq_len): (usize, usize),
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<DiscOutput> {
    if labels.len() != corrupted.len() {
        return Err(Error::shape(
            "discriminator_step",
            format!("{} labels for {} tokens", labels.len(), corrupted.len()),
        ));
    }
    let input = EncoderInput {
        ids: corrupted,
        segments: None,
        attention,
        batch,
        seq_len,
    };
    let hidden = encoder.forward(g, store, &input, dropout)?.hidden;
    let logits = head.forward(g, store, hidden)?;
    let targets: Vec<T> = labels.iter().map(|&l| if l { T::one() } else { T::zero() }).collect();
    let weights: Vec<T> = attention.iter().map(|&a| if a { T::one() } else { T::zero() }).collect();
    let loss = g.bce_with_logits(logits, &targets, &weights)?;
    Ok(DiscOutput { loss, logits })
}

/// Fraction of non-pad positions where `logit > 0` agrees with the label.
pub fn token_accuracy<T: Scalar>(logits: &[T], labels: &[bool], attention: &[bool]) -> f64 {
    let mut n = 0usize;
    let mut ok = 0usize;
    for ((&z, &l), &a) in logits.iter().zip(labels).zip(attention) {
        if a {
            n += 1;
            if (z > T::zero()) == l {
                ok += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        ok as f64 / n as f64
    }
}
