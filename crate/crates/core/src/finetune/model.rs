use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, EmbeddingTying, EncoderConfig, EncoderInput, EncoderModel, Head, HeadKind, SharedEmbeddings};
use crate::pretrain::{PretrainMeta, ENCODER_PREFIX};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::tokenizer::SpecialIds;

/// Checkpoint metadata of a fine-tuned model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMeta {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    pub specials: SpecialIds,
}

/// Model-ready rows, flattened `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub attention: Vec<bool>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Length up to and including the last attended position.
    pub fn used_len(&self) -> usize {
        self.attention.iter().rposition(|&a| a).map_or(0, |i| i + 1)
    }
}

/// An encoder plus one task head, alone in its own parameter store.
#[derive(Clone, Debug)]
pub struct TaskModel {
    meta: TaskMeta,
    encoder: EncoderModel,
    head: Head,
    store: ParamStore<f32>,
}

impl TaskModel {
    /// Randomly initialized encoder and head.
    pub fn fresh(config: &EncoderConfig, head: HeadKind, specials: SpecialIds, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = EncoderModel::build(config, ENCODER_PREFIX, &mut store, seed, SharedEmbeddings::default())?;
        let head = Self::new_head(head, config, &mut store, seed)?;
        Ok(TaskModel {
            meta: TaskMeta {
                encoder: config.clone(),
                head: head.kind(),
                specials,
            },
            encoder,
            head,
            store,
        })
    }

    /// Copies the pretrained encoder out of a pretraining checkpoint (the
    /// discriminator for RTD runs) and puts a freshly initialized head on top.
    /// Pretraining heads and the generator are left behind.
    pub fn from_pretrained(ckpt: &Checkpoint, head: HeadKind, seed: u64) -> Result<Self> {
        let meta = PretrainMeta::from_checkpoint(ckpt)?;
        let config = meta.encoder;
        let mut store = ParamStore::new();
        for spec in EncoderModel::layout(&config, ENCODER_PREFIX, EmbeddingTying::NONE) {
            let id = ckpt
                .params
                .id(&spec.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks encoder parameter `{}`", spec.name)))?;
            let value = ckpt.params.get(id);
            if value.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "checkpoint parameter `{}` has shape {:?}, encoder config needs {:?}",
                    spec.name,
                    value.shape(),
                    spec.shape
                )));
            }
            store.add(spec.name.clone(), value.clone(), ckpt.params.decays(id))?;
        }
        let encoder = EncoderModel::attach(&config, ENCODER_PREFIX, &store, SharedEmbeddings::default())?;
        let head = Self::new_head(head, &config, &mut store, seed)?;
        Ok(TaskModel {
            meta: TaskMeta {
                encoder: config,
                head: head.kind(),
                specials: meta.specials,
            },
            encoder,
            head,
            store,
        })
    }

    fn new_head(kind: HeadKind, config: &EncoderConfig, store: &mut ParamStore<f32>, seed: u64) -> Result<Head> {
        if matches!(kind, HeadKind::Mlm | HeadKind::Rtd) {
            return Err(Error::Config(format!("{kind:?} is a pretraining head, not a task head")));
        }
        Head::build(kind, config, ENCODER_PREFIX, store, seed, None)
    }

    /// Reloads a model written by [`TaskModel::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: TaskMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Config(format!("fine-tuned checkpoint metadata: {e}")))?;
        let encoder = EncoderModel::attach(&meta.encoder, ENCODER_PREFIX, &ckpt.params, SharedEmbeddings::default())?;
        let head = Head::attach(meta.head, &meta.encoder, ENCODER_PREFIX, &ckpt.params, None)?;
        Ok(TaskModel {
            meta,
            encoder,
            head,
            store: ckpt.params.clone(),
        })
    }

    pub fn checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint {
            step,
            meta: serde_json::to_value(&self.meta).expect("meta serializes"),
            params: self.store.clone(),
            optimizer: None,
        }
    }

    pub fn meta(&self) -> &TaskMeta {
        &self.meta
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.meta.encoder
    }

    pub fn head_kind(&self) -> HeadKind {
        self.meta.head
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Head output for `rows` (all of one length): `[b, l, 2]` for spans,
    /// `[b, classes]` for classification, `[b, l, tags]` for tagging.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p, f32>,
        rows: &[&Encoded],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (ids, segments, attention, b, l) = stack(rows)?;
        let input = EncoderInput {
            ids: &ids,
            segments: Some(&segments),
            attention: &attention,
            batch: b,
            seq_len: l,
        };
        let hidden = self.encoder.forward(g, &self.store, &input, dropout)?.hidden;
        self.head.forward(g, &self.store, hidden)
    }

    /// Inference in batches of `batch`; one output tensor per row, with the
    /// leading batch axis dropped. Trailing padding is trimmed per batch, so
    /// sequence axes may be shorter than the rows.
    pub fn predict(&self, rows: &[Encoded], batch: usize) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(batch.max(1)) {
            let trimmed = trim(chunk);
            let refs: Vec<&Encoded> = trimmed.iter().collect();
            let mut g = Graph::new();
            let logits = self.forward(&mut g, &refs, None)?;
            let value = g.value(logits);
            let shape = value.shape()[1..].to_vec();
            let per: usize = shape.iter().product();
            for r in 0..chunk.len() {
                out.push(Tensor::new(shape.clone(), value.data()[r * per..(r + 1) * per].to_vec())?);
            }
        }
        Ok(out)
    }
}

/// Cuts the shared trailing padding of a batch.
pub(crate) fn trim(rows: &[Encoded]) -> Vec<Encoded> {
    let l = rows.iter().map(Encoded::used_len).max().unwrap_or(0).max(1);
    rows.iter()
        .map(|r| Encoded {
            ids: r.ids[..l.min(r.len())].to_vec(),
            segments: r.segments[..l.min(r.len())].to_vec(),
            attention: r.attention[..l.min(r.len())].to_vec(),
        })
        .collect()
}

type Stacked = (Vec<u32>, Vec<u8>, Vec<bool>, usize, usize);

fn stack(rows: &[&Encoded]) -> Result<Stacked> {
    let l = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != l || r.segments.len() != l || r.attention.len() != l) {
        return Err(Error::Invalid("rows of one batch must share one length".into()));
    }
    let mut ids = Vec::with_capacity(rows.len() * l);
    let mut segments = Vec::with_capacity(rows.len() * l);
    let mut attention = Vec::with_capacity(rows.len() * l);
    for r in rows {
        ids.extend_from_slice(&r.ids);
        segments.extend_from_slice(&r.segments);
        attention.extend_from_slice(&r.attention);
    }
    Ok((ids, segments, attention, rows.len(), l))
}
