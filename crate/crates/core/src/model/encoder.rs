use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, LAYER_NORM_EPS, SEGMENT_VOCAB};
use super::layout::{lookup, register, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Additive attention bias for padded keys; `exp` of it underflows to exactly 0.
const MASKED_SCORE: f64 = -1e9;

/// Which embedding tables a model borrows from another one instead of owning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingTying {
    pub token: bool,
    pub position: bool,
    pub segment: bool,
}

impl EmbeddingTying {
    pub const NONE: EmbeddingTying = EmbeddingTying {
        token: false,
        position: false,
        segment: false,
    };

    /// Generator borrows the discriminator's token and position tables.
    pub const TOKEN_AND_POSITION: EmbeddingTying = EmbeddingTying {
        token: true,
        position: true,
        segment: false,
    };
}

/// Embedding tables a model can lend to another model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SharedEmbeddings {
    pub token: Option<ParamId>,
    pub position: Option<ParamId>,
    pub segment: Option<ParamId>,
}

impl SharedEmbeddings {
    pub fn tying(&self) -> EmbeddingTying {
        EmbeddingTying {
            token: self.token.is_some(),
            position: self.position.is_some(),
            segment: self.segment.is_some(),
        }
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    attn_out: (ParamId, ParamId),
    attn_norm: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
    ffn_norm: (ParamId, ParamId),
}

/// Input of one forward pass, flattened row-major as `[batch, seq_len]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub ids: &'a [u32],
    /// Defaults to all-zero segments.
    pub segments: Option<&'a [u8]>,
    /// `false` marks `[PAD]`: such keys are never attended to.
    pub attention: &'a [bool],
    pub batch: usize,
    pub seq_len: usize,
}

pub struct EncoderOutput {
    /// `[batch, seq_len, hidden_size]`
    pub hidden: Var,
    /// Per layer, `[batch, heads, seq_len, seq_len]` attention probabilities.
    pub attention: Vec<Var>,
}

/// Post-layer-norm bidirectional transformer encoder. Holds parameter ids only;
/// values live in a [`ParamStore`], possibly shared with other models.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: EncoderConfig,
    prefix: String,
    token: ParamId,
    position: ParamId,
    segment: ParamId,
    emb_norm: (ParamId, ParamId),
    projection: Option<(ParamId, ParamId)>,
    layers: Vec<LayerParams>,
    owned: Vec<ParamSpec>,
}

fn linear_specs(out: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec::weight(format!("{name}.weight"), vec![fan_in, fan_out]));
    out.push(ParamSpec::bias(format!("{name}.bias"), fan_out));
}

fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, width: usize) {
    out.push(ParamSpec::gain(format!("{name}.gain"), width));
    out.push(ParamSpec::bias(format!("{name}.bias"), width));
}

impl EncoderModel {
    /// Every parameter array the model owns, in registration order. Tables
    /// flagged in `tying` are borrowed and therefore absent.
    pub fn layout(config: &EncoderConfig, prefix: &str, tying: EmbeddingTying) -> Vec<ParamSpec> {
        let (e, h, f) = (config.embedding_size, config.hidden_size, config.ffn_size);
        let mut s = Vec::new();
        if !tying.token {
            s.push(ParamSpec::weight(format!("{prefix}embeddings.token"), vec![config.vocab_size, e]));
        }
        if !tying.position {
            s.push(ParamSpec::weight(format!("{prefix}embeddings.position"), vec![config.max_positions, e]));
        }
        if !tying.segment {
            s.push(ParamSpec::weight(format!("{prefix}embeddings.segment"), vec![SEGMENT_VOCAB, e]));
        }
        norm_specs(&mut s, &format!("{prefix}embeddings.norm"), e);
        if config.has_projection() {
            linear_specs(&mut s, &format!("{prefix}embeddings.projection"), e, h);
        }
        for i in 0..config.num_layers {
            let l = format!("{prefix}layer{i}");
            for part in ["query", "key", "value", "output"] {
                linear_specs(&mut s, &format!("{l}.attention.{part}"), h, h);
            }
            norm_specs(&mut s, &format!("{l}.attention.norm"), h);
            linear_specs(&mut s, &format!("{l}.ffn.input"), h, f);
            linear_specs(&mut s, &format!("{l}.ffn.output"), f, h);
            norm_specs(&mut s, &format!("{l}.ffn.norm"), h);
        }
        s
    }

    fn check_shared<T: Scalar>(config: &EncoderConfig, store: &ParamStore<T>, shared: SharedEmbeddings) -> Result<()> {
        config.validate()?;
        let check = |id: Option<ParamId>, what: &str, shape: [usize; 2]| -> Result<()> {
            if let Some(id) = id {
                if store.get(id).shape() != shape {
                    return Err(Error::Config(format!(
                        "shared {what} embeddings have shape {:?}, model needs {shape:?}",
                        store.get(id).shape()
                    )));
                }
            }
            Ok(())
        };
        let e = config.embedding_size;
        check(shared.token, "token", [config.vocab_size, e])?;
        check(shared.position, "position", [config.max_positions, e])?;
        check(shared.segment, "segment", [SEGMENT_VOCAB, e])?;

        Ok(())
    }

    /// Registers the model's own parameters in `store` (initialized from
    /// `seed`) and wires in any borrowed embedding tables.
    pub fn build<T: Scalar>(
        config: &EncoderConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        seed: u64,
        shared: SharedEmbeddings,
    ) -> Result<Self> {
        Self::check_shared(config, store, shared)?;
        let owned = Self::layout(config, prefix, shared.tying());
        register(store, &owned, seed)?;
        Self::attach(config, prefix, store, shared)
    }

    /// Binds to parameters already present in `store` (e.g. loaded from a
    /// checkpoint), checking names and shapes.
    pub fn attach<T: Scalar>(
        config: &EncoderConfig,
        prefix: &str,
        store: &ParamStore<T>,
        shared: SharedEmbeddings,
    ) -> Result<Self> {
        Self::check_shared(config, store, shared)?;
        let owned = Self::layout(config, prefix, shared.tying());
        for spec in &owned {
            let id = store
                .id(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", spec.name)))?;
            if store.get(id).shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, config needs {:?}",
                    spec.name,
                    store.get(id).shape(),
                    spec.shape
                )));
            }
        }
        let lin = |name: String| {
            (
                lookup(store, &format!("{name}.weight")),
                lookup(store, &format!("{name}.bias")),
            )
        };
        let norm = |name: String| {
            (
                lookup(store, &format!("{name}.gain")),
                lookup(store, &format!("{name}.bias")),
            )
        };
        let layers = (0..config.num_layers)
            .map(|i| {
                let l = format!("{prefix}layer{i}");
                LayerParams {
                    query: lin(format!("{l}.attention.query")),
                    key: lin(format!("{l}.attention.key")),
                    value: lin(format!("{l}.attention.value")),
                    attn_out: lin(format!("{l}.attention.output")),
                    attn_norm: norm(format!("{l}.attention.norm")),
                    ffn_in: lin(format!("{l}.ffn.input")),
                    ffn_out: lin(format!("{l}.ffn.output")),
                    ffn_norm: norm(format!("{l}.ffn.norm")),
                }
            })
            .collect();
        Ok(EncoderModel {
            config: config.clone(),
            prefix: prefix.to_string(),
            token: shared
                .token
                .unwrap_or_else(|| lookup(store, &format!("{prefix}embeddings.token"))),
            position: shared
                .position
                .unwrap_or_else(|| lookup(store, &format!("{prefix}embeddings.position"))),
            segment: shared
                .segment
                .unwrap_or_else(|| lookup(store, &format!("{prefix}embeddings.segment"))),
            emb_norm: norm(format!("{prefix}embeddings.norm")),
            projection: config
                .has_projection()
                .then(|| lin(format!("{prefix}embeddings.projection"))),
            layers,
            owned,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn token_embeddings(&self) -> ParamId {
        self.token
    }

    /// All three tables, for lending to another model.
    pub fn embeddings(&self) -> SharedEmbeddings {
        SharedEmbeddings {
            token: Some(self.token),
            position: Some(self.position),
            segment: Some(self.segment),
        }
    }

    /// Specs of the parameters this model registered itself.
    pub fn owned_specs(&self) -> &[ParamSpec] {
        &self.owned
    }

    /// Ids of the parameters this model registered itself (borrowed tables excluded).
    pub fn owned_ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        self.owned.iter().map(|s| lookup(store, &s.name)).collect()
    }

    pub fn forward<'p, T: Scalar>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        input: &EncoderInput<'_>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        let c = &self.config;
        let (b, l) = (input.batch, input.seq_len);
        if b == 0 || l == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if input.ids.len() != b * l || input.attention.len() != b * l {
            return Err(Error::Invalid(format!(
                "batch {b}x{l} needs {} ids and mask entries, got {} and {}",
                b * l,
                input.ids.len(),
                input.attention.len()
            )));
        }
        if l > c.max_positions {
            return Err(Error::Invalid(format!(
                "sequence length {l} exceeds max_positions {}",
                c.max_positions
            )));
        }
        if let Some(&bad) = input.ids.iter().find(|&&i| i as usize >= c.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {bad} out of range for vocab_size {}",
                c.vocab_size
            )));
        }
        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let segs: Vec<usize> = match input.segments {
            Some(s) if s.len() == b * l => s.iter().map(|&x| (x as usize).min(SEGMENT_VOCAB - 1)).collect(),
            Some(s) => {
                return Err(Error::Invalid(format!("{} segment ids for a {b}x{l} batch", s.len())))
            }
            None => vec![0; b * l],
        };
        let positions: Vec<usize> = (0..l).collect();
        let p = c.dropout;
        let eps = T::lit(LAYER_NORM_EPS);

        let tok_table = g.param(store, self.token);
        let pos_table = g.param(store, self.position);
        let seg_table = g.param(store, self.segment);
        let tok = g.embedding(tok_table, &ids, &[b, l])?;
        let pos = g.embedding(pos_table, &positions, &[l])?;
        let seg = g.embedding(seg_table, &segs, &[b, l])?;
        let x = g.add(tok, pos)?;
        let x = g.add(x, seg)?;
        let x = layer_norm(g, store, x, self.emb_norm, eps)?;
        let mut x = dropout(g, x, p, &mut dropout_rng)?;
        if let Some(proj) = self.projection {
            x = linear(g, store, x, proj)?;
        }

        let mask_data: Vec<T> = input
            .attention
            .iter()
            .map(|&keep| if keep { T::zero() } else { T::lit(MASKED_SCORE) })
            .collect();
        let mask = g.constant(Tensor::new(vec![b, 1, 1, l], mask_data)?);

        let (h, nh, dh) = (c.hidden_size, c.num_heads, c.head_dim());
        let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let split = |g: &mut Graph<'p, T>, v: Var| -> Result<Var> {
                let v = g.reshape(v, &[b, l, nh, dh])?;
                g.transpose(v, 1, 2)
            };
            let q = linear(g, store, x, layer.query)?;
            let q = split(g, q)?;
            let k = linear(g, store, x, layer.key)?;
            let k = split(g, k)?;
            let v = linear(g, store, x, layer.value)?;
            let v = split(g, v)?;
            let scores = g.matmul_t(q, k)?;
            let scores = g.scale(scores, scale);
            let scores = g.add(scores, mask)?;
            let probs = g.softmax(scores, 3)?;
            attention.push(probs);
            let probs = dropout(g, probs, p, &mut dropout_rng)?;
            let ctx = g.matmul(probs, v)?;
            let ctx = g.transpose(ctx, 1, 2)?;
            let ctx = g.reshape(ctx, &[b, l, h])?;
            let attn = linear(g, store, ctx, layer.attn_out)?;
            let attn = dropout(g, attn, p, &mut dropout_rng)?;
            let res = g.add(x, attn)?;
            x = layer_norm(g, store, res, layer.attn_norm, eps)?;

            let ff = linear(g, store, x, layer.ffn_in)?;
            let ff = g.gelu(ff);
            let ff = linear(g, store, ff, layer.ffn_out)?;
            let ff = dropout(g, ff, p, &mut dropout_rng)?;
            let res = g.add(x, ff)?;
            x = layer_norm(g, store, res, layer.ffn_norm, eps)?;
        }
        Ok(EncoderOutput {
            hidden: x,
            attention,
        })
    }
}

/// `x · W + b` over the last axis.
pub(crate) fn linear<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    x: Var,
    (w, b): (ParamId, ParamId),
) -> Result<Var> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub(crate) fn layer_norm<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    x: Var,
    (gain, bias): (ParamId, ParamId),
    eps: T,
) -> Result<Var> {
    let n = g.layer_norm(x, eps)?;
    let gain = g.param(store, gain);
    let bias = g.param(store, bias);
    let y = g.mul(n, gain)?;
    g.add(y, bias)
}

/// Inverted dropout; identity when `rng` is `None` (evaluation) or `p == 0`.
pub(crate) fn dropout<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let n = g.value(x).numel();
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}
