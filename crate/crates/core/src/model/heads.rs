use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, LAYER_NORM_EPS};
use super::encoder::{layer_norm, linear};
use super::layout::{register, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

/// Task head placed on top of an encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Masked-token prediction; output matrix is the token embedding table.
    Mlm,
    /// Per-token original/replaced logit.
    Rtd,
    /// Start and end logits for extractive QA.
    Span,
    /// Sequence label read off the `[CLS]` position.
    Classification { classes: usize },
    /// Per-token tag.
    Token { tags: usize },
}

impl HeadKind {
    pub fn layout(&self, config: &EncoderConfig, prefix: &str) -> Vec<ParamSpec> {
        let (h, e, v) = (config.hidden_size, config.embedding_size, config.vocab_size);
        let mut s = Vec::new();
        let lin = |s: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize| {
            s.push(ParamSpec::weight(format!("{prefix}{name}.weight"), vec![fan_in, fan_out]));
            s.push(ParamSpec::bias(format!("{prefix}{name}.bias"), fan_out));
        };
        match *self {
            HeadKind::Mlm => {
                lin(&mut s, "mlm.dense", h, e);
                s.push(ParamSpec::gain(format!("{prefix}mlm.norm.gain"), e));
                s.push(ParamSpec::bias(format!("{prefix}mlm.norm.bias"), e));
                s.push(ParamSpec::bias(format!("{prefix}mlm.output.bias"), v));
            }
            HeadKind::Rtd => {
                lin(&mut s, "rtd.dense", h, h);
                lin(&mut s, "rtd.output", h, 1);
            }
            HeadKind::Span => lin(&mut s, "span", h, 2),
            HeadKind::Classification { classes } => lin(&mut s, "classifier", h, classes),
            HeadKind::Token { tags } => lin(&mut s, "tagger", h, tags),
        }
        s
    }
}

/// Instantiated head: parameter ids plus the embedding table an MLM head
/// projects onto.
#[derive(Clone, Debug)]
pub struct Head {
    kind: HeadKind,
    params: Vec<ParamId>,
    token_table: Option<ParamId>,
    specs: Vec<ParamSpec>,
}

impl Head {
    /// Registers the head's parameters. `token_table` is required for
    /// [`HeadKind::Mlm`] and ignored otherwise.
    pub fn build<T: Scalar>(
        kind: HeadKind,
        config: &EncoderConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        seed: u64,
        token_table: Option<ParamId>,
    ) -> Result<Self> {
        match kind {
            HeadKind::Classification { classes: 0 } | HeadKind::Token { tags: 0 } => {
                return Err(Error::Config("a head needs at least one output class".into()))
            }
            HeadKind::Mlm if token_table.is_none() => {
                return Err(Error::Config("MLM head needs the token embedding table".into()))
            }
            _ => {}
        }
        let specs = kind.layout(config, prefix);
        let params = register(store, &specs, seed)?;
        Ok(Head {
            kind,
            params,
            token_table: matches!(kind, HeadKind::Mlm).then_some(token_table).flatten(),
            specs,
        })
    }

    /// Rebinds an already registered head (e.g. after loading a checkpoint).
    pub fn attach<T: Scalar>(
        kind: HeadKind,
        config: &EncoderConfig,
        prefix: &str,
        store: &ParamStore<T>,
        token_table: Option<ParamId>,
    ) -> Result<Self> {
        if matches!(kind, HeadKind::Mlm) && token_table.is_none() {
            return Err(Error::Config("MLM head needs the token embedding table".into()));
        }
        let specs = kind.layout(config, prefix);
        let params = specs
            .iter()
            .map(|s| {
                let id = store
                    .id(&s.name)
                    .ok_or_else(|| Error::Config(format!("missing parameter `{}`", s.name)))?;
                if store.get(id).shape() != s.shape.as_slice() {
                    return Err(Error::Config(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        s.name,
                        store.get(id).shape(),
                        s.shape
                    )));
                }
                Ok(id)
            })
            .collect::<Result<_>>()?;
        Ok(Head {
            kind,
            params,
            token_table,
            specs,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    fn pair(&self, i: usize) -> (ParamId, ParamId) {
        (self.params[i], self.params[i + 1])
    }

    /// Applies the head to `hidden` of shape `[batch, seq_len, hidden]`.
    ///
    /// * `Mlm`: `hidden` may be any `[.., hidden]`; returns `[.., vocab]`.
    /// * `Rtd`: `[batch, seq_len]`.
    /// * `Span`: `[batch, seq_len, 2]`, start logits in channel 0.
    /// * `Classification`: `[batch, classes]` from position 0.
    /// * `Token`: `[batch, seq_len, tags]`.
    pub fn forward<'p, T: Scalar>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, hidden: Var) -> Result<Var> {
        match self.kind {
            HeadKind::Mlm => {
                let x = linear(g, store, hidden, self.pair(0))?;
                let x = g.gelu(x);
                let x = layer_norm(g, store, x, self.pair(2), T::lit(LAYER_NORM_EPS))?;
                let table = g.param(store, self.token_table.expect("checked at build"));
                let logits = g.matmul_t(x, table)?;
                let bias = g.param(store, self.params[4]);
                g.add(logits, bias)
            }
            HeadKind::Rtd => {
                let x = linear(g, store, hidden, self.pair(0))?;
                let x = g.gelu(x);
                let x = linear(g, store, x, self.pair(2))?;
                let shape = g.shape(x).to_vec();
                g.reshape(x, &shape[..shape.len() - 1])
            }
            HeadKind::Span | HeadKind::Token { .. } => linear(g, store, hidden, self.pair(0)),
            HeadKind::Classification { .. } => {
                let shape = g.shape(hidden).to_vec();
                if shape.len() != 3 {
                    return Err(Error::shape("classification head", format!("expected [B, L, H], got {shape:?}")));
                }
                let cls = g.slice(hidden, 1, 0, 1)?;
                let cls = g.reshape(cls, &[shape[0], shape[2]])?;
                linear(g, store, cls, self.pair(0))
            }
        }
    }
}
