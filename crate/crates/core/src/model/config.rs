use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment (token type) vocabulary: question/context or sentence A/B.
pub const SEGMENT_VOCAB: usize = 2;
pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Width of the embedding tables; a linear projection maps it to
    /// `hidden_size` when the two differ.
    pub embedding_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("num_heads", self.num_heads),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("embedding_size", self.embedding_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return bad(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn has_projection(&self) -> bool {
        self.embedding_size != self.hidden_size
    }

    /// Full-size discriminator: 12 layers, 12 heads, 768 hidden, 512 positions.
    pub fn paper_discriminator(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 12,
            num_heads: 12,
            hidden_size: 768,
            ffn_size: 3072,
            vocab_size,
            max_positions: 512,
            embedding_size: 768,
            dropout: 0.1,
        }
    }

    /// Generator paired with [`paper_discriminator`](Self::paper_discriminator):
    /// 12 layers, 4 heads, 256 hidden, reading 768-wide shared embeddings.
    pub fn paper_generator(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 12,
            num_heads: 4,
            hidden_size: 256,
            ffn_size: 1024,
            vocab_size,
            max_positions: 512,
            embedding_size: 768,
            dropout: 0.1,
        }
    }

    /// Desk-scale models; without dropout, since 300 steps of a 2-layer
    /// model underfit long before they overfit.
    pub fn toy_discriminator(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 64,
            ffn_size: 256,
            vocab_size,
            max_positions: 128,
            embedding_size: 64,
            dropout: 0.0,
        }
    }

    pub fn toy_generator(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 32,
            ffn_size: 128,
            vocab_size,
            max_positions: 128,
            embedding_size: 64,
            dropout: 0.0,
        }
    }

    /// Field-by-field differences against `other`, as `name: self != other`.
    pub fn diff(&self, other: &EncoderConfig) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    out.push(format!("{}: {} != {}", stringify!($f), self.$f, other.$f));
                }
            )*};
        }
        cmp!(num_layers, num_heads, hidden_size, ffn_size, vocab_size, max_positions, embedding_size, dropout);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_uses_exact_field_names() {
        let c = EncoderConfig::toy_discriminator(8192);
        let v = serde_json::to_value(&c).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "dropout",
                "embedding_size",
                "ffn_size",
                "hidden_size",
                "max_positions",
                "num_heads",
                "num_layers",
                "vocab_size"
            ]
        );
        let back: EncoderConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation() {
        let mut c = EncoderConfig::toy_discriminator(100);
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy_discriminator(100);
        c.vocab_size = 0;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy_discriminator(100);
        c.num_layers = 0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn diff_names_fields() {
        let a = EncoderConfig::toy_discriminator(100);
        let b = EncoderConfig::toy_discriminator(200);
        assert_eq!(a.diff(&b), vec!["vocab_size: 100 != 200".to_string()]);
    }
}
