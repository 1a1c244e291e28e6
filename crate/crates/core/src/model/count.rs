use super::config::{EncoderConfig, SEGMENT_VOCAB};
use super::encoder::EmbeddingTying;
use super::heads::HeadKind;

/// Closed-form number of scalars an encoder owns.
pub fn encoder_parameters(c: &EncoderConfig, tying: EmbeddingTying) -> usize {
    let (e, h, f) = (c.embedding_size, c.hidden_size, c.ffn_size);
    let mut n = 2 * e;
    if !tying.token {
        n += c.vocab_size * e;
    }
    if !tying.position {
        n += c.max_positions * e;
    }
    if !tying.segment {
        n += SEGMENT_VOCAB * e;
    }
    if c.has_projection() {
        n += e * h + h;
    }
    let attention = 4 * (h * h + h) + 2 * h;
    let ffn = (h * f + f) + (f * h + h) + 2 * h;
    n + c.num_layers * (attention + ffn)
}

pub fn head_parameters(kind: HeadKind, c: &EncoderConfig) -> usize {
    let (h, e) = (c.hidden_size, c.embedding_size);
    match kind {
        HeadKind::Mlm => h * e + e + 2 * e + c.vocab_size,
        HeadKind::Rtd => h * h + h + h + 1,
        HeadKind::Span => 2 * h + 2,
        HeadKind::Classification { classes } => h * classes + classes,
        HeadKind::Token { tags } => h * tags + tags,
    }
}

/// Scalars of an encoder plus its heads, counting borrowed tables zero times.
pub fn count_parameters(c: &EncoderConfig, heads: &[HeadKind], tying: EmbeddingTying) -> usize {
    encoder_parameters(c, tying) + heads.iter().map(|&k| head_parameters(k, c)).sum::<usize>()
}
