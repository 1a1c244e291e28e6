use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::SpecialIds;

/// Concatenates documents, each followed by `[SEP]`, and cuts the stream
/// into windows of `seq_len - 1` tokens behind a leading `[CLS]`. The last
/// window is padded with `[PAD]`.
pub fn pack_sequences(docs: &[Vec<u32>], seq_len: usize, specials: SpecialIds) -> Result<Vec<Vec<u32>>> {
    if seq_len < 2 {
        return Err(Error::Config(format!("seq_len must be at least 2, got {seq_len}")));
    }
    let body = seq_len - 1;
    let mut stream = Vec::new();
    for d in docs.iter().filter(|d| !d.is_empty()) {
        stream.extend_from_slice(d);
        stream.push(specials.sep);
    }
    Ok(stream
        .chunks(body)
        .map(|c| {
            let mut w = Vec::with_capacity(seq_len);
            w.push(specials.cls);
            w.extend_from_slice(c);
            w.resize(seq_len, specials.pad);
            w
        })
        .collect())
}

/// A batch before corruption, flattened row-major as `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub original: Vec<u32>,
    pub masked: Vec<u32>,
    pub mask_positions: Vec<bool>,
    pub attention: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
    /// Input sequences left out because they had nothing to mask.
    pub skipped: usize,
}

impl MaskedBatch {
    pub fn num_masked(&self) -> usize {
        self.mask_positions.iter().filter(|&&m| m).count()
    }

    /// Flat indices of the masked positions, in order.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask_positions.len()).filter(|&i| self.mask_positions[i]).collect()
    }
}

/// Tokens that may be masked: everything except `[CLS]`, `[SEP]`, `[PAD]`
/// and `[MASK]`.
pub fn is_maskable(id: u32, specials: SpecialIds) -> bool {
    id != specials.cls && id != specials.sep && id != specials.pad && id != specials.mask
}

pub fn masked_count(eligible: usize, mask_fraction: f64) -> usize {
    (mask_fraction * eligible as f64).round() as usize
}

/// Masks `round(mask_fraction × eligible)` positions per sequence, chosen
/// uniformly without replacement, replacing them with `[MASK]`. Sequences
/// where that count is 0 are dropped and counted in `skipped`.
pub fn make_masked_batch(
    seqs: &[&[u32]],
    mask_fraction: f64,
    specials: SpecialIds,
    rng: &mut impl Rng,
) -> Result<MaskedBatch> {
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
        return Err(Error::Config(format!("mask_fraction must be in (0, 1), got {mask_fraction}")));
    }
    let seq_len = seqs.first().map_or(0, |s| s.len());
    if let Some(s) = seqs.iter().find(|s| s.len() != seq_len) {
        return Err(Error::Invalid(format!("ragged batch: lengths {seq_len} and {}", s.len())));
    }
    let mut out = MaskedBatch {
        original: Vec::new(),
        masked: Vec::new(),
        mask_positions: Vec::new(),
        attention: Vec::new(),
        batch: 0,
        seq_len,
        skipped: 0,
    };
    for seq in seqs {
        let eligible: Vec<usize> = (0..seq_len).filter(|&i| is_maskable(seq[i], specials)).collect();
        let k = masked_count(eligible.len(), mask_fraction);
        if k == 0 {
            out.skipped += 1;
            continue;
        }
        let mut pos = vec![false; seq_len];
        for j in index::sample(rng, eligible.len(), k) {
            pos[eligible[j]] = true;
        }
        out.original.extend_from_slice(seq);
        out.masked
            .extend(seq.iter().zip(&pos).map(|(&t, &m)| if m { specials.mask } else { t }));
        out.attention.extend(seq.iter().map(|&t| t != specials.pad));
        out.mask_positions.extend(pos);
        out.batch += 1;
    }
    if out.batch == 0 {
        return Err(Error::Invalid(format!(
            "all {} sequences in the batch had nothing to mask",
            seqs.len()
        )));
    }
    Ok(out)
}
