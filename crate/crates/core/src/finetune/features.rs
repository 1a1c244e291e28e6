use super::model::Encoded;
use crate::data::{normalize_iob2, ClsExample, NerExample, Tag};
use crate::error::{Error, Result};
use crate::tokenizer::{Encoding, Tokenizer};

fn encoded(enc: Encoding, pad: u32) -> Encoded {
    Encoded {
        attention: enc.ids.iter().map(|&i| i != pad).collect(),
        ids: enc.ids,
        segments: enc.segment_ids,
    }
}

/// `[CLS] text [SEP]`, truncated and padded to `max_len`.
pub fn cls_feature(example: &ClsExample, tokenizer: &Tokenizer, max_len: usize, classes: usize) -> Result<Encoded> {
    if example.label >= classes {
        return Err(Error::Invalid(format!(
            "{}: label {} out of range for {classes} classes",
            example.id, example.label
        )));
    }
    let enc = tokenizer.encode(&example.text, max_len, None)?;
    Ok(encoded(enc, tokenizer.vocab().specials().pad))
}

/// Wordpiece view of one tagged sentence. The first piece of every word
/// carries the word's tag; continuations, specials and padding carry `None`
/// and are left out of the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NerFeature {
    pub input: Encoded,
    /// Per position, index into [`crate::data::NER_LABELS`].
    pub targets: Vec<Option<usize>>,
    /// Per word, the position of its first piece. `None` for words that were
    /// truncated away or produce no piece; they are predicted `O`.
    pub word_positions: Vec<Option<usize>>,
}

pub fn ner_feature(example: &NerExample, tokenizer: &Tokenizer, max_len: usize) -> Result<NerFeature> {
    if example.words.len() != example.tags.len() {
        return Err(Error::Invalid(format!(
            "{}: {} words but {} tags",
            example.id,
            example.words.len(),
            example.tags.len()
        )));
    }
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be at least 3, got {max_len}")));
    }
    let tags = normalize_iob2(&example.tags)?;
    let room = max_len - 2;
    let mut pieces = Vec::new();
    let mut word_positions = vec![None; example.words.len()];
    let mut targets = vec![None; max_len];
    for (w, word) in example.words.iter().enumerate() {
        let mut ps = tokenizer.tokenize(word);
        if ps.is_empty() || pieces.len() + ps.len() > room {
            if pieces.len() >= room {
                break;
            }
            if ps.is_empty() {
                continue;
            }
            ps.truncate(room - pieces.len());
        }
        let pos = 1 + pieces.len();
        word_positions[w] = Some(pos);
        targets[pos] = Some(tags[w].label_index());
        for mut p in ps {
            p.word = w;
            pieces.push(p);
        }
    }
    let enc = tokenizer.frame(&pieces, None, max_len);
    Ok(NerFeature {
        input: encoded(enc, tokenizer.vocab().specials().pad),
        targets,
        word_positions,
    })
}

/// Word tags read off the first-piece logits (`[l, tags]`, row-major).
pub fn decode_word_tags(logits: &[f32], tags: usize, word_positions: &[Option<usize>]) -> Vec<Tag> {
    let rows = logits.len() / tags.max(1);
    word_positions
        .iter()
        .map(|p| match p {
            Some(p) if *p < rows => {
                let row = &logits[p * tags..(p + 1) * tags];
                let best = (0..tags).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
                Tag::from_label_index(best).unwrap_or(Tag::O)
            }
            _ => Tag::O,
        })
        .collect()
}
