use super::vocab::{Vocab, CONTINUATION};
use crate::error::{Error, Result};
use crate::text::{is_punctuation, normalize_word, whitespace_words, NormChar};

/// Words longer than this many normalized characters become `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

/// A whitespace word after normalization, split into punctuation-delimited chunks.
#[derive(Clone, Debug)]
pub(crate) struct PreWord {
    pub index: usize,
    pub chunks: Vec<Vec<NormChar>>,
}

/// Whitespace split, normalization, then every punctuation character becomes
/// its own chunk. WordPiece runs per chunk.
pub(crate) fn pretokenize(text: &str) -> Vec<PreWord> {
    whitespace_words(text)
        .enumerate()
        .map(|(index, (off, w))| {
            let mut chunks: Vec<Vec<NormChar>> = Vec::new();
            let mut cur = Vec::new();
            for nc in normalize_word(w, off) {
                if is_punctuation(nc.ch) {
                    if !cur.is_empty() {
                        chunks.push(std::mem::take(&mut cur));
                    }
                    chunks.push(vec![nc]);
                } else {
                    cur.push(nc);
                }
            }
            if !cur.is_empty() {
                chunks.push(cur);
            }
            PreWord { index, chunks }
        })
        .collect()
}

/// One wordpiece of a source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece {
    pub id: u32,
    pub token: String,
    /// Byte range in the source text.
    pub offset: (usize, usize),
    /// Index of the whitespace word this piece came from.
    pub word: usize,
}

/// Model-ready framing of one text or a text pair.
///
/// `offsets` are byte ranges into whichever text the token came from
/// (`sequence` says which); specials and padding have `None`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub tokens: Vec<String>,
    pub offsets: Vec<Option<(usize, usize)>>,
    pub word_index: Vec<Option<usize>>,
    pub sequence: Vec<Option<u8>>,
    pub segment_ids: Vec<u8>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn attention_mask(&self, pad: u32) -> Vec<bool> {
        self.ids.iter().map(|&i| i != pad).collect()
    }
}

/// Greedy longest-match-first WordPiece over a fixed [`Vocab`].
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vocab,
}

impl Tokenizer {
    pub fn new(vocab: Vocab) -> Self {
        Tokenizer { vocab }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Segments one chunk. `None` when some position has no matching piece.
    fn wordpiece(&self, chars: &[NormChar]) -> Option<Vec<(u32, usize, usize)>> {
        if chars.len() > MAX_WORD_CHARS {
            return None;
        }
        let mut out = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.extend(chars[start..end].iter().map(|c| c.ch));
                if let Some(id) = self.vocab.id(&candidate) {
                    found = Some((id, end));
                    break;
                }
            }
            let (id, end) = found?;
            out.push((id, start, end));
            start = end;
        }
        Some(out)
    }

    /// Wordpieces of `text` without specials, truncation or padding.
    pub fn tokenize(&self, text: &str) -> Vec<Piece> {
        let unk = self.vocab.specials().unk;
        let mut pieces = Vec::new();
        for word in pretokenize(text) {
            for chunk in &word.chunks {
                let span = (chunk[0].start, chunk[chunk.len() - 1].end);
                match self.wordpiece(chunk) {
                    Some(segs) => {
                        for (id, s, e) in segs {
                            pieces.push(Piece {
                                id,
                                token: self.vocab.token(id).expect("id from vocab").to_string(),
                                offset: (chunk[s].start, chunk[e - 1].end),
                                word: word.index,
                            });
                        }
                    }
                    None => pieces.push(Piece {
                        id: unk,
                        token: super::vocab::UNK.to_string(),
                        offset: span,
                        word: word.index,
                    }),
                }
            }
        }
        pieces
    }

    /// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, truncated longest-first and
    /// padded with `[PAD]` to exactly `max_len`.
    pub fn encode(&self, text: &str, max_len: usize, pair: Option<&str>) -> Result<Encoding> {
        let specials = if pair.is_some() { 3 } else { 2 };
        if max_len < 3 {
            return Err(Error::Tokenizer(format!("max_len must be at least 3, got {max_len}")));
        }
        let mut a = self.tokenize(text);
        let mut b = pair.map(|p| self.tokenize(p)).unwrap_or_default();
        while a.len() + b.len() + specials > max_len {
            if a.len() > b.len() {
                a.pop();
            } else {
                b.pop();
            }
        }
        Ok(self.frame(&a, pair.map(|_| b.as_slice()), max_len))
    }

    /// Frames already-tokenized segments. Callers guarantee they fit.
    pub(crate) fn frame(&self, a: &[Piece], b: Option<&[Piece]>, max_len: usize) -> Encoding {
        let sp = self.vocab.specials();
        let mut enc = Encoding {
            ids: Vec::with_capacity(max_len),
            tokens: Vec::with_capacity(max_len),
            offsets: Vec::with_capacity(max_len),
            word_index: Vec::with_capacity(max_len),
            sequence: Vec::with_capacity(max_len),
            segment_ids: Vec::with_capacity(max_len),
        };
        let special = |enc: &mut Encoding, id: u32, segment: u8| {
            enc.ids.push(id);
            enc.tokens.push(self.vocab.token(id).expect("special").to_string());
            enc.offsets.push(None);
            enc.word_index.push(None);
            enc.sequence.push(None);
            enc.segment_ids.push(segment);
        };
        let push_pieces = |enc: &mut Encoding, pieces: &[Piece], seq: u8| {
            for p in pieces {
                enc.ids.push(p.id);
                enc.tokens.push(p.token.clone());
                enc.offsets.push(Some(p.offset));
                enc.word_index.push(Some(p.word));
                enc.sequence.push(Some(seq));
                enc.segment_ids.push(seq);
            }
        };
        special(&mut enc, sp.cls, 0);
        push_pieces(&mut enc, a, 0);
        special(&mut enc, sp.sep, 0);
        if let Some(b) = b {
            push_pieces(&mut enc, b, 1);
            special(&mut enc, sp.sep, 1);
        }
        debug_assert!(enc.len() <= max_len);
        while enc.len() < max_len {
            special(&mut enc, sp.pad, 0);
        }
        enc
    }

    /// Drops specials, glues `##` continuations to the previous piece and joins
    /// words with single spaces.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .vocab
                .token(id)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} out of range for vocab of {}", self.vocab.len())))?;
            if self.vocab.is_special(id) {
                continue;
            }
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::vocab::SPECIAL_TOKENS;

    fn tokenizer(extra: &[&str]) -> Tokenizer {
        let toks = SPECIAL_TOKENS.iter().chain(extra).map(|s| s.to_string()).collect();
        Tokenizer::new(Vocab::from_tokens(toks).unwrap())
    }

    #[test]
    fn greedy_longest_match() {
        let t = tokenizer(&["un", "##aff", "##able", "u", "##n", "##a", "##ff", "##ab", "##le", "a"]);
        let toks: Vec<_> = t.tokenize("unaffable").into_iter().map(|p| p.token).collect();
        assert_eq!(toks, ["un", "##aff", "##able"]);
    }

    #[test]
    fn empty_text_is_cls_sep_then_padding() {
        let t = tokenizer(&[]);
        let enc = t.encode("", 6, None).unwrap();
        assert_eq!(enc.ids, vec![2, 3, 0, 0, 0, 0]);
        assert_eq!(enc.attention_mask(0), vec![true, true, false, false, false, false]);
    }

    #[test]
    fn undecomposable_word_is_single_unk_over_whole_word() {
        let t = tokenizer(&["ab"]);
        let pieces = t.tokenize("ab xyz");
        assert_eq!(pieces.len(), 2);
        assert_eq!(pieces[1].token, "[UNK]");
        assert_eq!(pieces[1].offset, (3, 6));
    }

    #[test]
    fn long_word_is_unk() {
        let t = tokenizer(&["a", "##a"]);
        let word = "a".repeat(MAX_WORD_CHARS + 1);
        let pieces = t.tokenize(&word);
        assert_eq!(pieces.len(), 1);
        assert_eq!(pieces[0].token, "[UNK]");
        assert_eq!(t.tokenize(&"a".repeat(MAX_WORD_CHARS)).len(), MAX_WORD_CHARS);
    }

    #[test]
    fn pair_layout_and_longest_first_truncation() {
        let t = tokenizer(&["a", "b"]);
        let enc = t.encode("a a a a a", 8, Some("b b")).unwrap();
        // 8 - 3 specials = 5 slots: longest-first trims a from 5 to 3
        assert_eq!(enc.tokens, ["[CLS]", "a", "a", "a", "[SEP]", "b", "b", "[SEP]"]);
        assert_eq!(enc.segment_ids, vec![0, 0, 0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn punctuation_is_split_off() {
        let t = tokenizer(&["ab", "."]);
        let pieces = t.tokenize("ab.");
        let toks: Vec<_> = pieces.iter().map(|p| p.token.as_str()).collect();
        assert_eq!(toks, ["ab", "."]);
        assert_eq!(pieces[1].offset, (2, 3));
        assert_eq!(pieces[1].word, 0);
    }

    #[test]
    fn decode_joins_continuations() {
        let t = tokenizer(&["un", "##aff", "##able"]);
        assert_eq!(t.decode(&[2, 5, 6, 7, 3]).unwrap(), "unaffable");
        assert_eq!(t.decode(&[2, 3]).unwrap(), "");
        assert!(t.decode(&[99]).is_err());
    }

    #[test]
    fn diacritics_are_covered_by_offsets() {
        let t = tokenizer(&["ك", "##ت", "##ب"]);
        let text = "كَتَبَ";
        let pieces = t.tokenize(text);
        assert_eq!(pieces.len(), 3);
        let joined: String = pieces.iter().map(|p| &text[p.offset.0..p.offset.1]).collect();
        assert_eq!(joined, text);
    }
}
