//! Character classes and offset-preserving normalization shared by the
//! tokenizer and the QA answer normalizer.

use unicode_normalization::char::{compose, decompose_canonical};

/// Arabic short vowels, tanween, shadda, sukun and Quranic annotation marks.
/// Hamza/madda combining marks (U+0653..U+0655) are kept because they compose
/// into alef variants.
pub fn is_arabic_diacritic(c: char) -> bool {
    matches!(c,
        '\u{0610}'..='\u{061A}'
        | '\u{064B}'..='\u{0652}'
        | '\u{0656}'..='\u{065F}'
        | '\u{0670}'
        | '\u{06D6}'..='\u{06ED}')
}

pub const TATWEEL: char = '\u{0640}';

pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c,
            '\u{00A1}'..='\u{00BF}'
            | '\u{2010}'..='\u{2027}'
            | '\u{2030}'..='\u{205E}'
            | '\u{3000}'..='\u{303F}'
            | '\u{060C}' | '\u{060D}' | '\u{061B}' | '\u{061E}' | '\u{061F}'
            | '\u{066A}'..='\u{066D}'
            | '\u{06D4}'
            | '\u{FD3E}' | '\u{FD3F}')
}

fn is_latin(c: char) -> bool {
    (c as u32) < 0x0250
}

/// Lowercases Latin-script letters only; other scripts pass through.
pub fn lowercase_latin(c: char) -> impl Iterator<Item = char> {
    let lower = if is_latin(c) && c.is_uppercase() {
        Some(c.to_lowercase())
    } else {
        None
    };
    let keep = if lower.is_none() { Some(c) } else { None };
    lower.into_iter().flatten().chain(keep)
}

/// A normalized character and the byte range of source text it stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormChar {
    pub ch: char,
    pub start: usize,
    pub end: usize,
}

/// Normalizes one whitespace-free word: canonical decomposition, removal of
/// Arabic diacritics and tatweel, Latin lowercasing, canonical recomposition.
///
/// `base` is the byte offset of `word` in the full text. The returned ranges
/// tile `base..base + word.len()` exactly, so bytes of removed characters are
/// attributed to a neighbouring kept character.
pub fn normalize_word(word: &str, base: usize) -> Vec<NormChar> {
    let mut out: Vec<NormChar> = Vec::with_capacity(word.len());
    for (b, c) in word.char_indices() {
        let start = base + b;
        let end = start + c.len_utf8();
        let mut push = |d: char| {
            if is_arabic_diacritic(d) || d == TATWEEL {
                return;
            }
            for l in lowercase_latin(d) {
                if let Some(last) = out.last_mut() {
                    if let Some(composed) = compose(last.ch, l) {
                        last.ch = composed;
                        last.end = end;
                        continue;
                    }
                }
                out.push(NormChar { ch: l, start, end });
            }
        };
        decompose_canonical(c, &mut push);
    }
    if let Some(first) = out.first_mut() {
        first.start = base;
    }
    for i in 1..out.len() {
        out[i - 1].end = out[i].start;
    }
    if let Some(last) = out.last_mut() {
        last.end = base + word.len();
    }
    out
}

/// Splits on whitespace, returning `(byte_offset, word)`.
pub fn whitespace_words(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let base = text.as_ptr() as usize;
    text.split(char::is_whitespace)
        .filter(|w| !w.is_empty())
        .map(move |w| (w.as_ptr() as usize - base, w))
}

/// Plain normalized form of `text`, whitespace collapsed to single spaces.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for (off, w) in whitespace_words(text) {
        let chars = normalize_word(w, off);
        if chars.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(chars.iter().map(|c| c.ch));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_tashkeel_and_tatweel_keeps_hamza() {
        // كَتَبَ with tatweel, and أحمد with hamza above
        assert_eq!(normalize("كَتَـبَ"), "كتب");
        assert_eq!(normalize("أحمد"), "أحمد");
    }

    #[test]
    fn lowercases_latin_only() {
        assert_eq!(normalize("Hello  ÉCOLE"), "hello école");
    }

    #[test]
    fn ranges_tile_the_word() {
        let w = "كَتَبَ";
        let chars = normalize_word(w, 10);
        assert_eq!(chars.len(), 3);
        assert_eq!(chars[0].start, 10);
        assert_eq!(chars[2].end, 10 + w.len());
        for pair in chars.windows(2) {
            assert_eq!(pair[0].end, pair[1].start);
        }
    }

    #[test]
    fn decomposed_input_recomposes() {
        let decomposed = "e\u{0301}";
        let chars = normalize_word(decomposed, 0);
        assert_eq!(chars.len(), 1);
        assert_eq!(chars[0].ch, 'é');
        assert_eq!((chars[0].start, chars[0].end), (0, 3));
    }

    #[test]
    fn whitespace_words_report_offsets() {
        let v: Vec<_> = whitespace_words("  ab\tc  d").collect();
        assert_eq!(v, vec![(2, "ab"), (5, "c"), (8, "d")]);
    }
}
