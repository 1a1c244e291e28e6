use std::fmt;
use std::fs;
use std::path::Path;

use super::NerExample;
use crate::error::{Error, Result};

pub const ENTITY_TYPES: [&str; 4] = ["ORG", "PER", "LOC", "MISC"];

/// Label space of the NER head: `O` then `B-`/`I-` per entity type.
pub const NER_LABELS: [&str; 9] = [
    "O", "B-ORG", "I-ORG", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-MISC", "I-MISC",
];

/// One IOB2 tag. Entity types are indices into [`ENTITY_TYPES`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    Begin(usize),
    Inside(usize),
}

impl Tag {
    pub fn entity(self) -> Option<usize> {
        match self {
            Tag::O => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }

    /// Position in [`NER_LABELS`].
    pub fn label_index(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::Begin(t) => 1 + 2 * t,
            Tag::Inside(t) => 2 + 2 * t,
        }
    }

    pub fn from_label_index(i: usize) -> Option<Tag> {
        match i {
            0 => Some(Tag::O),
            i if i < NER_LABELS.len() && i % 2 == 1 => Some(Tag::Begin((i - 1) / 2)),
            i if i < NER_LABELS.len() => Some(Tag::Inside((i - 2) / 2)),
            _ => None,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(NER_LABELS[self.label_index()])
    }
}

fn entity_type(name: &str) -> Option<usize> {
    let upper = name.to_ascii_uppercase();
    // ANERcorp spells persons PERS
    let upper = if upper == "PERS" { "PER".to_string() } else { upper };
    ENTITY_TYPES.iter().position(|&t| t == upper)
}

/// Parses a strict IOB2 tag (`O`, `B-X`, `I-X`).
pub fn parse_tag(s: &str) -> Result<Tag> {
    let bad = || Error::Invalid(format!("unknown tag `{s}`"));
    if s == "O" {
        return Ok(Tag::O);
    }
    let (prefix, ty) = s.split_once('-').ok_or_else(bad)?;
    let ty = entity_type(ty).ok_or_else(bad)?;
    match prefix {
        "B" => Ok(Tag::Begin(ty)),
        "I" => Ok(Tag::Inside(ty)),
        _ => Err(bad()),
    }
}

/// Rewrites a sentence's tags as IOB2. Accepts IOB1 and bare types: a bare
/// `X` reads as `I-X`, and any `I-X` not preceded by a tag of type X becomes
/// `B-X`.
pub fn normalize_iob2<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Tag>> {
    let mut out: Vec<Tag> = Vec::with_capacity(tags.len());
    for raw in tags {
        let raw = raw.as_ref();
        let tag = match parse_tag(raw) {
            Ok(t) => t,
            Err(e) => match entity_type(raw) {
                Some(ty) => Tag::Inside(ty),
                None => return Err(e),
            },
        };
        let tag = match tag {
            Tag::Inside(ty) if out.last().and_then(|t| t.entity()) != Some(ty) => Tag::Begin(ty),
            t => t,
        };
        out.push(tag);
    }
    Ok(out)
}

/// Reads `token tag` lines with blank lines between sentences. Tags are
/// normalized to IOB2.
pub fn read_conll(path: impl AsRef<Path>) -> Result<Vec<NerExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(&text, path)
}

pub(crate) fn parse_conll(text: &str, path: &Path) -> Result<Vec<NerExample>> {
    let mut out = Vec::new();
    let mut words = Vec::new();
    let mut raw_tags = Vec::new();
    let mut first_line = 0;
    let flush = |first_line: usize,
                 words: &mut Vec<String>,
                 raw_tags: &mut Vec<(usize, String)>,
                 out: &mut Vec<NerExample>|
     -> Result<()> {
        if words.is_empty() {
            return Ok(());
        }
        let strs: Vec<&str> = raw_tags.iter().map(|(_, t)| t.as_str()).collect();
        let tags = normalize_iob2(&strs).map_err(|e| {
            let line = raw_tags
                .iter()
                .find(|(_, t)| normalize_iob2(&[t]).is_err())
                .map_or(first_line, |(l, _)| *l);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            }
        })?;
        out.push(NerExample {
            id: format!("{}", out.len()),
            words: std::mem::take(words),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        });
        raw_tags.clear();
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            flush(first_line, &mut words, &mut raw_tags, &mut out)?;
            continue;
        }
        if words.is_empty() {
            first_line = lineno;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected `token tag`, found {} columns", cols.len()),
            });
        }
        words.push(cols[0].to_string());
        raw_tags.push((lineno, cols[1].to_string()));
    }
    flush(first_line, &mut words, &mut raw_tags, &mut out)?;
    Ok(out)
}
