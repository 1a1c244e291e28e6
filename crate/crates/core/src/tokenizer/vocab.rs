use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Special tokens in the order a fresh vocabulary lays them out.
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const CONTINUATION: &str = "##";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl SpecialIds {
    /// Ids when the specials lead the vocabulary in [`SPECIAL_TOKENS`] order,
    /// as in every vocabulary this crate trains.
    pub const LEADING: SpecialIds = SpecialIds {
        pad: 0,
        unk: 1,
        cls: 2,
        sep: 3,
        mask: 4,
    };

    pub fn contains(&self, id: u32) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }
}

/// Token ↔ id bijection. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    specials: SpecialIds,
}

impl Vocab {
    /// Builds a vocabulary where `tokens[i]` gets id `i`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Tokenizer(format!("empty token at id {i}")));
            }
            if t == CONTINUATION {
                return Err(Error::Tokenizer(format!("bare continuation marker at id {i}")));
            }
            if let Some(prev) = index.insert(t.clone(), i as u32) {
                return Err(Error::Tokenizer(format!(
                    "duplicate token `{t}` at ids {prev} and {i}"
                )));
            }
        }
        let find = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Tokenizer(format!("special token {s} missing")))
        };
        let specials = SpecialIds {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
        };
        if specials.pad != 0 {
            return Err(Error::Tokenizer(format!("{PAD} must have id 0, found {}", specials.pad)));
        }
        Ok(Vocab {
            tokens,
            index,
            specials,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.specials.contains(id)
    }

    /// One token per line; the line index is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for t in &self.tokens {
            writeln!(buf, "{t}").expect("write to vec");
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab_err = |msg: String| Error::VocabFile {
            path: path.to_path_buf(),
            msg,
        };
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if let Some(first) = seen.insert(line, i + 1) {
                return Err(vocab_err(format!(
                    "line {}: duplicate token `{line}` (first seen on line {first})",
                    i + 1
                )));
            }
            tokens.push(line.to_string());
        }
        Vocab::from_tokens(tokens).map_err(|e| vocab_err(e.to_string()))
    }
}
