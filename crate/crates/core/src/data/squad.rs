use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::QualityReport;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    /// Character (code point) index into the context, as in the JSON.
    pub char_start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub context: String,
    /// Empty for unlabeled (inference) data.
    pub answers: Vec<Answer>,
}

impl QaExample {
    /// Byte range of `answer` in the context; `None` if the character span
    /// does not spell the answer text.
    pub fn answer_bytes(&self, answer: &Answer) -> Option<(usize, usize)> {
        let start = char_to_byte(&self.context, answer.char_start)?;
        let end = start + answer.text.len();
        (self.context.get(start..end) == Some(answer.text.as_str())).then_some((start, end))
    }
}

/// Byte offset of the `n`-th character; `s.len()` for `n == char count`.
pub(crate) fn char_to_byte(s: &str, n: usize) -> Option<usize> {
    s.char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(s.len()))
        .nth(n)
}

#[derive(Deserialize)]
struct File {
    data: Vec<Article>,
}

#[derive(Deserialize)]
struct Article {
    paragraphs: Vec<Paragraph>,
}

#[derive(Deserialize)]
struct Paragraph {
    context: String,
    qas: Vec<Qa>,
}

#[derive(Deserialize)]
struct Qa {
    id: String,
    question: String,
    answers: Vec<RawAnswer>,
}

#[derive(Deserialize)]
struct RawAnswer {
    text: String,
    answer_start: usize,
}

/// Reads a SQuAD v1-style file. Questions with any answer that does not
/// occur at its `answer_start` are dropped and reported, never repaired.
pub fn read_squad_json(path: impl AsRef<Path>) -> Result<(Vec<QaExample>, QualityReport)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_squad(&text, path)
}

pub(crate) fn parse_squad(text: &str, path: &Path) -> Result<(Vec<QaExample>, QualityReport)> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: File = serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        at: e.path().to_string(),
        msg: e.inner().to_string(),
    })?;
    let mut report = QualityReport::default();
    let mut out = Vec::new();
    for para in file.data.into_iter().flat_map(|a| a.paragraphs) {
        for qa in para.qas {
            let ex = QaExample {
                id: qa.id,
                question: qa.question,
                context: para.context.clone(),
                answers: qa
                    .answers
                    .into_iter()
                    .map(|a| Answer {
                        text: a.text,
                        char_start: a.answer_start,
                    })
                    .collect(),
            };
            match ex.answers.iter().find(|a| ex.answer_bytes(a).is_none()) {
                Some(bad) => report.drop_row(format!(
                    "{}: answer {:?} not found at character {}",
                    ex.id, bad.text, bad.char_start
                )),
                None => {
                    report.keep();
                    out.push(ex);
                }
            }
        }
    }
    Ok((out, report))
}
