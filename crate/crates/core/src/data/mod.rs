//! Readers for the task formats, the raw pretraining corpus and the synthetic
//! language used for desk-scale experiments.

mod conll;
mod corpus;
mod squad;
mod synthetic;
mod tsv;

pub use conll::{normalize_iob2, parse_tag, read_conll, Tag, ENTITY_TYPES, NER_LABELS};
pub use corpus::{read_corpus, split_documents};
pub use squad::{read_squad_json, Answer, QaExample};
pub use synthetic::{SyntheticCorpus, SyntheticLangSpec, SyntheticLanguage, FIRST_CONTENT_ID};
pub use tsv::{convert_arsentd, read_tsv_classification, write_tsv_classification, ClsExample, SENTIMENT_LABELS};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerExample {
    pub id: String,
    pub words: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskExample {
    Qa(QaExample),
    Cls(ClsExample),
    Ner(NerExample),
}

/// Rows seen, kept and dropped by a reader, with one message per drop.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityReport {
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
    pub issues: Vec<String>,
}

impl QualityReport {
    pub(crate) fn keep(&mut self) {
        self.total += 1;
        self.kept += 1;
    }

    pub(crate) fn drop_row(&mut self, issue: String) {
        self.total += 1;
        self.dropped += 1;
        self.issues.push(issue);
    }
}
