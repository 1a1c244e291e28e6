use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Extractive question answering.
    Qa,
    /// Sentence classification (5-point sentiment by default).
    Sa,
    /// Named-entity tagging.
    Ner,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Qa => "qa",
            Task::Sa => "sa",
            Task::Ner => "ner",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(Task::Qa),
            "sa" => Ok(Task::Sa),
            "ner" => Ok(Task::Ner),
            _ => Err(Error::Config(format!("unknown task `{s}` (expected qa, sa or ner)"))),
        }
    }
}

pub const LR_GRID: [f64; 3] = [2e-5, 3e-5, 5e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    /// `None` picks 384 for QA and 256 otherwise.
    pub max_seq_len: Option<usize>,
    /// Used by single runs; a sweep overrides it with each grid point.
    pub learning_rate: f64,
    pub lr_grid: Vec<f64>,
    /// `None` picks 3 for QA and 10 otherwise.
    pub epochs: Option<usize>,
    /// Share of all updates spent in linear warmup.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub doc_stride: usize,
    pub max_query_len: usize,
    pub max_answer_len: usize,
    pub n_best: usize,
    /// Classes of the sentence classifier.
    pub num_classes: usize,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 32,
            max_seq_len: None,
            learning_rate: LR_GRID[1],
            lr_grid: LR_GRID.to_vec(),
            epochs: None,
            warmup_fraction: 0.1,
            seed: 0,
            doc_stride: 128,
            max_query_len: 64,
            max_answer_len: 30,
            n_best: 20,
            num_classes: 5,
            adam: AdamConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn max_seq_len(&self, task: Task) -> usize {
        self.max_seq_len.unwrap_or(match task {
            Task::Qa => 384,
            Task::Sa | Task::Ner => 256,
        })
    }

    pub fn epochs(&self, task: Task) -> usize {
        self.epochs.unwrap_or(match task {
            Task::Qa => 3,
            Task::Sa | Task::Ner => 10,
        })
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_seq_len(task) < 4 {
            return bad(format!("max_seq_len must be at least 4, got {}", self.max_seq_len(task)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(*lr >= 0.0 && lr.is_finite())) {
            return bad(format!("lr_grid must be non-empty and finite, got {:?}", self.lr_grid));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must be in [0, 1], got {}", self.warmup_fraction));
        }
        if task == Task::Qa {
            if self.doc_stride == 0 {
                return bad("doc_stride must be positive".into());
            }
            if self.max_answer_len == 0 || self.n_best == 0 {
                return bad("max_answer_len and n_best must be positive".into());
            }
            if self.max_query_len + 4 > self.max_seq_len(task) {
                return bad(format!(
                    "max_query_len {} leaves no room for context in max_seq_len {}",
                    self.max_query_len,
                    self.max_seq_len(task)
                ));
            }
        }
        if task == Task::Sa && self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        Ok(())
    }
}
