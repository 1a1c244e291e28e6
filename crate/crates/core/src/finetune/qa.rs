use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::model::Encoded;
use crate::data::{Answer, QaExample, QualityReport};
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

/// How a question/context pair is cut into model windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaWindowing {
    pub max_len: usize,
    /// Context tokens between the starts of consecutive windows.
    pub stride: usize,
    /// Longer questions keep their first `max_query_len` tokens.
    pub max_query_len: usize,
}

impl Default for QaWindowing {
    fn default() -> Self {
        QaWindowing {
            max_len: 384,
            stride: 128,
            max_query_len: 64,
        }
    }
}

impl QaWindowing {
    /// Context tokens that fit next to a question of `q_len` tokens.
    pub fn context_budget(&self, q_len: usize) -> Result<usize> {
        let q_len = q_len.min(self.max_query_len);
        match self.max_len.checked_sub(q_len + 3) {
            Some(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!(
                "max_len {} leaves no room for context after a {q_len}-token question",
                self.max_len
            ))),
        }
    }
}

/// One window of a question/context pair: `[CLS] question [SEP] context [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaFeature {
    /// Index of the source example.
    pub example: usize,
    pub input: Encoded,
    /// Byte range in the context for context tokens, `None` elsewhere.
    pub token_to_char: Vec<Option<(usize, usize)>>,
    /// Window positions holding context tokens.
    pub context: Range<usize>,
    /// Index of the window's first token in the whole tokenized context.
    pub context_offset: usize,
    /// Gold span as window positions; both 0 (`[CLS]`) when the answer is not
    /// fully inside this window or there is no answer.
    pub start_position: usize,
    pub end_position: usize,
}

fn char_to_byte(s: &str, n: usize) -> Option<usize> {
    s.char_indices().map(|(i, _)| i).chain(std::iter::once(s.len())).nth(n)
}

/// Cuts one question/context pair into overlapping windows. With an answer,
/// each window gets the answer's token span as target when it holds the whole
/// answer and `[CLS]` otherwise. Fails when the answer text does not occur at
/// its offset or covers no token.
pub fn build_qa_features(
    question: &str,
    context: &str,
    answer: Option<&Answer>,
    tokenizer: &Tokenizer,
    windowing: &QaWindowing,
) -> Result<Vec<QaFeature>> {
    let mut q = tokenizer.tokenize(question);
    q.truncate(windowing.max_query_len);
    let c = tokenizer.tokenize(context);
    let budget = windowing.context_budget(q.len())?;
    // a stride wider than the budget would skip tokens
    let step = windowing.stride.min(budget).max(1);

    let target = match answer {
        None => None,
        Some(a) => {
            let start = char_to_byte(context, a.char_start)
                .filter(|&s| context.get(s..s + a.text.len()) == Some(a.text.as_str()))
                .ok_or_else(|| {
                    Error::Invalid(format!("answer {:?} does not occur at character {}", a.text, a.char_start))
                })?;
            let end = start + a.text.len();
            let first = c.iter().position(|p| p.offset.1 > start);
            let last = c.iter().rposition(|p| p.offset.0 < end);
            match (first, last) {
                (Some(f), Some(l)) if f <= l => Some((f, l)),
                _ => return Err(Error::Invalid(format!("answer {:?} covers no context token", a.text))),
            }
        }
    };

    let pad = tokenizer.vocab().specials().pad;
    let mut features = Vec::new();
    let mut start = 0;
    loop {
        let len = budget.min(c.len() - start);
        let window = &c[start..start + len];
        let enc = tokenizer.frame(&q, Some(window), windowing.max_len);
        let first = q.len() + 2;
        let (start_position, end_position) = match target {
            Some((s, e)) if s >= start && e < start + len => (first + s - start, first + e - start),
            _ => (0, 0),
        };
        features.push(QaFeature {
            example: 0,
            token_to_char: enc
                .offsets
                .iter()
                .zip(&enc.sequence)
                .map(|(o, s)| if *s == Some(1) { *o } else { None })
                .collect(),
            input: Encoded {
                attention: enc.ids.iter().map(|&i| i != pad).collect(),
                ids: enc.ids,
                segments: enc.segment_ids,
            },
            context: first..first + len,
            context_offset: start,
            start_position,
            end_position,
        });
        if start + len >= c.len() {
            break;
        }
        start += step;
    }
    Ok(features)
}

/// Features for a whole dataset. Examples whose answer cannot be placed are
/// dropped and listed in the report. With `require_answer`, unanswered
/// examples are dropped as well.
pub fn qa_features(
    examples: &[QaExample],
    tokenizer: &Tokenizer,
    windowing: &QaWindowing,
    require_answer: bool,
) -> Result<(Vec<QaFeature>, QualityReport)> {
    let mut features = Vec::new();
    let mut report = QualityReport::default();
    for (i, ex) in examples.iter().enumerate() {
        if require_answer && ex.answers.is_empty() {
            report.drop_row(format!("{}: no answer", ex.id));
            continue;
        }
        match build_qa_features(&ex.question, &ex.context, ex.answers.first(), tokenizer, windowing) {
            Ok(fs) => {
                report.keep();
                features.extend(fs.into_iter().map(|f| QaFeature { example: i, ..f }));
            }
            Err(Error::Invalid(msg)) => report.drop_row(format!("{}: {msg}", ex.id)),
            Err(e) => return Err(e),
        }
    }
    Ok((features, report))
}

/// A decoded span. `chars` is `None` for the empty (`[CLS]`) answer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanPrediction {
    /// Window positions, both 0 for the empty answer.
    pub start: usize,
    pub end: usize,
    pub score: f64,
    /// Byte range in the context.
    pub chars: Option<(usize, usize)>,
}

impl SpanPrediction {
    pub fn is_empty(&self) -> bool {
        self.chars.is_none()
    }

    pub fn text<'a>(&self, context: &'a str) -> &'a str {
        self.chars.map_or("", |(s, e)| &context[s..e])
    }
}

fn top_positions(logits: &[f32], range: Range<usize>, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = range.collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Best span `i ≤ j < i + max_answer_len` inside the context segment,
/// scored `start[i] + end[j]` over the `n_best` highest starts and ends. The
/// empty answer, scored at `[CLS]`, wins when no span beats it.
pub fn predict_span(
    start_logits: &[f32],
    end_logits: &[f32],
    feature: &QaFeature,
    max_answer_len: usize,
    n_best: usize,
) -> SpanPrediction {
    let n = start_logits.len().min(end_logits.len());
    let cls_score = if n > 0 {
        start_logits[0] as f64 + end_logits[0] as f64
    } else {
        f64::NEG_INFINITY
    };
    let mut best = SpanPrediction {
        start: 0,
        end: 0,
        score: cls_score,
        chars: None,
    };
    let ctx = feature.context.start.min(n)..feature.context.end.min(n);
    let starts = top_positions(start_logits, ctx.clone(), n_best);
    let ends = top_positions(end_logits, ctx, n_best);
    for &i in &starts {
        for &j in &ends {
            if j < i || j - i >= max_answer_len {
                continue;
            }
            let score = start_logits[i] as f64 + end_logits[j] as f64;
            let (Some(a), Some(b)) = (feature.token_to_char[i], feature.token_to_char[j]) else {
                continue;
            };
            if score > best.score || (score == best.score && best.is_empty()) {
                best = SpanPrediction {
                    start: i,
                    end: j,
                    score,
                    chars: Some((a.0, b.1)),
                };
            }
        }
    }
    best
}

/// Example-level answer from its windows: the best-scoring non-empty span,
/// or the empty answer when every window abstains.
pub fn best_prediction(windows: impl IntoIterator<Item = SpanPrediction>) -> Option<SpanPrediction> {
    let mut best: Option<SpanPrediction> = None;
    for p in windows {
        best = match best {
            None => Some(p),
            Some(b) => {
                let better = match (p.is_empty(), b.is_empty()) {
                    (false, true) => true,
                    (true, false) => false,
                    _ => p.score > b.score,
                };
                Some(if better { p } else { b })
            }
        };
    }
    best
}
