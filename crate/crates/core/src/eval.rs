//! Task metrics: SQuAD-style EM/F1, classification F1, entity-level F1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{parse_tag, Tag, ENTITY_TYPES};
use crate::error::{Error, Result};
use crate::text::{is_arabic_diacritic, is_punctuation, TATWEEL};

/// Answer normalization applied before EM/F1. Steps run in field order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationRules {
    pub strip_punctuation: bool,
    pub strip_diacritics: bool,
    /// أ إ آ → ا
    pub fold_alef: bool,
    /// ة → ه
    pub fold_ta_marbuta: bool,
    /// Lowercases Latin letters and drops the words `a`, `an`, `the`.
    pub latin_articles: bool,
    pub collapse_whitespace: bool,
}

impl Default for NormalizationRules {
    fn default() -> Self {
        NormalizationRules {
            strip_punctuation: true,
            strip_diacritics: true,
            fold_alef: false,
            fold_ta_marbuta: false,
            latin_articles: true,
            collapse_whitespace: true,
        }
    }
}

impl NormalizationRules {
    pub fn apply(&self, s: &str) -> String {
        let mut out: String = s
            .chars()
            .filter(|&c| !(self.strip_punctuation && is_punctuation(c)))
            .filter(|&c| !(self.strip_diacritics && (is_arabic_diacritic(c) || c == TATWEEL)))
            .map(|c| match c {
                'أ' | 'إ' | 'آ' if self.fold_alef => 'ا',
                'ة' if self.fold_ta_marbuta => 'ه',
                c => c,
            })
            .collect();
        if self.latin_articles {
            out = out
                .split(' ')
                .map(|w| w.chars().flat_map(crate::text::lowercase_latin).collect::<String>())
                .filter(|w| !matches!(w.as_str(), "a" | "an" | "the"))
                .collect::<Vec<_>>()
                .join(" ");
        }
        if self.collapse_whitespace {
            out = out.split_whitespace().collect::<Vec<_>>().join(" ");
        }
        out
    }
}

/// 1.0 when the normalized prediction equals some normalized gold.
pub fn squad_em(prediction: &str, golds: &[impl AsRef<str>], rules: &NormalizationRules) -> f64 {
    let p = rules.apply(prediction);
    if golds.iter().any(|g| rules.apply(g.as_ref()) == p) {
        1.0
    } else {
        0.0
    }
}

fn bag_f1(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut overlap = 0;
    for p in pred {
        if let Some(c) = counts.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Max over golds of the token-multiset F1 between normalized strings.
pub fn squad_f1(prediction: &str, golds: &[impl AsRef<str>], rules: &NormalizationRules) -> f64 {
    let p = rules.apply(prediction);
    let pt: Vec<&str> = p.split_whitespace().collect();
    golds
        .iter()
        .map(|g| {
            let g = rules.apply(g.as_ref());
            let gt: Vec<&str> = g.split_whitespace().collect();
            bag_f1(&pt, &gt)
        })
        .fold(0.0, f64::max)
}

fn check_labels(gold: &[usize], pred: &[usize], k: usize) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!("{} gold labels but {} predictions", gold.len(), pred.len())));
    }
    if let Some(&bad) = gold.iter().chain(pred).find(|&&l| l >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Per-class F1; a class absent from both gold and predictions scores 1.
pub fn per_class_f1(gold: &[usize], pred: &[usize], k: usize) -> Result<Vec<f64>> {
    check_labels(gold, pred, k)?;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    Ok((0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect())
}

pub fn macro_f1(gold: &[usize], pred: &[usize], k: usize) -> Result<f64> {
    let f = per_class_f1(gold, pred, k)?;
    Ok(f.iter().sum::<f64>() / k as f64)
}

/// Per-class F1 weighted by gold support. Empty gold gives 1 if predictions are empty too.
pub fn weighted_f1(gold: &[usize], pred: &[usize], k: usize) -> Result<f64> {
    let f = per_class_f1(gold, pred, k)?;
    if gold.is_empty() {
        return Ok(1.0);
    }
    let mut support = vec![0usize; k];
    for &g in gold {
        support[g] += 1;
    }
    Ok(f.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / gold.len() as f64)
}

pub fn accuracy(gold: &[usize], pred: &[usize]) -> f64 {
    if gold.is_empty() {
        return 1.0;
    }
    gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64 / gold.len() as f64
}

/// Entity mention over word indices, `end` inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    /// Index into [`ENTITY_TYPES`].
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn label_name(&self) -> &'static str {
        ENTITY_TYPES[self.label]
    }
}

/// Decodes IOB2 spans. `B-X` opens a span; `I-X` extends an open span of
/// type X; an `I-X` after `O` or after another type opens a new span.
pub fn decode_spans(tags: &[Tag]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::O => spans.extend(open.take()),
            Tag::Begin(t) => {
                spans.extend(open.take());
                open = Some(EntitySpan { label: t, start: i, end: i });
            }
            Tag::Inside(t) => match &mut open {
                Some(s) if s.label == t => s.end = i,
                _ => {
                    spans.extend(open.take());
                    open = Some(EntitySpan { label: t, start: i, end: i });
                }
            },
        }
    }
    spans.extend(open);
    spans
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl EntityScores {
    fn from_counts(gold: usize, predicted: usize, correct: usize) -> Self {
        // empty sets on both sides count as perfect agreement
        let ratio = |num: usize, den: usize| if den == 0 { if gold + predicted == 0 { 1.0 } else { 0.0 } } else { num as f64 / den as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if gold + predicted == 0 {
            1.0
        } else if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EntityScores {
            precision,
            recall,
            f1,
            gold,
            predicted,
            correct,
        }
    }
}

fn parse_all(tags: &[impl AsRef<str>]) -> Result<Vec<Tag>> {
    tags.iter().map(|t| parse_tag(t.as_ref())).collect()
}

/// Micro-averaged entity P/R/F1 over sentences, exact match on (type, start, end).
pub fn entity_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<EntityScores> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!("{} gold sentences but {} predicted", gold.len(), pred.len())));
    }
    let (mut g_total, mut p_total, mut correct) = (0, 0, 0);
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Invalid(format!(
                "sentence {i}: {} gold tags but {} predicted",
                g.len(),
                p.len()
            )));
        }
        let gs = decode_spans(&parse_all(g)?);
        let ps = decode_spans(&parse_all(p)?);
        g_total += gs.len();
        p_total += ps.len();
        correct += ps.iter().filter(|s| gs.contains(s)).count();
    }
    Ok(EntityScores::from_counts(g_total, p_total, correct))
}

/// Entity F1 per type, averaged without weights.
pub fn entity_macro_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<f64> {
    entity_f1(gold, pred)?;
    let mut sum = 0.0;
    for ty in 0..ENTITY_TYPES.len() {
        let (mut g_total, mut p_total, mut correct) = (0, 0, 0);
        for (g, p) in gold.iter().zip(pred) {
            let gs: Vec<_> = decode_spans(&parse_all(g)?).into_iter().filter(|s| s.label == ty).collect();
            let ps: Vec<_> = decode_spans(&parse_all(p)?).into_iter().filter(|s| s.label == ty).collect();
            g_total += gs.len();
            p_total += ps.len();
            correct += ps.iter().filter(|s| gs.contains(s)).count();
        }
        sum += EntityScores::from_counts(g_total, p_total, correct).f1;
    }
    Ok(sum / ENTITY_TYPES.len() as f64)
}
