use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{FinetuneConfig, Task};
use super::features::{cls_feature, decode_word_tags, ner_feature, NerFeature};
use super::model::{trim, Encoded, TaskModel};
use super::qa::{best_prediction, predict_span, qa_features, QaFeature, QaWindowing};
use crate::data::{ClsExample, NerExample, QaExample, QualityReport, NER_LABELS};
use crate::error::{Error, Result};
use crate::eval::{accuracy, entity_f1, macro_f1, squad_em, squad_f1, weighted_f1, NormalizationRules};
use crate::model::HeadKind;
use crate::pretrain::learning_rate;
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::{Adam, Graph, Var};
use crate::tokenizer::Tokenizer;

/// Raw examples of one task.
#[derive(Clone, Debug)]
pub enum Dataset {
    Qa(Vec<QaExample>),
    Sa(Vec<ClsExample>),
    Ner(Vec<NerExample>),
}

impl Dataset {
    pub fn task(&self) -> Task {
        match self {
            Dataset::Qa(_) => Task::Qa,
            Dataset::Sa(_) => Task::Sa,
            Dataset::Ner(_) => Task::Ner,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Qa(x) => x.len(),
            Dataset::Sa(x) => x.len(),
            Dataset::Ner(x) => x.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Deterministic 90/10 train/dev split keyed by a hash of each example's
    /// index. Fails when either side comes out empty.
    pub fn dev_split(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        fn split<T: Clone>(xs: &[T], seed: u64) -> (Vec<T>, Vec<T>) {
            let mut train = Vec::new();
            let mut dev = Vec::new();
            for (i, x) in xs.iter().enumerate() {
                if derive_seed(seed, "dev", i as u64) % 10 == 0 {
                    dev.push(x.clone());
                } else {
                    train.push(x.clone());
                }
            }
            (train, dev)
        }
        let (train, dev) = match self {
            Dataset::Qa(x) => {
                let (a, b) = split(x, seed);
                (Dataset::Qa(a), Dataset::Qa(b))
            }
            Dataset::Sa(x) => {
                let (a, b) = split(x, seed);
                (Dataset::Sa(a), Dataset::Sa(b))
            }
            Dataset::Ner(x) => {
                let (a, b) = split(x, seed);
                (Dataset::Ner(a), Dataset::Ner(b))
            }
        };
        if dev.is_empty() || train.is_empty() {
            return Err(Error::Invalid(format!(
                "a 90/10 split of {} examples leaves an empty side",
                self.len()
            )));
        }
        Ok((train, dev))
    }
}

/// Seeded shuffle, then the first `ceil(train_fraction · n)` items train.
pub fn shuffle_split<T>(mut items: Vec<T>, train_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    items.shuffle(&mut stream_rng(seed, "split", 0));
    let cut = ((items.len() as f64 * train_fraction).ceil() as usize).min(items.len());
    let test = items.split_off(cut);
    (items, test)
}

/// Target of one training row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Span { start: usize, end: usize },
    Class(usize),
    /// Per position; `None` is ignored by the loss.
    Tags(Vec<Option<usize>>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainItem {
    pub input: Encoded,
    pub target: Target,
}

/// Tokenized dataset plus whatever evaluation needs to map predictions back.
#[derive(Clone, Debug)]
pub enum Prepared {
    Qa {
        examples: Vec<QaExample>,
        features: Vec<QaFeature>,
        report: QualityReport,
    },
    Sa {
        examples: Vec<ClsExample>,
        inputs: Vec<Encoded>,
        classes: usize,
    },
    Ner {
        examples: Vec<NerExample>,
        features: Vec<NerFeature>,
    },
}

impl Prepared {
    /// `training` drops QA examples without answers.
    pub fn new(data: &Dataset, tokenizer: &Tokenizer, config: &FinetuneConfig, training: bool) -> Result<Self> {
        let task = data.task();
        config.validate(task)?;
        let max_len = config.max_seq_len(task);
        Ok(match data {
            Dataset::Qa(examples) => {
                let w = QaWindowing {
                    max_len,
                    stride: config.doc_stride,
                    max_query_len: config.max_query_len,
                };
                let (features, report) = qa_features(examples, tokenizer, &w, training)?;
                Prepared::Qa {
                    examples: examples.clone(),
                    features,
                    report,
                }
            }
            Dataset::Sa(examples) => Prepared::Sa {
                inputs: examples
                    .iter()
                    .map(|e| cls_feature(e, tokenizer, max_len, config.num_classes))
                    .collect::<Result<_>>()?,
                examples: examples.clone(),
                classes: config.num_classes,
            },
            Dataset::Ner(examples) => Prepared::Ner {
                features: examples
                    .iter()
                    .map(|e| ner_feature(e, tokenizer, max_len))
                    .collect::<Result<_>>()?,
                examples: examples.clone(),
            },
        })
    }

    pub fn task(&self) -> Task {
        match self {
            Prepared::Qa { .. } => Task::Qa,
            Prepared::Sa { .. } => Task::Sa,
            Prepared::Ner { .. } => Task::Ner,
        }
    }

    /// Head a model needs for this data.
    pub fn head_kind(&self) -> HeadKind {
        match self {
            Prepared::Qa { .. } => HeadKind::Span,
            Prepared::Sa { classes, .. } => HeadKind::Classification { classes: *classes },
            Prepared::Ner { .. } => HeadKind::Token { tags: NER_LABELS.len() },
        }
    }

    pub fn num_examples(&self) -> usize {
        match self {
            Prepared::Qa { examples, .. } => examples.len(),
            Prepared::Sa { examples, .. } => examples.len(),
            Prepared::Ner { examples, .. } => examples.len(),
        }
    }

    pub fn train_items(&self) -> Vec<TrainItem> {
        match self {
            Prepared::Qa { features, .. } => features
                .iter()
                .map(|f| TrainItem {
                    input: f.input.clone(),
                    target: Target::Span {
                        start: f.start_position,
                        end: f.end_position,
                    },
                })
                .collect(),
            Prepared::Sa { examples, inputs, .. } => inputs
                .iter()
                .zip(examples)
                .map(|(i, e)| TrainItem {
                    input: i.clone(),
                    target: Target::Class(e.label),
                })
                .collect(),
            Prepared::Ner { features, .. } => features
                .iter()
                .map(|f| TrainItem {
                    input: f.input.clone(),
                    target: Target::Tags(f.targets.clone()),
                })
                .collect(),
        }
    }
}

/// Mean loss of a batch under the head's objective: averaged start/end
/// cross-entropy for spans, cross-entropy on `[CLS]` for classes and
/// per-token cross-entropy over tagged positions for tags.
pub fn batch_loss<'p>(
    g: &mut Graph<'p, f32>,
    model: &'p TaskModel,
    items: &[&TrainItem],
    dropout: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let inputs: Vec<Encoded> = items.iter().map(|i| i.input.clone()).collect();
    let trimmed = trim(&inputs);
    let l = trimmed[0].len();
    let refs: Vec<&Encoded> = trimmed.iter().collect();
    let logits = model.forward(g, &refs, dropout)?;
    let b = items.len();
    match (&items[0].target, model.head_kind()) {
        (Target::Span { .. }, HeadKind::Span) => {
            let mut starts = Vec::with_capacity(b);
            let mut ends = Vec::with_capacity(b);
            for it in items {
                let Target::Span { start, end } = it.target else {
                    return Err(Error::Invalid("mixed targets in one batch".into()));
                };
                if start >= l || end >= l {
                    return Err(Error::Invalid(format!("span target ({start}, {end}) beyond length {l}")));
                }
                starts.push(Some(start));
                ends.push(Some(end));
            }
            let s = g.slice(logits, 2, 0, 1)?;
            let s = g.reshape(s, &[b, l])?;
            let e = g.slice(logits, 2, 1, 2)?;
            let e = g.reshape(e, &[b, l])?;
            let ls = g.cross_entropy(s, &starts)?;
            let le = g.cross_entropy(e, &ends)?;
            let sum = g.add(ls, le)?;
            Ok(g.scale(sum, 0.5))
        }
        (Target::Class(_), HeadKind::Classification { classes }) => {
            let targets = items
                .iter()
                .map(|it| match it.target {
                    Target::Class(k) if k < classes => Ok(Some(k)),
                    Target::Class(k) => Err(Error::Invalid(format!("label {k} out of range for {classes} classes"))),
                    _ => Err(Error::Invalid("mixed targets in one batch".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            g.cross_entropy(logits, &targets)
        }
        (Target::Tags(_), HeadKind::Token { tags }) => {
            let mut targets = Vec::with_capacity(b * l);
            for it in items {
                let Target::Tags(t) = &it.target else {
                    return Err(Error::Invalid("mixed targets in one batch".into()));
                };
                for p in 0..l {
                    let tag = t.get(p).copied().flatten();
                    if tag.is_some_and(|k| k >= tags) {
                        return Err(Error::Invalid(format!("tag index {tag:?} out of range for {tags} tags")));
                    }
                    targets.push(tag);
                }
            }
            if targets.iter().all(Option::is_none) {
                return Err(Error::Invalid("batch has no tagged position".into()));
            }
            let flat = g.reshape(logits, &[b * l, tags])?;
            g.cross_entropy(flat, &targets)
        }
        (_, kind) => Err(Error::Config(format!("{kind:?} head cannot train on these targets"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub dev: Option<Scores>,
}

/// Fine-tunes in place with Adam, linear warmup over the configured share of
/// updates and linear decay to zero. Each epoch visits the items in a seeded
/// shuffled order. `dev` is scored after every epoch.
pub fn train_task(
    model: &mut TaskModel,
    items: &[TrainItem],
    dev: Option<&Prepared>,
    config: &FinetuneConfig,
    lr: f64,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<Vec<EpochLog>> {
    if items.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let task = match model.head_kind() {
        HeadKind::Span => Task::Qa,
        HeadKind::Classification { .. } => Task::Sa,
        HeadKind::Token { .. } => Task::Ner,
        k => return Err(Error::Config(format!("{k:?} is not a task head"))),
    };
    config.validate(task)?;
    let epochs = config.epochs(task);
    let per_epoch = items.len().div_ceil(config.batch_size) as u64;
    let total = per_epoch * epochs as u64;
    let warmup = (config.warmup_fraction * total as f64).ceil() as u64;
    let mut adam = Adam::new(config.adam, model.store());
    let mut step = 0u64;
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, "finetune.order", epoch as u64));
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let mut dropout = stream_rng(config.seed, "finetune.dropout", step);
            let rate = learning_rate(step, lr, warmup, total);
            let (loss, grads) = {
                let mut g = Graph::new();
                let loss = batch_loss(&mut g, model, &batch, Some(&mut dropout))?;
                let value = g.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        what: "fine-tuning loss".into(),
                        detail: format!("step {step}"),
                    });
                }
                (value, g.backward(loss)?.into_param_grads(model.store().len()))
            };
            adam.step(model.store_mut(), &grads, rate)?;
            sum += loss;
            on_step(&StepLog {
                step,
                epoch,
                lr: rate,
                loss,
            });
        }
        let dev = dev.map(|d| evaluate(model, d, config)).transpose()?;
        logs.push(EpochLog {
            epoch,
            steps: step,
            train_loss: sum / per_epoch as f64,
            dev,
        });
    }
    Ok(logs)
}

/// Task metrics of one evaluation. `f1` is the selection metric: SQuAD F1,
/// macro-F1 or entity F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub task: Task,
    pub examples: usize,
    pub f1: f64,
    pub metrics: BTreeMap<String, f64>,
    /// Answer text, label index or space-joined word tags, per example.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub predictions: Vec<String>,
}

pub fn evaluate(model: &TaskModel, data: &Prepared, config: &FinetuneConfig) -> Result<Scores> {
    if model.head_kind() != data.head_kind() {
        return Err(Error::Config(format!(
            "model has a {:?} head but the data needs {:?}",
            model.head_kind(),
            data.head_kind()
        )));
    }
    let batch = config.batch_size;
    let mut metrics = BTreeMap::new();
    let (f1, predictions, n) = match data {
        Prepared::Qa { examples, features, .. } => {
            let inputs: Vec<Encoded> = features.iter().map(|f| f.input.clone()).collect();
            let outputs = model.predict(&inputs, batch)?;
            let mut per_example: Vec<Vec<_>> = vec![Vec::new(); examples.len()];
            for (f, out) in features.iter().zip(&outputs) {
                let l = out.shape()[0];
                let (s, e): (Vec<f32>, Vec<f32>) = (0..l).map(|p| (out.data()[2 * p], out.data()[2 * p + 1])).unzip();
                per_example[f.example].push(predict_span(&s, &e, f, config.max_answer_len, config.n_best));
            }
            let rules = NormalizationRules::default();
            let (mut em, mut f1, mut scored) = (0.0, 0.0, 0usize);
            let mut predictions = Vec::with_capacity(examples.len());
            for (ex, preds) in examples.iter().zip(per_example) {
                let text = best_prediction(preds).map_or("", |p| p.text(&ex.context));
                if !ex.answers.is_empty() {
                    let golds: Vec<&str> = ex.answers.iter().map(|a| a.text.as_str()).collect();
                    em += squad_em(text, &golds, &rules);
                    f1 += squad_f1(text, &golds, &rules);
                    scored += 1;
                }
                predictions.push(text.to_string());
            }
            let d = scored.max(1) as f64;
            metrics.insert("exact_match".into(), em / d);
            metrics.insert("f1".into(), f1 / d);
            (f1 / d, predictions, scored)
        }
        Prepared::Sa { examples, inputs, classes } => {
            let outputs = model.predict(inputs, batch)?;
            let pred: Vec<usize> = outputs
                .iter()
                .map(|o| {
                    let d = o.data();
                    (0..d.len()).max_by(|&a, &b| d[a].total_cmp(&d[b]).then(b.cmp(&a))).unwrap_or(0)
                })
                .collect();
            let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
            let m = macro_f1(&gold, &pred, *classes)?;
            metrics.insert("accuracy".into(), accuracy(&gold, &pred));
            metrics.insert("macro_f1".into(), m);
            metrics.insert("weighted_f1".into(), weighted_f1(&gold, &pred, *classes)?);
            (m, pred.iter().map(|p| p.to_string()).collect(), examples.len())
        }
        Prepared::Ner { examples, features } => {
            let inputs: Vec<Encoded> = features.iter().map(|f| f.input.clone()).collect();
            let outputs = model.predict(&inputs, batch)?;
            let mut gold = Vec::with_capacity(examples.len());
            let mut pred = Vec::with_capacity(examples.len());
            let (mut right, mut words) = (0usize, 0usize);
            for ((ex, f), out) in examples.iter().zip(features).zip(&outputs) {
                let tags = decode_word_tags(out.data(), NER_LABELS.len(), &f.word_positions);
                let p: Vec<String> = tags.iter().map(|t| t.to_string()).collect();
                let g: Vec<String> = crate::data::normalize_iob2(&ex.tags)?.iter().map(|t| t.to_string()).collect();
                right += g.iter().zip(&p).filter(|(a, b)| a == b).count();
                words += g.len();
                gold.push(g);
                pred.push(p);
            }
            let s = entity_f1(&gold, &pred)?;
            metrics.insert("entity_precision".into(), s.precision);
            metrics.insert("entity_recall".into(), s.recall);
            metrics.insert("entity_f1".into(), s.f1);
            metrics.insert(
                "token_accuracy".into(),
                if words == 0 { 1.0 } else { right as f64 / words as f64 },
            );
            (s.f1, pred.iter().map(|p| p.join(" ")).collect(), examples.len())
        }
    };
    Ok(Scores {
        task: data.task(),
        examples: n,
        f1,
        metrics,
        predictions,
    })
}

/// One fine-tune run from `init` at learning rate `lr`.
pub fn finetune(
    init: &TaskModel,
    train: &Prepared,
    dev: Option<&Prepared>,
    config: &FinetuneConfig,
    lr: f64,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<(TaskModel, Vec<EpochLog>)> {
    if init.head_kind() != train.head_kind() {
        return Err(Error::Config(format!(
            "model has a {:?} head but {} training needs {:?}",
            init.head_kind(),
            train.task().name(),
            train.head_kind()
        )));
    }
    let mut model = init.clone();
    let logs = train_task(&mut model, &train.train_items(), dev, config, lr, on_step)?;
    Ok((model, logs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub dev: f64,
    pub test: Option<f64>,
    pub epochs: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub task: Task,
    pub rows: Vec<SweepRow>,
    pub best_lr: f64,
    pub best_dev: f64,
}

/// Fine-tunes once per grid point from the same initial model with the same
/// seed and keeps the model with the best dev F1; ties go to the smaller
/// learning rate.
pub fn lr_sweep(
    init: &TaskModel,
    train: &Prepared,
    dev: &Prepared,
    test: Option<&Prepared>,
    config: &FinetuneConfig,
    on_step: &mut dyn FnMut(f64, &StepLog),
) -> Result<(TaskModel, SweepReport)> {
    if dev.num_examples() == 0 {
        return Err(Error::Invalid("dev split is empty".into()));
    }
    let mut grid = config.lr_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut rows = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, TaskModel)> = None;
    for &lr in &grid {
        let (model, epochs) = finetune(init, train, None, config, lr, &mut |s| on_step(lr, s))?;
        let d = evaluate(&model, dev, config)?.f1;
        let t = test.map(|t| evaluate(&model, t, config)).transpose()?.map(|s| s.f1);
        rows.push(SweepRow {
            lr,
            dev: d,
            test: t,
            epochs,
        });
        if best.as_ref().is_none_or(|(_, b, _)| d > *b) {
            best = Some((lr, d, model));
        }
    }
    let (best_lr, best_dev, model) = best.expect("grid is non-empty");
    Ok((
        model,
        SweepReport {
            task: train.task(),
            rows,
            best_lr,
            best_dev,
        },
    ))
}
