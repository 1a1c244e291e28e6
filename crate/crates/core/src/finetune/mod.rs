//! Task heads and training loops for extractive QA, sentence classification
//! and named-entity tagging on top of a pretrained encoder.

mod config;
mod features;
mod model;
mod qa;
mod train;

pub use config::{FinetuneConfig, Task, LR_GRID};
pub use features::{cls_feature, decode_word_tags, ner_feature, NerFeature};
pub use model::{Encoded, TaskMeta, TaskModel};
pub use qa::{best_prediction, build_qa_features, predict_span, qa_features, QaFeature, QaWindowing, SpanPrediction};
pub use train::{
    batch_loss, evaluate, finetune, lr_sweep, shuffle_split, train_task, Dataset, EpochLog, Prepared, Scores, StepLog,
    SweepReport, SweepRow, Target, TrainItem,
};
