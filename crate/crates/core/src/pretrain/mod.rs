//! Pretraining: masking, generator and discriminator objectives, the
//! training loop and the objective comparison benchmark.

mod config;
mod masking;
mod objective;
mod probe;
mod schedule;
mod trainer;

pub use config::{Objective, PretrainConfig};
pub use masking::{is_maskable, make_masked_batch, masked_count, pack_sequences, MaskedBatch};
pub use objective::{
    discriminator_step, generator_step, rtd_labels, sample_categorical, sample_replacements, token_accuracy,
    DiscOutput, MlmModel, MlmOutput, RtdModels, ENCODER_PREFIX, GENERATOR_PREFIX,
};
pub use probe::{
    bench_efficiency, pooled_features, probe_dataset, rtd_wins, BenchRow, BenchSetup, LogisticProbe, ProbeConfig,
    ProbeData, BENCH_HEADER,
};
pub use schedule::learning_rate;
pub use trainer::{
    check_config, mlm_train_step, prepare_batch, rtd_train_step, trailing_mean, HeldoutMetrics, MetricsLog,
    PretrainMeta, Pretrainer, StepMetrics, METRICS_HEADER,
};
