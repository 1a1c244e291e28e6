//! Frozen-encoder linear probe and the MLM-vs-RTD step-budget comparison.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::PretrainConfig;
use super::masking::pack_sequences;
use super::trainer::{check_config, Pretrainer};
use crate::data::{SyntheticLangSpec, SyntheticLanguage};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, EncoderInput, EncoderModel};
use crate::rng::stream_rng;
use crate::tensor::{Graph, ParamStore};
use crate::tokenizer::SpecialIds;

/// Downstream task: tell original synthetic sequences from ones where a few
/// pairs of tokens traded places. Both classes have the same multiset of
/// tokens, so only order-aware features beat chance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub train_examples: usize,
    pub test_examples: usize,
    /// Transpositions applied to each positive example.
    pub swaps: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_examples: 512,
            test_examples: 256,
            swaps: 3,
            epochs: 300,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub windows: Vec<Vec<u32>>,
    pub labels: Vec<bool>,
}

/// Balanced examples, each `[CLS] tokens [SEP]` of length `seq_len`.
pub fn probe_dataset(
    lang: &SyntheticLanguage,
    n: usize,
    seq_len: usize,
    swaps: usize,
    specials: SpecialIds,
    seed: u64,
    stream: &str,
) -> Result<ProbeData> {
    if seq_len < 3 {
        return Err(Error::Config(format!("probe seq_len must be at least 3, got {seq_len}")));
    }
    let mut windows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, stream, i as u64);
        let mut body = lang.generate(seq_len - 2, &mut rng);
        let corrupt = i % 2 == 1;
        if corrupt {
            transpose_tokens(&mut body, swaps, &mut rng);
        }
        let mut w = Vec::with_capacity(seq_len);
        w.push(specials.cls);
        w.extend(body);
        w.push(specials.sep);
        windows.push(w);
        labels.push(corrupt);
    }
    Ok(ProbeData { windows, labels })
}

/// Swaps `swaps` random pairs of unequal tokens (fewer if the sequence is
/// nearly constant).
pub fn transpose_tokens(seq: &mut [u32], swaps: usize, rng: &mut impl Rng) -> usize {
    let mut done = 0;
    for _ in 0..swaps * 20 {
        if done == swaps || seq.len() < 2 {
            break;
        }
        let i = rng.gen_range(0..seq.len());
        let j = rng.gen_range(0..seq.len());
        if seq[i] != seq[j] {
            seq.swap(i, j);
            done += 1;
        }
    }
    done
}

/// Mean of final hidden states over non-pad positions, one row per window.
pub fn pooled_features(
    encoder: &EncoderModel,
    store: &ParamStore<f32>,
    windows: &[Vec<u32>],
    pad: u32,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let h = encoder.config().hidden_size;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let seq_len = chunk[0].len();
        if chunk.iter().any(|w| w.len() != seq_len) {
            return Err(Error::Invalid("probe windows differ in length".into()));
        }
        let ids: Vec<u32> = chunk.concat();
        let attention: Vec<bool> = ids.iter().map(|&t| t != pad).collect();
        let input = EncoderInput {
            ids: &ids,
            segments: None,
            attention: &attention,
            batch: chunk.len(),
            seq_len,
        };
        let mut g = Graph::new();
        let hidden = encoder.forward(&mut g, store, &input, None)?.hidden;
        let data = g.value(hidden).data();
        for b in 0..chunk.len() {
            let mut row = vec![0.0f64; h];
            let mut n = 0usize;
            for t in 0..seq_len {
                if attention[b * seq_len + t] {
                    n += 1;
                    let base = (b * seq_len + t) * h;
                    for (r, &x) in row.iter_mut().zip(&data[base..base + h]) {
                        *r += x as f64;
                    }
                }
            }
            row.iter_mut().for_each(|r| *r /= n.max(1) as f64);
            out.push(row);
        }
    }
    Ok(out)
}

/// Binary logistic regression on standardized features, full-batch
/// gradient descent from zero weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogisticProbe {
    pub fn fit(x: &[Vec<f64>], y: &[bool], epochs: usize, lr: f64, l2: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Invalid(format!("{} feature rows for {} labels", x.len(), y.len())));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        // constant features stay at zero after centering
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { s.sqrt() } else { 1.0 });
        let mut probe = LogisticProbe {
            mean,
            scale,
            weights: vec![0.0; d],
            bias: 0.0,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        for _ in 0..epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (row, &label) in z.iter().zip(y) {
                let err = sigmoid(probe.logit_std(row)) - if label { 1.0 } else { 0.0 };
                for (g, v) in gw.iter_mut().zip(row) {
                    *g += err * v / n;
                }
                gb += err / n;
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= lr * (g + l2 * *w);
            }
            probe.bias -= lr * gb;
        }
        Ok(probe)
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn logit_std(&self, z: &[f64]) -> f64 {
        self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, row: &[f64]) -> bool {
        self.logit_std(&self.standardize(row)) > 0.0
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[bool]) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        x.iter().zip(y).filter(|(r, &l)| self.predict(r) == l).count() as f64 / x.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct BenchSetup {
    pub language: SyntheticLangSpec,
    /// Shared by the MLM model and the RTD discriminator.
    pub encoder: EncoderConfig,
    pub mlm_encoder: EncoderConfig,
    pub generator: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub budget_steps: u64,
    /// Probe after every this many steps; the budget itself is always probed.
    pub probe_every: u64,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub seed: u64,
    pub step: u64,
    pub mlm_probe_acc: f64,
    pub rtd_probe_acc: f64,
}

pub const BENCH_HEADER: &str = "seed,step,mlm_probe_acc,rtd_probe_acc";

fn probe_steps(budget: u64, every: u64) -> Vec<u64> {
    let mut s: Vec<u64> = if every == 0 {
        Vec::new()
    } else {
        (0..=budget).step_by(every as usize).collect()
    };
    if s.last() != Some(&budget) {
        s.push(budget);
    }
    s
}

/// Trains both objectives per seed with the same data order and schedule,
/// probing the frozen encoder at fixed step counts. Rows come in seed, then
/// step order.
pub fn bench_efficiency(setup: &BenchSetup, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    check_config("MLM baseline", &setup.encoder, &setup.mlm_encoder)?;
    if setup.seeds.is_empty() {
        return Err(Error::Config("bench needs at least one seed".into()));
    }
    let lang = SyntheticLanguage::new(setup.language.clone())?;
    let specials = SpecialIds::LEADING;
    let corpus = lang.corpus();
    let windows = pack_sequences(&corpus.train, setup.pretrain.seq_len, specials)?;
    let p = &setup.probe;
    let train = probe_dataset(&lang, p.train_examples, setup.pretrain.seq_len, p.swaps, specials, setup.language.seed, "probe.train")?;
    let test = probe_dataset(&lang, p.test_examples, setup.pretrain.seq_len, p.swaps, specials, setup.language.seed, "probe.test")?;
    let score = |t: &Pretrainer| -> Result<f64> {
        let fx = |d: &ProbeData| pooled_features(t.encoder(), t.store(), &d.windows, specials.pad, setup.pretrain.batch_size.max(16));
        let probe = LogisticProbe::fit(&fx(&train)?, &train.labels, p.epochs, p.learning_rate, p.l2)?;
        Ok(probe.accuracy(&fx(&test)?, &test.labels))
    };
    let mut rows = Vec::new();
    for &seed in &setup.seeds {
        let cfg = PretrainConfig {
            seed,
            steps: setup.budget_steps.max(setup.pretrain.warmup_steps).max(1),
            ..setup.pretrain.clone()
        };
        let mut rtd = Pretrainer::new_rtd(&setup.generator, &setup.encoder, &cfg, windows.clone(), specials)?;
        let mut mlm = Pretrainer::new_mlm(&setup.mlm_encoder, &cfg, windows.clone(), specials)?;
        for step in probe_steps(setup.budget_steps, setup.probe_every) {
            rtd.run(step, |_| Ok(()))?;
            mlm.run(step, |_| Ok(()))?;
            let row = BenchRow {
                seed,
                step,
                mlm_probe_acc: score(&mlm)?,
                rtd_probe_acc: score(&rtd)?,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Seeds where RTD's final probe accuracy is at least MLM's, out of all seeds.
pub fn rtd_wins(rows: &[BenchRow]) -> (usize, usize) {
    let mut finals: Vec<&BenchRow> = Vec::new();
    for r in rows {
        match finals.iter_mut().find(|f| f.seed == r.seed) {
            Some(f) if f.step < r.step => *f = r,
            Some(_) => {}
            None => finals.push(r),
        }
    }
    let wins = finals.iter().filter(|r| r.rtd_probe_acc >= r.mlm_probe_acc).count();
    (wins, finals.len())
}
