//! The acceptance checks, shared with the focused test files. Every check
//! returns a one-line summary when it holds and the reason when it does not.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rtd_core::data::{Answer, QaExample, SyntheticLangSpec, SyntheticLanguage, ENTITY_TYPES};
use rtd_core::eval::{entity_f1, macro_f1, squad_em, squad_f1, NormalizationRules};
use rtd_core::finetune::{build_qa_features, evaluate, finetune, Dataset, FinetuneConfig, Prepared, QaWindowing, TaskModel};
use rtd_core::model::{count_parameters, Checkpoint, EmbeddingTying, EncoderConfig, HeadKind};
use rtd_core::pretrain::{
    bench_efficiency, discriminator_step, generator_step, learning_rate, make_masked_batch, pack_sequences, rtd_wins,
    sample_replacements, trailing_mean, BenchRow, BenchSetup, MaskedBatch, MetricsLog, PretrainConfig, Pretrainer,
    ProbeConfig, RtdModels, StepMetrics,
};
use rtd_core::rng::stream_rng;
use rtd_core::tensor::{Graph, ParamId, ParamStore, Tensor};
use rtd_core::tokenizer::{train_vocab, SpecialIds, Tokenizer};

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fail<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{what}: {e}")
}

// ---------------------------------------------------------------- 1

pub fn parameter_count() -> Check {
    let c = EncoderConfig::paper_discriminator(64_000);
    let shape = (c.num_layers, c.hidden_size, c.num_heads, c.ffn_size, c.vocab_size, c.max_positions);
    if shape != (12, 768, 12, 3072, 64_000, 512) {
        return Err(format!("discriminator preset is {shape:?}"));
    }
    let n = count_parameters(&c, &[HeadKind::Rtd], EmbeddingTying::NONE);
    let rel = (n as f64 - 136e6).abs() / 136e6;
    ensure(rel <= 0.02, format!("{n} parameters, {:.2}% from 136M (tolerance 2%)", rel * 100.0))
}

// ---------------------------------------------------------------- 2

pub fn masking_rate() -> Check {
    let cfg = PretrainConfig::paper();
    let sp = SpecialIds::LEADING;
    let (rows, batches) = (8usize, 1000usize);
    let seqs: Vec<Vec<u32>> = (0..rows)
        .map(|r| (0..cfg.seq_len).map(|j| 5 + ((r * 7919 + j) % 997) as u32).collect())
        .collect();
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let mut rng = stream_rng(0, "acceptance.mask", 0);
    let (mut masked, mut total) = (0usize, 0usize);
    for _ in 0..batches {
        let b = make_masked_batch(&refs, cfg.mask_fraction, sp, &mut rng).map_err(fail("masking"))?;
        for row in b.mask_positions.chunks(b.seq_len) {
            let k = row.iter().filter(|&&m| m).count();
            if k != 77 {
                return Err(format!("a sequence of {} got {k} masks, expected 77", cfg.seq_len));
            }
        }
        masked += b.num_masked();
        total += b.original.len();
    }
    let frac = masked as f64 / total as f64;
    ensure(
        cfg.seq_len == 512 && (frac - 0.15).abs() <= 0.01,
        format!("{batches} batches at L={}: masked fraction {frac:.5}, 77 per sequence", cfg.seq_len),
    )
}

// ---------------------------------------------------------------- 4

/// A tiny generator/discriminator pair in f64 with a padded batch.
pub struct TinyRtd {
    pub store: ParamStore<f64>,
    pub models: RtdModels,
    pub vocab: usize,
}

pub fn tiny_rtd(seed: u64) -> TinyRtd {
    let vocab = 24;
    let d = EncoderConfig {
        num_layers: 1,
        num_heads: 2,
        hidden_size: 8,
        ffn_size: 16,
        vocab_size: vocab,
        max_positions: 16,
        embedding_size: 8,
        dropout: 0.0,
    };
    let g = EncoderConfig {
        hidden_size: 4,
        ffn_size: 8,
        ..d.clone()
    };
    let mut store = ParamStore::new();
    let models = RtdModels::build(&g, &d, EmbeddingTying::TOKEN_AND_POSITION, &mut store, seed).unwrap();
    TinyRtd { store, models, vocab }
}

/// Rows of different lengths: `[CLS] content [SEP]` then `[PAD]` to 12.
pub fn padded_batch(seed: u64, vocab: usize, mask_fraction: f64) -> MaskedBatch {
    let sp = SpecialIds::LEADING;
    let mut rng = stream_rng(seed, "acceptance.batch", 0);
    let seqs: Vec<Vec<u32>> = [10usize, 7, 4]
        .iter()
        .map(|&n| {
            let mut s = vec![sp.cls];
            s.extend((0..n).map(|_| rng.gen_range(5..vocab as u32)));
            s.push(sp.sep);
            s.resize(12, sp.pad);
            s
        })
        .collect();
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    make_masked_batch(&refs, mask_fraction, sp, &mut rng).unwrap()
}

fn generator_logits(t: &TinyRtd, batch: &MaskedBatch) -> Tensor<f64> {
    let mut g = Graph::new();
    let out = generator_step(&mut g, &t.store, &t.models.generator, &t.models.generator_head, batch, None).unwrap();
    g.value(out.logits).clone()
}

/// Replacements only at masked positions; labels exactly "differs from the original".
pub fn corruption_locality() -> Check {
    let t = tiny_rtd(1);
    let mut checked = 0;
    for s in 0..50 {
        let batch = padded_batch(s, t.vocab, 0.3);
        let logits = generator_logits(&t, &batch);
        let (corrupted, labels) = sample_replacements(&logits, &batch, 1.0, &mut stream_rng(s, "sample", 0)).unwrap();
        for i in 0..corrupted.len() {
            if !batch.mask_positions[i] && (corrupted[i] != batch.original[i] || labels[i]) {
                return Err(format!("batch {s}: unmasked position {i} was changed or labeled"));
            }
            if labels[i] != (corrupted[i] != batch.original[i]) {
                return Err(format!("batch {s}: label at {i} disagrees with the tokens"));
            }
        }
        checked += batch.num_masked();
    }
    Ok(format!("50 batches, {checked} masked positions"))
}

/// A generator sample equal to the original is labeled "original".
pub fn label_soundness() -> Check {
    let t = tiny_rtd(2);
    let mut hits = 0;
    for s in 0..50 {
        let batch = padded_batch(100 + s, t.vocab, 0.3);
        let logits = generator_logits(&t, &batch);
        let (corrupted, labels) = sample_replacements(&logits, &batch, 1.0, &mut stream_rng(s, "sample", 1)).unwrap();
        for i in batch.masked_indices() {
            if corrupted[i] == batch.original[i] {
                hits += 1;
                if labels[i] {
                    return Err(format!("batch {s}: correct sample at {i} labeled replaced"));
                }
            }
        }
    }
    // a generator certain of the original token replaces nothing
    let batch = padded_batch(7, t.vocab, 0.3);
    let positions = batch.masked_indices();
    let mut spike = vec![0.0; positions.len() * t.vocab];
    for (r, &p) in positions.iter().enumerate() {
        spike[r * t.vocab + batch.original[p] as usize] = 1e4;
    }
    let spike = Tensor::new(vec![positions.len(), t.vocab], spike).unwrap();
    let (corrupted, labels) = sample_replacements(&spike, &batch, 1.0, &mut stream_rng(0, "sample", 2)).unwrap();
    ensure(
        hits > 0 && corrupted == batch.original && labels.iter().all(|l| !l),
        format!("{hits} sampled hits labeled original; certain generator gives all-original labels"),
    )
}

fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// The discriminator loss averages every non-pad position and nothing else.
pub fn loss_support() -> Check {
    let t = tiny_rtd(3);
    let sp = SpecialIds::LEADING;
    let batch = padded_batch(9, t.vocab, 0.3);
    let logits = generator_logits(&t, &batch);
    let (corrupted, labels) = sample_replacements(&logits, &batch, 1.0, &mut stream_rng(0, "sample", 3)).unwrap();
    let run = |labels: &[bool]| {
        let mut g = Graph::new();
        let d = discriminator_step(
            &mut g,
            &t.store,
            &t.models.discriminator,
            &t.models.discriminator_head,
            &corrupted,
            labels,
            &batch.attention,
            (batch.batch, batch.seq_len),
            None,
        )
        .unwrap();
        let grads = g.backward(d.loss).unwrap();
        let dz = grads.wrt(d.logits).unwrap().to_vec();
        (g.value(d.loss).item(), g.value(d.logits).data().to_vec(), dz)
    };
    let (loss, z, dz) = run(&labels);
    let live: Vec<usize> = (0..corrupted.len()).filter(|&i| corrupted[i] != sp.pad).collect();
    let manual = live.iter().map(|&i| bce(z[i], if labels[i] { 1.0 } else { 0.0 })).sum::<f64>() / live.len() as f64;
    if (loss - manual).abs() > 1e-12 {
        return Err(format!("loss {loss} vs mean over non-pad positions {manual}"));
    }
    for i in 0..corrupted.len() {
        let pad = corrupted[i] == sp.pad;
        if pad != (dz[i] == 0.0) {
            return Err(format!("position {i} (pad {pad}) has logit gradient {}", dz[i]));
        }
    }
    let mut flipped = labels.clone();
    for i in 0..flipped.len() {
        if corrupted[i] == sp.pad {
            flipped[i] = !flipped[i];
        }
    }
    ensure(
        run(&flipped).0 == loss,
        format!("{} of {} positions scored, [CLS]/[SEP] included, pads inert", live.len(), corrupted.len()),
    )
}

fn ids_with_prefix(store: &ParamStore<f64>, prefix: &str) -> Vec<ParamId> {
    store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect()
}

/// Generator-only parameters get no gradient from the discriminator loss;
/// with λ = 0 the discriminator-only parameters get none from the total.
pub fn gradient_isolation() -> Check {
    let t = tiny_rtd(4);
    let batch = padded_batch(11, t.vocab, 0.3);
    let shared: BTreeSet<ParamId> = {
        let e = t.models.generator.embeddings();
        [e.token, e.position, e.segment]
            .into_iter()
            .flatten()
            .filter(|&id| t.store.name(id).starts_with("encoder."))
            .collect()
    };
    let gen_only = ids_with_prefix(&t.store, "generator.");
    let disc_only: Vec<ParamId> = ids_with_prefix(&t.store, "encoder.")
        .into_iter()
        .filter(|id| !shared.contains(id))
        .collect();
    let grads_for = |weight: f64, disc_only_loss: bool| {
        let mut g = Graph::new();
        let gen = generator_step(&mut g, &t.store, &t.models.generator, &t.models.generator_head, &batch, None).unwrap();
        let (corrupted, labels) =
            sample_replacements(g.value(gen.logits), &batch, 1.0, &mut stream_rng(0, "sample", 4)).unwrap();
        let d = discriminator_step(
            &mut g,
            &t.store,
            &t.models.discriminator,
            &t.models.discriminator_head,
            &corrupted,
            &labels,
            &batch.attention,
            (batch.batch, batch.seq_len),
            None,
        )
        .unwrap();
        let loss = if disc_only_loss {
            d.loss
        } else {
            let w = g.scale(d.loss, weight);
            g.add(gen.loss, w).unwrap()
        };
        g.backward(loss).unwrap().into_param_grads(t.store.len())
    };
    let disc = grads_for(1.0, true);
    if let Some(&id) = gen_only.iter().find(|&&id| !disc.is_zero(id)) {
        return Err(format!("discriminator loss reached `{}`", t.store.name(id)));
    }
    if shared.iter().all(|&id| disc.is_zero(id)) || disc_only.iter().all(|&id| disc.is_zero(id)) {
        return Err("discriminator loss reached none of its own parameters".into());
    }
    let zero = grads_for(0.0, false);
    if let Some(&id) = disc_only.iter().find(|&&id| !zero.is_zero(id)) {
        return Err(format!("with weight 0, `{}` still got a gradient", t.store.name(id)));
    }
    ensure(
        gen_only.iter().any(|&id| !zero.is_zero(id)),
        format!(
            "{} generator-only tensors untouched by the discriminator loss; {} discriminator-only tensors untouched at weight 0",
            gen_only.len(),
            disc_only.len()
        ),
    )
}

pub fn rtd_semantics() -> Check {
    let parts = [
        ("locality", corruption_locality()),
        ("labels", label_soundness()),
        ("loss support", loss_support()),
        ("isolation", gradient_isolation()),
    ];
    let failed: Vec<String> = parts
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    ensure(
        failed.is_empty(),
        if failed.is_empty() { "locality, label soundness, loss support, gradient isolation".into() } else { failed.join("; ") },
    )
}

// ---------------------------------------------------------------- 5

pub struct ToyRun {
    pub steps: Vec<StepMetrics>,
    pub csv: String,
}

/// Toy pretraining on the synthetic language with the default configs.
pub fn toy_pretrain(seed: u64, steps: Option<u64>, log_every: u64) -> rtd_core::Result<ToyRun> {
    let lang = SyntheticLanguage::new(SyntheticLangSpec {
        seed,
        ..SyntheticLangSpec::default()
    })?;
    let vocab = lang.vocab();
    let sp = vocab.specials();
    let mut cfg = PretrainConfig {
        seed,
        ..PretrainConfig::default()
    };
    if let Some(s) = steps {
        cfg.steps = s;
        cfg.warmup_steps = cfg.warmup_steps.min(s / 2);
    }
    let windows = pack_sequences(&lang.corpus().train, cfg.seq_len, sp)?;
    let mut t = Pretrainer::new_rtd(
        &EncoderConfig::toy_generator(vocab.len()),
        &EncoderConfig::toy_discriminator(vocab.len()),
        &cfg,
        windows,
        sp,
    )?;
    let mut out = Vec::new();
    let mut log = MetricsLog::new(Vec::new(), log_every, true)?;
    t.run(cfg.steps, |m| {
        out.push(m.clone());
        log.record(m)
    })?;
    Ok(ToyRun {
        steps: out,
        csv: String::from_utf8(log.finish()?).expect("csv is utf-8"),
    })
}

pub const SMOOTH: usize = 20;

/// Loss falls and the discriminator beats its label-majority rate.
pub fn toy_sanity(run: &ToyRun) -> Check {
    let s = &run.steps;
    if s.len() != 300 {
        return Err(format!("{} steps", s.len()));
    }
    let mlm: Vec<f64> = s.iter().map(|m| m.mlm_loss).collect();
    let acc: Vec<f64> = s.iter().map(|m| m.disc_acc.unwrap_or(0.0)).collect();
    let (first, last) = (mlm[0], trailing_mean(&mlm, SMOOTH));
    let tail = &s[s.len() - SMOOTH..];
    let replaced: usize = tail.iter().map(|m| m.replaced).sum();
    let tokens: usize = tail.iter().map(|m| m.tokens).sum();
    let r = replaced as f64 / tokens as f64;
    let majority = r.max(1.0 - r).max(0.5);
    let final_acc = trailing_mean(&acc, SMOOTH);
    ensure(
        last < first && final_acc >= majority + 0.02,
        format!(
            "mlm loss {first:.4} -> {last:.4} (last {SMOOTH} steps); disc acc {final_acc:.4} vs majority {majority:.4} + 0.02"
        ),
    )
}

// ---------------------------------------------------------------- 6

pub fn schedule() -> Check {
    let c = PretrainConfig::paper();
    let mid = learning_rate(5000, c.peak_lr, c.warmup_steps, c.steps);
    let end = learning_rate(c.steps, c.peak_lr, c.warmup_steps, c.steps);
    ensure(
        c.peak_lr == 2e-4 && c.warmup_steps == 10_000 && mid == 1e-4 && end == 0.0,
        format!("lr(5000) = {mid:e}, lr({}) = {end:e}", c.steps),
    )
}

// ---------------------------------------------------------------- 7

const TAGS: [&str; 9] = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG", "B-MISC", "I-MISC"];

fn type_of(tag: &str) -> Option<(bool, &str)> {
    tag.strip_prefix("B-").map(|t| (true, t)).or_else(|| tag.strip_prefix("I-").map(|t| (false, t)))
}

/// Every (type, start, end) that is an entity, found by testing each span.
pub fn brute_force_spans(tags: &[&str]) -> BTreeSet<(String, usize, usize)> {
    let n = tags.len();
    let mut out = BTreeSet::new();
    for ty in ENTITY_TYPES {
        let is = |i: usize, begin: Option<bool>| match type_of(tags[i]) {
            Some((b, t)) => t == ty && begin.map_or(true, |want| want == b),
            None => false,
        };
        for s in 0..n {
            // a span opens on B-X, or on I-X that does not continue an X
            let opens = is(s, Some(true)) || (is(s, Some(false)) && (s == 0 || !is(s - 1, None)));
            if !opens {
                continue;
            }
            for e in s..n {
                if e > s && !is(e, Some(false)) {
                    break;
                }
                let closed = e + 1 == n || !is(e + 1, Some(false));
                if closed {
                    out.insert((ty.to_string(), s, e));
                }
            }
        }
    }
    out
}

fn random_tags(rng: &mut impl Rng, len: usize) -> Vec<&'static str> {
    (0..len).map(|_| TAGS[rng.gen_range(0..TAGS.len())]).collect()
}

/// Entity F1 against span enumeration on `n` random sentence pairs.
pub fn entity_oracle(n: usize, seed: u64) -> Check {
    let mut rng = stream_rng(seed, "acceptance.iob2", 0);
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    let (mut g_total, mut p_total, mut correct) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let len = rng.gen_range(1..=12);
        let g = random_tags(&mut rng, len);
        let p: Vec<&str> = g
            .iter()
            .map(|&t| if rng.gen_bool(0.3) { TAGS[rng.gen_range(0..TAGS.len())] } else { t })
            .collect();
        let (gs, ps) = (brute_force_spans(&g), brute_force_spans(&p));
        let c = gs.intersection(&ps).count();
        let one = entity_f1(&[g.clone()], &[p.clone()]).map_err(fail("entity_f1"))?;
        if (one.gold, one.predicted, one.correct) != (gs.len(), ps.len(), c) {
            return Err(format!(
                "sentence {i} {g:?} / {p:?}: counts {:?} vs oracle {:?}",
                (one.gold, one.predicted, one.correct),
                (gs.len(), ps.len(), c)
            ));
        }
        g_total += gs.len();
        p_total += ps.len();
        correct += c;
        gold.push(g);
        pred.push(p);
    }
    let all = entity_f1(&gold, &pred).map_err(fail("entity_f1"))?;
    let f1 = 2.0 * correct as f64 / (g_total + p_total) as f64;
    ensure(
        (all.gold, all.predicted, all.correct) == (g_total, p_total, correct) && (all.f1 - f1).abs() < 1e-12,
        format!("{n} random IOB2 pairs, micro F1 {:.6} = oracle {f1:.6}", all.f1),
    )
}

/// Macro F1 against a confusion matrix built by hand.
pub fn macro_oracle(n: usize, seed: u64) -> Check {
    let mut rng = stream_rng(seed, "acceptance.macro", 0);
    for i in 0..n {
        let k = rng.gen_range(2..=5);
        let len = rng.gen_range(1..=30);
        let gold: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k)).collect();
        let mut cm = vec![vec![0usize; k]; k];
        for (&g, &p) in gold.iter().zip(&pred) {
            cm[g][p] += 1;
        }
        let mut sum = 0.0;
        for c in 0..k {
            let tp = cm[c][c] as f64;
            let row: usize = cm[c].iter().sum();
            let col: usize = (0..k).map(|r| cm[r][c]).sum();
            // a class absent from both sides counts as agreement
            sum += if row + col == 0 { 1.0 } else { 2.0 * tp / (row + col) as f64 };
        }
        let want = sum / k as f64;
        let got = macro_f1(&gold, &pred, k).map_err(fail("macro_f1"))?;
        if (got - want).abs() > 1e-12 {
            return Err(format!("case {i}: macro F1 {got} vs confusion matrix {want}"));
        }
    }
    Ok(format!("{n} random confusion matrices"))
}

pub fn worked_examples() -> Check {
    let r = NormalizationRules::default();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let cases = [
        ("em punctuation", squad_em("الجواب.", &["الجواب"], &r) == 1.0),
        ("em empty", squad_em("", &["x"], &r) == 0.0),
        ("em second gold", squad_em("مصر", &["القاهرة", "مصر"], &r) == 1.0),
        ("f1 overlap", close(squad_f1("القاهرة عاصمة", &["عاصمة مصر"], &r), 0.5)),
        ("f1 identical", squad_f1("abc d", &["abc d"], &r) == 1.0),
        ("f1 multiset", close(squad_f1("كتاب كتاب", &["كتاب"], &r), 2.0 / 3.0)),
        ("macro", close(macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap(), 11.0 / 15.0)),
        ("macro perfect", macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap() == 1.0),
        ("macro one class", close(macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap(), (2.0 / 3.0) / 2.0)),
        ("entity", {
            let s = entity_f1(&[vec!["B-PER", "I-PER", "O", "O"]], &[vec!["B-PER", "I-PER", "O", "B-LOC"]]).unwrap();
            s.precision == 0.5 && s.recall == 1.0 && close(s.f1, 2.0 / 3.0)
        }),
        ("entity identical", entity_f1(&[vec!["B-ORG", "I-ORG"]], &[vec!["B-ORG", "I-ORG"]]).unwrap().f1 == 1.0),
        ("entity repair", entity_f1(&[vec!["O", "B-PER"]], &[vec!["O", "I-PER"]]).unwrap().f1 == 1.0),
    ];
    let bad: Vec<&str> = cases.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    ensure(bad.is_empty(), if bad.is_empty() { format!("{} worked examples", cases.len()) } else { bad.join(", ") })
}

pub fn metric_oracles() -> Check {
    let parts = [worked_examples(), entity_oracle(10_000, 0), macro_oracle(1000, 0)];
    let msgs: Vec<String> = parts.iter().map(|r| r.clone().unwrap_or_else(|e| format!("FAILED {e}"))).collect();
    ensure(parts.iter().all(Result::is_ok), msgs.join("; "))
}

// ---------------------------------------------------------------- 8

pub fn qa_words() -> Vec<String> {
    let syll = ["ka", "lo", "mi", "ran", "te", "su", "bar", "en", "dol", "qi", "ast", "um"];
    let mut words: Vec<String> = (0..400)
        .map(|i| {
            let mut w = String::new();
            let mut x = i + 1;
            while x > 0 {
                w.push_str(syll[x % syll.len()]);
                x /= syll.len();
            }
            w
        })
        .collect();
    words.extend(["مدينة", "القاهرة", "النيل", "كتاب", "جامعة"].map(String::from));
    words
}

pub fn qa_tokenizer(words: &[String]) -> Tokenizer {
    // every second word enters the vocabulary whole; the rest split into pieces
    let docs: Vec<String> = words.iter().step_by(2).cloned().collect();
    Tokenizer::new(train_vocab(&docs, 600, 1).unwrap())
}

/// One random context with a gold answer made of whole words.
pub fn qa_case(words: &[String], rng: &mut impl Rng) -> QaExample {
    let pick = |rng: &mut dyn rand::RngCore| -> String {
        let w = &words[rng.gen_range(0..words.len())];
        if rng.gen_bool(0.1) {
            format!("{w},")
        } else {
            w.clone()
        }
    };
    let n = rng.gen_range(20..900);
    let ctx: Vec<String> = (0..n).map(|_| pick(rng)).collect();
    let a = rng.gen_range(0..n);
    let b = (a + rng.gen_range(1..8)).min(n);
    let before = ctx[..a].join(" ");
    let text = ctx[a..b].join(" ");
    let char_start = before.chars().count() + usize::from(a > 0);
    let q_len = rng.gen_range(3..80);
    QaExample {
        id: "q".into(),
        question: (0..q_len).map(|_| pick(rng)).collect::<Vec<_>>().join(" "),
        context: ctx.join(" "),
        answers: vec![Answer { text, char_start }],
    }
}

/// Containment and text recovery for one example.
pub fn qa_roundtrip_one(ex: &QaExample, tok: &Tokenizer, w: &QaWindowing) -> Result<usize, String> {
    let ans = &ex.answers[0];
    let features = build_qa_features(&ex.question, &ex.context, Some(ans), tok, w).map_err(fail("features"))?;
    // independent placement: pieces overlapping the answer's byte range
    let start_b = ex.context.char_indices().nth(ans.char_start).map_or(ex.context.len(), |(i, _)| i);
    let end_b = start_b + ans.text.len();
    let pieces = tok.tokenize(&ex.context);
    let covered: Vec<usize> = (0..pieces.len())
        .filter(|&i| pieces[i].offset.0 < end_b && pieces[i].offset.1 > start_b)
        .collect();
    let (s, e) = (covered[0], *covered.last().unwrap());
    let mut hits = 0;
    for f in &features {
        let (lo, hi) = (f.context_offset, f.context_offset + f.context.len());
        let inside = s >= lo && e < hi;
        if inside != (f.start_position != 0) {
            return Err(format!("window at {lo}: contains answer {inside}, target {}", f.start_position));
        }
        if f.input.len() > w.max_len {
            return Err(format!("window of {} tokens", f.input.len()));
        }
        if inside {
            let a = f.token_to_char[f.start_position].ok_or("start is not a context token")?;
            let b = f.token_to_char[f.end_position].ok_or("end is not a context token")?;
            let got = &ex.context[a.0..b.1];
            if got != ans.text {
                return Err(format!("recovered {got:?}, gold {:?}", ans.text));
            }
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(format!("answer tokens {s}..={e} fit in no window"));
    }
    Ok(features.len())
}

pub fn qa_overfit() -> Check {
    let context = "the old library of alexandria stood near the harbour for three centuries";
    let tok = Tokenizer::new(
        train_vocab([context, "where did the library stand ?"], 200, 1).map_err(fail("vocab"))?,
    );
    let answer = "alexandria";
    let ex = QaExample {
        id: "q0".into(),
        question: "where did the library stand ?".into(),
        context: context.into(),
        answers: vec![Answer {
            text: answer.into(),
            char_start: context.find(answer).unwrap(),
        }],
    };
    let cfg = FinetuneConfig {
        batch_size: 4,
        epochs: Some(100),
        learning_rate: 3e-3,
        ..Default::default()
    };
    let (max_len, stride) = (cfg.max_seq_len(rtd_core::finetune::Task::Qa), cfg.doc_stride);
    if (max_len, stride) != (384, 128) {
        return Err(format!("QA windowing {max_len}/{stride}"));
    }
    let data = Dataset::Qa(vec![ex; 4]);
    let prepared = Prepared::new(&data, &tok, &cfg, true).map_err(fail("prepare"))?;
    let enc = EncoderConfig {
        num_layers: 1,
        num_heads: 2,
        hidden_size: 32,
        ffn_size: 64,
        vocab_size: tok.vocab().len(),
        max_positions: 384,
        embedding_size: 32,
        dropout: 0.0,
    };
    let init = TaskModel::fresh(&enc, prepared.head_kind(), tok.vocab().specials(), 3).map_err(fail("model"))?;
    let (model, _) = finetune(&init, &prepared, None, &cfg, cfg.learning_rate, &mut |_| {}).map_err(fail("finetune"))?;
    let scores = evaluate(&model, &prepared, &cfg).map_err(fail("evaluate"))?;
    let em = scores.metrics["exact_match"];
    ensure(em == 1.0, format!("overfit EM {em} ({:?})", scores.predictions.first()))
}

pub fn qa_pipeline() -> Check {
    let words = qa_words();
    let tok = qa_tokenizer(&words);
    let w = QaWindowing::default();
    let mut rng = stream_rng(0, "acceptance.qa", 0);
    let (mut examples, mut windows) = (0, 0);
    for i in 0..200 {
        let ex = qa_case(&words, &mut rng);
        windows += qa_roundtrip_one(&ex, &tok, &w).map_err(|e| format!("example {i}: {e}"))?;
        examples += 1;
    }
    let overfit = qa_overfit()?;
    Ok(format!("{examples} contexts over {windows} windows at 384/128 recover gold text; {overfit}"))
}

// ---------------------------------------------------------------- 9

/// 10 uninterrupted steps against 5, save, load, 5 more.
pub fn resume_matches(dir: &std::path::Path) -> Check {
    let lang = SyntheticLanguage::new(SyntheticLangSpec::default()).map_err(fail("language"))?;
    let vocab = lang.vocab();
    let sp = vocab.specials();
    let cfg = PretrainConfig {
        steps: 10,
        warmup_steps: 3,
        ..PretrainConfig::default()
    };
    let windows = pack_sequences(&lang.corpus().train, cfg.seq_len, sp).map_err(fail("pack"))?;
    let build = || {
        Pretrainer::new_rtd(
            &EncoderConfig::toy_generator(vocab.len()),
            &EncoderConfig::toy_discriminator(vocab.len()),
            &cfg,
            windows.clone(),
            sp,
        )
        .map_err(fail("trainer"))
    };
    let mut whole = build()?;
    let mut a = Vec::new();
    whole.run(10, |m| Ok(a.push(m.clone()))).map_err(fail("run"))?;

    let mut first = build()?;
    let mut b = Vec::new();
    first.run(5, |m| Ok(b.push(m.clone()))).map_err(fail("run"))?;
    first.checkpoint().save(dir).map_err(fail("save"))?;
    drop(first);
    let mut second = Pretrainer::resume(Checkpoint::load(dir).map_err(fail("load"))?, windows.clone()).map_err(fail("resume"))?;
    second.run(10, |m| Ok(b.push(m.clone()))).map_err(fail("run"))?;

    if a != b {
        let i = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
        return Err(format!("step {} differs after resume", i + 1));
    }
    let same_params = whole
        .store()
        .iter()
        .zip(second.store().iter())
        .all(|((_, n1, t1), (_, n2, t2))| n1 == n2 && t1.data() == t2.data());
    ensure(same_params, "10 step losses and final parameters identical after save/load at step 5".into())
}

pub fn determinism(dir: &std::path::Path) -> Check {
    let a = toy_pretrain(5, Some(12), 1).map_err(fail("run"))?;
    let b = toy_pretrain(5, Some(12), 1).map_err(fail("run"))?;
    if a.csv != b.csv {
        return Err("two runs with one seed wrote different CSVs".into());
    }
    let c = toy_pretrain(6, Some(12), 1).map_err(fail("run"))?;
    if c.csv == a.csv {
        return Err("different seeds wrote the same CSV".into());
    }
    let resume = resume_matches(dir)?;
    Ok(format!("identical {}-byte loss CSVs per seed; {resume}", a.csv.len()))
}

// ---------------------------------------------------------------- 10

pub fn bench_setup(seeds: Vec<u64>, budget: u64) -> BenchSetup {
    let language = SyntheticLangSpec::default();
    let v = language.vocab_size;
    BenchSetup {
        language,
        encoder: EncoderConfig::toy_discriminator(v),
        mlm_encoder: EncoderConfig::toy_discriminator(v),
        generator: EncoderConfig::toy_generator(v),
        pretrain: PretrainConfig::default(),
        probe: ProbeConfig::default(),
        budget_steps: budget,
        probe_every: 100,
        seeds,
    }
}

pub fn efficiency(on_row: impl FnMut(&BenchRow)) -> (Check, Vec<BenchRow>) {
    let rows = match bench_efficiency(&bench_setup(vec![0, 1, 2, 3, 4], 300), on_row) {
        Ok(r) => r,
        Err(e) => return (Err(format!("bench: {e}")), Vec::new()),
    };
    let (wins, total) = rtd_wins(&rows);
    (ensure(wins >= 3, format!("RTD probe >= MLM probe on {wins} of {total} seeds at 300 steps")), rows)
}
