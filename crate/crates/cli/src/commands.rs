use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rtd_core::data::{
    convert_arsentd, read_conll, read_corpus, read_squad_json, read_tsv_classification, SyntheticLanguage,
};
use rtd_core::finetune::{
    evaluate as score, finetune as run_finetune, lr_sweep, shuffle_split, Dataset, Prepared, StepLog, TaskModel,
};
use rtd_core::model::{Checkpoint, HeadKind};
use rtd_core::pretrain::{
    bench_efficiency, pack_sequences, rtd_wins, BenchSetup, MetricsLog, Pretrainer, BENCH_HEADER,
};
use rtd_core::tokenizer::{train_vocab, Tokenizer, Vocab};
use serde_json::json;

use crate::config::RunConfig;
use crate::output::RunDir;
use crate::{Common, ObjectiveArg, Preset, TaskArg};

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => match common.preset {
            Preset::Toy => RunConfig::toy(),
            Preset::Paper => RunConfig::paper(),
        },
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    cfg.apply_seed(seed);
    Ok(cfg)
}

pub fn tokenize_train(
    common: &Common,
    corpus: &[PathBuf],
    vocab_size: Option<usize>,
    min_frequency: Option<u64>,
) -> Result<PathBuf> {
    let mut cfg = load_config(common)?;
    if let Some(v) = vocab_size {
        cfg.tokenizer.vocab_size = v;
    }
    if let Some(m) = min_frequency {
        cfg.tokenizer.min_frequency = m;
    }
    cfg.validate()?;
    let docs = read_corpus(corpus)?;
    let out = RunDir::create(&common.out, common.force)?;
    let vocab = train_vocab(&docs, cfg.tokenizer.vocab_size, cfg.tokenizer.min_frequency)?;
    vocab.save(out.path("vocab.txt"))?;
    eprintln!("vocabulary of {} entries from {} documents", vocab.len(), docs.len());
    out.finish("tokenize-train", &cfg, cfg.seed)
}

pub fn synth(common: &Common) -> Result<PathBuf> {
    let mut cfg = load_config(common)?;
    cfg.set_vocab_size(cfg.synthetic.vocab_size);
    cfg.validate()?;
    let lang = SyntheticLanguage::new(cfg.synthetic.clone())?;
    let corpus = lang.corpus();
    let out = RunDir::create(&common.out, common.force)?;
    for (name, seqs) in [("train.txt", &corpus.train), ("heldout.txt", &corpus.heldout)] {
        let mut f = std::io::BufWriter::new(out.create_file(name)?);
        for s in seqs.iter() {
            writeln!(f, "{}\n", SyntheticLanguage::render(s))?;
        }
        f.flush()?;
    }
    lang.vocab().save(out.path("vocab.txt"))?;
    out.finish("synth", &cfg, cfg.seed)
}

fn tokenize_docs(tokenizer: &Tokenizer, docs: &[String]) -> Vec<Vec<u32>> {
    docs.iter()
        .map(|d| tokenizer.tokenize(d).into_iter().map(|p| p.id).collect())
        .collect()
}

pub fn pretrain(
    common: &Common,
    corpus: &[PathBuf],
    vocab: Option<&Path>,
    objective: ObjectiveArg,
    steps: Option<u64>,
    stop_at: Option<u64>,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let mut cfg = load_config(common)?;
    // a resumed run keeps the checkpoint's seed, so the synthetic corpus and
    // data order are the ones it started with
    let resumed = match resume {
        Some(dir) => {
            if steps.is_some() {
                bail!("--steps cannot change the schedule of a resumed run; use --stop-at");
            }
            let ckpt = Checkpoint::load(dir)?;
            let meta = rtd_core::pretrain::PretrainMeta::from_checkpoint(&ckpt)?;
            match common.seed {
                Some(s) if s != meta.pretrain.seed => {
                    bail!("--seed {s} differs from the checkpoint seed {}", meta.pretrain.seed)
                }
                _ => cfg.apply_seed(meta.pretrain.seed),
            }
            Some((ckpt, meta))
        }
        None => None,
    };
    let (vocab, train, heldout) = if corpus.is_empty() {
        if vocab.is_some() {
            bail!("--vocab only applies together with --corpus");
        }
        let lang = SyntheticLanguage::new(cfg.synthetic.clone())?;
        let c = lang.corpus();
        (lang.vocab(), c.train, c.heldout)
    } else {
        let path = vocab.context("--corpus needs --vocab")?;
        let vocab = Vocab::load(path)?;
        let ids = tokenize_docs(&Tokenizer::new(vocab.clone()), &read_corpus(corpus)?);
        // every 20th document is held out once there are enough of them
        let (mut train, mut heldout) = (Vec::new(), Vec::new());
        for (i, d) in ids.into_iter().enumerate() {
            if i % 20 == 19 {
                heldout.push(d);
            } else {
                train.push(d);
            }
        }
        if train.is_empty() {
            std::mem::swap(&mut train, &mut heldout);
        }
        (vocab, train, heldout)
    };
    cfg.set_vocab_size(vocab.len());
    let specials = vocab.specials();

    let mut trainer = match resumed {
        Some((ckpt, meta)) => {
            cfg.pretrain = meta.pretrain.clone();
            cfg.discriminator = meta.encoder.clone();
            if let Some(g) = &meta.generator {
                cfg.generator = g.clone();
            }
            if meta.encoder.vocab_size != vocab.len() {
                bail!(
                    "checkpoint vocab_size {} does not match the vocabulary ({} entries)",
                    meta.encoder.vocab_size,
                    vocab.len()
                );
            }
            let windows = pack_sequences(&train, cfg.pretrain.seq_len, specials)?;
            Pretrainer::resume(ckpt, windows)?
        }
        None => {
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            cfg.validate()?;
            let windows = pack_sequences(&train, cfg.pretrain.seq_len, specials)?;
            match objective {
                ObjectiveArg::Rtd => {
                    Pretrainer::new_rtd(&cfg.generator, &cfg.discriminator, &cfg.pretrain, windows, specials)?
                }
                ObjectiveArg::Mlm => Pretrainer::new_mlm(&cfg.discriminator, &cfg.pretrain, windows, specials)?,
            }
        }
    };
    let until = stop_at.unwrap_or(cfg.pretrain.steps).min(cfg.pretrain.steps);
    if until <= trainer.step() {
        bail!("checkpoint is already at step {}, nothing to do until step {until}", trainer.step());
    }

    let out = RunDir::create(&common.out, common.force)?;
    let every = cfg.pretrain.log_every;
    let mut log = MetricsLog::new(std::io::BufWriter::new(out.create_file("metrics.csv")?), every, true)?;
    trainer.run(until, |m| {
        if m.step % every == 0 || m.step == until {
            let disc = m.disc_loss.map(|d| format!(" disc {d:.4}")).unwrap_or_default();
            eprintln!("step {:>6}  mlm {:.4}{disc}  lr {:.3e}", m.step, m.mlm_loss, m.lr);
        }
        log.record(m)
    })?;
    log.finish()?.flush()?;
    trainer.checkpoint().save(&out.path("checkpoint"))?;
    vocab.save(out.path("vocab.txt"))?;
    let held = if heldout.is_empty() {
        None
    } else {
        let windows = pack_sequences(&heldout, cfg.pretrain.seq_len, specials)?;
        Some(trainer.evaluate(&windows, cfg.seed)?)
    };
    out.write_json("heldout.json", &json!({ "step": trainer.step(), "metrics": held }))?;
    out.finish("pretrain", &cfg, cfg.seed)
}

fn task_of(arg: TaskArg) -> rtd_core::finetune::Task {
    match arg {
        TaskArg::Qa => rtd_core::finetune::Task::Qa,
        TaskArg::Sa => rtd_core::finetune::Task::Sa,
        TaskArg::Ner => rtd_core::finetune::Task::Ner,
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn load_task(task: rtd_core::finetune::Task, path: &Path, classes: usize) -> Result<Dataset> {
    use rtd_core::finetune::Task;
    Ok(match task {
        Task::Qa => {
            let (examples, report) = read_squad_json(path)?;
            if report.dropped > 0 {
                eprintln!("{}: dropped {} of {} questions", path.display(), report.dropped, report.total);
            }
            Dataset::Qa(examples)
        }
        Task::Sa if is_csv(path) => Dataset::Sa(convert_arsentd(path)?),
        Task::Sa => Dataset::Sa(read_tsv_classification(path, classes)?),
        Task::Ner => Dataset::Ner(read_conll(path)?),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn finetune(
    common: &Common,
    task: TaskArg,
    ckpt: Option<&Path>,
    vocab: &Path,
    train: &Path,
    dev: Option<&Path>,
    test: Option<&Path>,
    sweep: bool,
) -> Result<PathBuf> {
    let mut cfg = load_config(common)?;
    let task = task_of(task);
    cfg.finetune.validate(task)?;
    let vocab = Vocab::load(vocab)?;
    cfg.set_vocab_size(vocab.len());
    let tokenizer = Tokenizer::new(vocab.clone());
    let classes = cfg.finetune.num_classes;
    let seed = cfg.seed;

    let mut train_set = load_task(task, train, classes)?;
    let mut test_set = test.map(|p| load_task(task, p, classes)).transpose()?;
    // raw ArSenTD-Lev exports come without a test split: 80/20 seeded shuffle
    if let (Dataset::Sa(all), None, true) = (&train_set, &test_set, is_csv(train)) {
        let (a, b) = shuffle_split(all.clone(), 0.8, seed);
        train_set = Dataset::Sa(a);
        test_set = Some(Dataset::Sa(b));
    }
    let (train_set, dev_set) = match dev {
        Some(p) => (train_set, load_task(task, p, classes)?),
        None => train_set.dev_split(seed)?,
    };
    let f = &cfg.finetune;
    let train_p = Prepared::new(&train_set, &tokenizer, f, true)?;
    let dev_p = Prepared::new(&dev_set, &tokenizer, f, false)?;
    let test_p = test_set.map(|t| Prepared::new(&t, &tokenizer, f, false)).transpose()?;
    if let Prepared::Qa { report, .. } = &train_p {
        if report.dropped > 0 {
            eprintln!("skipped {} training questions whose answer could not be placed", report.dropped);
        }
    }

    let head = train_p.head_kind();
    let init = match ckpt {
        Some(dir) => {
            let model = TaskModel::from_pretrained(&Checkpoint::load(dir)?, head, seed)?;
            cfg.discriminator = model.config().clone();
            model
        }
        None => {
            cfg.validate()?;
            TaskModel::fresh(&cfg.discriminator, head, vocab.specials(), seed)?
        }
    };
    if init.config().vocab_size != vocab.len() {
        bail!(
            "encoder vocab_size {} does not match the vocabulary ({} entries)",
            init.config().vocab_size,
            vocab.len()
        );
    }

    let out = RunDir::create(&common.out, common.force)?;
    let mut curve = csv::Writer::from_writer(out.create_file("curve.csv")?);
    curve.write_record(["run_lr", "step", "epoch", "lr", "loss"])?;
    let mut io_err = None;
    let mut record = |run_lr: f64, s: &StepLog| {
        let row = [
            format!("{run_lr:e}"),
            s.step.to_string(),
            s.epoch.to_string(),
            format!("{:e}", s.lr),
            format!("{:.6}", s.loss),
        ];
        if let Err(e) = curve.write_record(&row) {
            io_err.get_or_insert(e);
        }
    };
    let (model, report) = if sweep {
        let (model, sweep) = lr_sweep(&init, &train_p, &dev_p, test_p.as_ref(), f, &mut record)?;
        for r in &sweep.rows {
            eprintln!("lr {:e}: dev {:.4} test {:?}", r.lr, r.dev, r.test);
        }
        (model, json!({ "sweep": sweep }))
    } else {
        let lr = f.learning_rate;
        let (model, epochs) = run_finetune(&init, &train_p, Some(&dev_p), f, lr, &mut |s| record(lr, s))?;
        for e in &epochs {
            eprintln!("epoch {}: loss {:.4} dev f1 {:.4}", e.epoch, e.train_loss, e.dev.as_ref().map_or(0.0, |d| d.f1));
        }
        (model, json!({ "learning_rate": lr, "epochs": epochs }))
    };
    if let Some(e) = io_err {
        return Err(e.into());
    }
    curve.flush()?;
    drop(curve);
    let mut dev_scores = score(&model, &dev_p, f)?;
    dev_scores.predictions.clear();
    let test_scores = test_p.as_ref().map(|t| score(&model, t, f)).transpose()?.map(|mut s| {
        s.predictions.clear();
        s
    });
    out.write_json(
        "report.json",
        &json!({ "task": task, "training": report, "dev": dev_scores, "test": test_scores }),
    )?;
    model.checkpoint(0).save(&out.path("model"))?;
    out.finish("finetune", &cfg, seed)
}

pub fn evaluate(common: &Common, model_dir: &Path, vocab: &Path, data: &Path) -> Result<PathBuf> {
    let mut cfg = load_config(common)?;
    let model = TaskModel::from_checkpoint(&Checkpoint::load(model_dir)?)?;
    let task = match model.head_kind() {
        HeadKind::Span => rtd_core::finetune::Task::Qa,
        HeadKind::Classification { classes } => {
            cfg.finetune.num_classes = classes;
            rtd_core::finetune::Task::Sa
        }
        HeadKind::Token { .. } => rtd_core::finetune::Task::Ner,
        k => bail!("{k:?} is not a task head"),
    };
    let vocab = Vocab::load(vocab)?;
    if vocab.len() != model.config().vocab_size {
        bail!(
            "model vocab_size {} does not match the vocabulary ({} entries)",
            model.config().vocab_size,
            vocab.len()
        );
    }
    cfg.discriminator = model.config().clone();
    let dataset = load_task(task, data, cfg.finetune.num_classes)?;
    let prepared = Prepared::new(&dataset, &Tokenizer::new(vocab), &cfg.finetune, false)?;
    let out = RunDir::create(&common.out, common.force)?;
    let scores = score(&model, &prepared, &cfg.finetune)?;
    eprintln!("{} examples, f1 {:.4}", scores.examples, scores.f1);
    out.write_json("report.json", &scores)?;
    out.finish("evaluate", &cfg, cfg.seed)
}

pub fn bench(common: &Common, budget: Option<u64>, seeds: Option<Vec<u64>>) -> Result<PathBuf> {
    let mut cfg = load_config(common)?;
    cfg.set_vocab_size(cfg.synthetic.vocab_size);
    if let Some(b) = budget {
        cfg.bench.budget_steps = b;
    }
    if let Some(s) = seeds {
        cfg.bench.seeds = s;
    }
    cfg.validate()?;
    let setup = BenchSetup {
        language: cfg.synthetic.clone(),
        encoder: cfg.discriminator.clone(),
        mlm_encoder: cfg.bench.mlm_encoder.clone().unwrap_or_else(|| cfg.discriminator.clone()),
        generator: cfg.generator.clone(),
        pretrain: cfg.pretrain.clone(),
        probe: cfg.bench.probe.clone(),
        budget_steps: cfg.bench.budget_steps,
        probe_every: cfg.bench.probe_every,
        seeds: cfg.bench.seeds.clone(),
    };
    let out = RunDir::create(&common.out, common.force)?;
    let mut csv = std::io::BufWriter::new(out.create_file("bench.csv")?);
    writeln!(csv, "{BENCH_HEADER}")?;
    let mut io_err = None;
    let rows = bench_efficiency(&setup, |r| {
        eprintln!("seed {} step {:>5}: mlm {:.3} rtd {:.3}", r.seed, r.step, r.mlm_probe_acc, r.rtd_probe_acc);
        if let Err(e) = writeln!(csv, "{},{},{:.6},{:.6}", r.seed, r.step, r.mlm_probe_acc, r.rtd_probe_acc) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    csv.flush()?;
    drop(csv);
    let (wins, total) = rtd_wins(&rows);
    eprintln!("RTD probe >= MLM probe on {wins} of {total} seeds");
    out.write_json(
        "summary.json",
        &json!({ "rtd_wins": wins, "seeds": total, "budget_steps": cfg.bench.budget_steps, "rows": rows }),
    )?;
    out.finish("bench-efficiency", &cfg, cfg.seed)
}
