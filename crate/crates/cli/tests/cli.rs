use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn rtd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtd")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The toy preset shrunk to a few steps, with `patch` merged on top.
fn config(dir: &Path, patch: Value) -> PathBuf {
    let toy = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let mut c: Value = serde_json::from_str(&fs::read_to_string(toy).unwrap()).unwrap();
    merge(
        &mut c,
        json!({
            "pretrain": {"steps": 6, "warmup_steps": 2, "batch_size": 8, "log_every": 1},
            "synthetic": {"num_sequences": 40},
            "bench": {"probe_every": 2, "probe": {"train_examples": 16, "test_examples": 16, "epochs": 5}},
            "finetune": {"batch_size": 4, "epochs": 2}
        }),
    );
    merge(&mut c, patch);
    let p = dir.join(format!("config-{}.json", fs::read_dir(dir).unwrap().count()));
    fs::write(&p, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    p
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn leftovers(dir: &Path) -> Vec<String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains(".lock") || n.contains(".staging"))
        .collect()
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let out = rtd(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_config_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({"pretrain": {"warmup_stpes": 3}}));
    let run = dir.path().join("run");
    let out = rtd(&["pretrain", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pretrain") && err.contains("warmup_stpes"), "{err}");
    assert!(!run.exists());

    let cfg = config(dir.path(), json!({"pretrain": {"warmup_steps": 60}}));
    let out = rtd(&["pretrain", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pretrain") && err.contains("warmup"), "{err}");
    assert!(!run.exists() && leftovers(dir.path()).is_empty());
}

#[test]
fn pretrain_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({}));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&rtd(&["pretrain", "--config", s(&cfg), "--seed", "4", "--out", s(&a)]));
    ok(&rtd(&["pretrain", "--config", s(&cfg), "--seed", "4", "--out", s(&b)]));
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(csv.lines().count(), 7);
    assert!(a.join("checkpoint").is_dir() && a.join("heldout.json").is_file());

    let run: Value = serde_json::from_str(&fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "pretrain");
    assert_eq!(run["seed"], 4);
    assert_eq!(run["config"]["pretrain"]["seed"], 4);
    assert!(run["build"].as_str().unwrap().contains('+'));
    assert!(run["wall_time_secs"].as_f64().unwrap() >= 0.0);
    assert!(run["artifacts"].as_array().unwrap().contains(&json!("metrics.csv")));

    // same output again needs --force
    let again = rtd(&["pretrain", "--config", s(&cfg), "--seed", "4", "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(1));
    ok(&rtd(&["pretrain", "--config", s(&cfg), "--seed", "4", "--out", s(&a), "--force"]));

    // stop at 3, then resume: rows 4..6 match the uninterrupted run
    let (half, rest) = (dir.path().join("half"), dir.path().join("rest"));
    ok(&rtd(&["pretrain", "--config", s(&cfg), "--seed", "4", "--stop-at", "3", "--out", s(&half)]));
    let ckpt = half.join("checkpoint");
    ok(&rtd(&["pretrain", "--config", s(&cfg), "--resume", s(&ckpt), "--out", s(&rest)]));
    let resumed = fs::read_to_string(rest.join("metrics.csv")).unwrap();
    let tail: Vec<&str> = csv.lines().skip(4).collect();
    assert_eq!(resumed.lines().skip(1).collect::<Vec<_>>(), tail);
    assert!(leftovers(dir.path()).is_empty());
}

#[test]
fn failed_run_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    // the MLM baseline must match the discriminator; the bench fails mid-run
    let cfg = config(dir.path(), json!({}));
    let mut c: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    let mut other = c["discriminator"].clone();
    other["num_layers"] = json!(1);
    c["bench"]["mlm_encoder"] = other;
    fs::write(&cfg, c.to_string()).unwrap();
    let out_dir = dir.path().join("bench");
    let out = rtd(&["bench-efficiency", "--config", s(&cfg), "--budget", "2", "--seeds", "0", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_layers"));
    assert!(!out_dir.exists());
    assert!(leftovers(dir.path()).is_empty(), "{:?}", leftovers(dir.path()));
}

#[test]
fn a_held_lock_blocks_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("run");
    fs::write(dir.path().join("run.lock"), "1").unwrap();
    let out = rtd(&["synth", "--out", s(&target)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    assert!(!target.exists());
}

#[test]
fn bench_writes_paired_columns_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({}));
    let out_dir = dir.path().join("bench");
    ok(&rtd(&["bench-efficiency", "--config", s(&cfg), "--budget", "3", "--seeds", "0,1", "--out", s(&out_dir)]));
    let csv = fs::read_to_string(out_dir.join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,step,mlm_probe_acc,rtd_probe_acc");
    // steps 0, 2 and the budget, for each seed
    let keys: Vec<String> = lines[1..].iter().map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(keys, ["0,0", "0,2", "0,3", "1,0", "1,2", "1,3"]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], 2);
}

fn write_corpus(dir: &Path) -> PathBuf {
    let p = dir.join("corpus.txt");
    let docs = [
        "ذهب الطالب إلى المكتبة في الصباح وقرأ كتابا عن تاريخ المدينة",
        "the old library stood near the harbour",
        "ahmed visited cairo and met mona at the university",
        "الفيلم كان رائعا جدا والممثلون ممتازون",
        "الخدمة سيئة والطعام بارد",
    ];
    fs::write(&p, docs.join("\n\n")).unwrap();
    p
}

#[test]
fn synth_and_vocabulary_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({}));
    let syn = dir.path().join("syn");
    ok(&rtd(&["synth", "--config", s(&cfg), "--out", s(&syn)]));
    let train = fs::read_to_string(syn.join("train.txt")).unwrap();
    assert_eq!(train.split("\n\n").filter(|d| !d.trim().is_empty()).count(), 38);
    assert!(syn.join("heldout.txt").is_file());

    let voc = dir.path().join("voc");
    let corpus = write_corpus(dir.path());
    ok(&rtd(&["tokenize-train", "--corpus", s(&corpus), "--vocab-size", "120", "--min-frequency", "1", "--out", s(&voc)]));
    let vocab = fs::read_to_string(voc.join("vocab.txt")).unwrap();
    let lines: Vec<&str> = vocab.lines().collect();
    assert_eq!(&lines[..5], ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]);
    assert!(lines.len() <= 120);
}

#[test]
fn finetune_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({}));
    let voc = dir.path().join("voc");
    let corpus = write_corpus(dir.path());
    ok(&rtd(&["tokenize-train", "--corpus", s(&corpus), "--vocab-size", "200", "--min-frequency", "1", "--out", s(&voc)]));
    let vocab = voc.join("vocab.txt");

    let tsv = dir.path().join("sa.tsv");
    let rows = [
        ("الفيلم كان رائعا جدا", "positive"),
        ("الخدمة سيئة والطعام بارد", "negative"),
        ("ذهب الطالب إلى المكتبة", "neutral"),
        ("the old library", "neutral"),
    ];
    let mut text = String::from("# labels: very_negative,negative,neutral,positive,very_positive\ntext\tlabel\n");
    for (t, l) in rows {
        text.push_str(&format!("{t}\t{l}\n"));
    }
    fs::write(&tsv, text).unwrap();

    let ft = dir.path().join("ft");
    ok(&rtd(&[
        "finetune", "--config", s(&cfg), "--task", "sa", "--vocab", s(&vocab), "--train", s(&tsv), "--dev", s(&tsv),
        "--test", s(&tsv), "--lr-sweep", "--out", s(&ft),
    ]));
    let report: Value = serde_json::from_str(&fs::read_to_string(ft.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["training"]["sweep"]["rows"].as_array().unwrap().len(), 3);
    assert!(report["test"]["metrics"]["macro_f1"].is_number());
    let curve = fs::read_to_string(ft.join("curve.csv")).unwrap();
    // 3 learning rates x 2 epochs x 1 batch
    assert_eq!(curve.lines().count(), 1 + 6);

    let ev = dir.path().join("ev");
    ok(&rtd(&["evaluate", "--model", s(&ft.join("model")), "--vocab", s(&vocab), "--data", s(&tsv), "--out", s(&ev)]));
    let scores: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(scores["examples"], 4);
    assert_eq!(scores["metrics"]["macro_f1"], report["test"]["metrics"]["macro_f1"]);

    // a model trained on another vocabulary is refused
    let small = dir.path().join("small");
    ok(&rtd(&["tokenize-train", "--corpus", s(&corpus), "--vocab-size", "80", "--min-frequency", "1", "--out", s(&small)]));
    let bad = rtd(&[
        "evaluate", "--model", s(&ft.join("model")), "--vocab", s(&small.join("vocab.txt")), "--data", s(&tsv),
        "--out", s(&dir.path().join("bad")),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn finetune_from_a_pretraining_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({}));
    let pre = dir.path().join("pre");
    ok(&rtd(&["pretrain", "--config", s(&cfg), "--steps", "2", "--out", s(&pre)]));
    let syn = dir.path().join("syn");
    ok(&rtd(&["synth", "--config", s(&cfg), "--out", s(&syn)]));
    // NER sentences made of synthetic words
    let train = fs::read_to_string(syn.join("train.txt")).unwrap();
    let mut conll = String::new();
    for doc in train.split("\n\n").filter(|d| !d.trim().is_empty()) {
        for (i, w) in doc.split_whitespace().take(10).enumerate() {
            let tag = ["B-PER", "I-PER", "O", "B-LOC", "O"][i % 5];
            conll.push_str(&format!("{w} {tag}\n"));
        }
        conll.push('\n');
    }
    let ner = dir.path().join("ner.txt");
    fs::write(&ner, conll).unwrap();
    let ft = dir.path().join("ft");
    ok(&rtd(&[
        "finetune", "--config", s(&cfg), "--task", "ner", "--ckpt", s(&pre.join("checkpoint")), "--vocab",
        s(&pre.join("vocab.txt")), "--train", s(&ner), "--out", s(&ft),
    ]));
    let report: Value = serde_json::from_str(&fs::read_to_string(ft.join("report.json")).unwrap()).unwrap();
    assert!(report["dev"]["metrics"]["entity_f1"].is_number(), "{report}");
}
