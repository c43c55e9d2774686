use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = "\
[model]
hidden = 8
grid = 2
conv_channels = [2, 2, 2, 2]

[train]
epochs = 3
batch_size = 4
negatives = 3
pretrain_epochs = 1
";

fn sticker(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sticker"))
        .args(args)
        .env_remove("STICKER_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = sticker(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(&[
            "synth", "--out", s(&data), "--pairs", "8", "--test-pairs", "4", "--classes", "4", "--sets", "2",
            "--negatives", "3", "--vocab-size", "40",
        ]);
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Fixture { dir, data, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let run = self.path(out);
        let train = self.data.join("train.jsonl");
        let mut args = vec!["train", "--corpus", s(&train), "--out", s(&run), "--config", s(&self.config)];
        args.extend_from_slice(extra);
        ok(&args);
        run
    }
}

#[test]
fn synth_without_out_is_a_usage_error() {
    let out = sticker(&["synth"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_defaults_to_the_data_dir_variable() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sticker"))
        .args(["synth", "--pairs", "3", "--test-pairs", "0"])
        .env("STICKER_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("train.jsonl").exists());
    assert!(!dir.path().join("test.jsonl").exists());
    assert_eq!(json(&dir.path().join("manifest.json"))["command"], "synth");
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", s(d), "--pairs", "5", "--test-pairs", "2", "--seed", "3"]);
    }
    for f in ["train.jsonl", "test.jsonl", "manifest.json", "stickers/set00_c00.png"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    ok(&["synth", "--out", s(&c), "--pairs", "5", "--test-pairs", "2", "--seed", "4"]);
    assert_ne!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(c.join("train.jsonl")).unwrap());
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let f = Fixture::new();
    let run = f.train("run", &["--epochs", "1", "--lr", "0.001"]);
    let m = json(&run.join("manifest.json"));
    assert_eq!(m["train"]["epochs"], 1);
    assert_eq!(m["train"]["lr"], 0.001);
    assert_eq!(m["train"]["batch_size"], 4);
    assert_eq!(m["train"]["margin"], 0.3);
    assert_eq!(m["model"]["hidden"], 8);
    assert_eq!(m["model"]["emoji_classes"], 4);
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let record: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "loss_r", "loss_s", "train_r1", "wall_secs"] {
        assert!(record.get(key).is_some(), "{key}");
    }
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let f = Fixture::new();
    let bad = f.path("bad.toml");
    fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let out = sticker(&[
        "train", "--corpus", s(&f.data.join("train.jsonl")), "--out", s(&f.path("run")), "--config", s(&bad),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn invalid_hyperparameter_is_a_usage_error() {
    let f = Fixture::new();
    let out = sticker(&[
        "train", "--corpus", s(&f.data.join("train.jsonl")), "--out", s(&f.path("run")), "--config",
        s(&f.config), "--batch-size", "0",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn malformed_record_names_its_line() {
    let f = Fixture::new();
    let corpus = f.data.join("train.jsonl");
    let mut text = fs::read_to_string(&corpus).unwrap();
    text.push_str("{\"id\": \"broken\"\n");
    fs::write(&corpus, text).unwrap();
    let out = sticker(&["train", "--corpus", s(&corpus), "--out", s(&f.path("run")), "--config", s(&f.config)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 9"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_image_is_a_data_error() {
    let f = Fixture::new();
    fs::remove_file(f.data.join("stickers/set00_c00.png")).unwrap();
    let out = sticker(&[
        "train", "--corpus", s(&f.data.join("train.jsonl")), "--out", s(&f.path("run")), "--config", s(&f.config),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("set00_c00.png"));
}

#[test]
fn wrong_candidate_count_is_a_data_error() {
    let f = Fixture::new();
    let out = sticker(&[
        "train", "--corpus", s(&f.data.join("train.jsonl")), "--out", s(&f.path("run")), "--config", s(&f.config),
        "--negatives", "9",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_writes_report_sweep_and_buckets() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let out_dir = f.path("eval");
    let out = ok(&[
        "eval", "--checkpoint", s(&run.join("model.ckpt")), "--corpus", s(&f.data.join("test.jsonl")), "--out",
        s(&out_dir), "--sweep", "1,3", "--similarity-report",
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("MAP") && text.contains("R@1"), "{text}");
    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["metrics"]["contexts"], 4);
    assert_eq!(report["results"].as_array().unwrap().len(), 4);
    assert_eq!(report["sweep"].as_array().unwrap().len(), 2);
    let buckets = report["similarity"]["buckets"].as_array().unwrap();
    let counted: usize = buckets.iter().map(|b| b["context_ids"].as_array().unwrap().len()).sum();
    assert_eq!((buckets.len(), counted), (5, 4));
    assert_eq!(json(&out_dir.join("manifest.json"))["command"], "eval");
}

#[test]
fn sweep_beyond_the_model_limit_is_a_usage_error() {
    let f = Fixture::new();
    let run = f.train("run", &["--max-utterances", "4"]);
    let out = sticker(&[
        "eval", "--checkpoint", s(&run.join("model.ckpt")), "--corpus", s(&f.data.join("test.jsonl")), "--out",
        s(&f.path("eval")), "--sweep", "5",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let f = Fixture::new();
    let bogus = f.path("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = sticker(&[
        "eval", "--checkpoint", s(&bogus), "--corpus", s(&f.data.join("test.jsonl")), "--out", s(&f.path("eval")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn rank_orders_candidates_by_score() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let out_dir = f.path("rank");
    ok(&[
        "rank", "--checkpoint", s(&run.join("model.ckpt")), "--corpus", s(&f.data.join("test.jsonl")), "--out",
        s(&out_dir), "--context", "ctx-000008",
    ]);
    let ranking = json(&out_dir.join("ranking.json"));
    let rows = ranking.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r["positive"] == true).count(), 1);
    let scores: Vec<f64> = rows.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn unknown_context_is_a_data_error() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let out = sticker(&[
        "rank", "--checkpoint", s(&run.join("model.ckpt")), "--corpus", s(&f.data.join("test.jsonl")), "--out",
        s(&f.path("rank")), "--context", "nope",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn attention_dump_aligns_tokens_and_cells() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let out_dir = f.path("att");
    ok(&[
        "attention", "--checkpoint", s(&run.join("model.ckpt")), "--corpus", s(&f.data.join("test.jsonl")),
        "--out", s(&out_dir), "--context", "ctx-000009", "--candidate", "1",
    ]);
    let dump = json(&out_dir.join("attention.json"));
    assert_eq!(dump["candidate"], 1);
    assert_eq!(dump["grid"], 2);
    let utts = dump["utterances"].as_array().unwrap();
    assert!(!utts.is_empty());
    for u in utts {
        assert_eq!(u["tokens"].as_array().unwrap().len(), 30);
        let cells = u["cells"].as_array().unwrap();
        assert_eq!(cells.len(), 2);
        assert!(cells.iter().all(|r| r.as_array().unwrap().len() == 2));
    }
    let salient: usize = utts
        .iter()
        .map(|u| u["tokens"].as_array().unwrap().iter().filter(|t| t["salient"] == true).count())
        .sum();
    assert_eq!(salient, 1);
}

#[test]
fn attention_without_interaction_network_is_a_usage_error() {
    let f = Fixture::new();
    let run = f.train("run", &["--no-din"]);
    let out = sticker(&[
        "attention", "--checkpoint", s(&run.join("model.ckpt")), "--corpus", s(&f.data.join("test.jsonl")),
        "--out", s(&f.path("att")), "--context", "ctx-000008",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn corpus_with_unknown_emoji_tag_is_rejected_at_eval() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let other = f.path("other");
    ok(&["synth", "--out", s(&other), "--pairs", "2", "--test-pairs", "0", "--classes", "10"]);
    let out = sticker(&[
        "eval", "--checkpoint", s(&run.join("model.ckpt")), "--corpus", s(&other.join("train.jsonl")), "--out",
        s(&f.path("eval")),
    ]);
    assert_eq!(code(&out), 3);
}
