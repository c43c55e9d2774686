//! Subcommand bodies. Every command writes `manifest.json` into its output
//! directory describing the resolved inputs and settings.

use std::env;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sticker_core::corpus::{load_corpus, synth_corpus, write_corpus, SynthManifest, SynthSpec, MAX_UTTERANCES};
use sticker_core::evaluator::{
    attention_dump, check_compatible, contexts_for, evaluate, similarity_report, summarize, sweep_utterances,
};
use sticker_core::model::{load_model, save_model};
use sticker_core::trainer::{prepare_contexts, train as run_training};
use sticker_core::{Corpus, DialogContext, EvalReport, Error, ModelMeta, ParamStore, Result, SrsModel, Vocab};

use crate::args::{AttentionArgs, ContextArgs, EvalArgs, SynthArgs, TrainArgs, DATA_DIR_ENV};
use crate::config::ConfigFile;

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REPORT: &str = "report.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn write_manifest(dir: &Path, command: &str, body: Value) -> Result<()> {
    let mut manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
    });
    if let (Some(m), Value::Object(b)) = (manifest.as_object_mut(), body) {
        m.extend(b);
    }
    write_json(&dir.join(MANIFEST), &manifest)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

/// An explicit corpus path, or `file` inside the data directory.
fn corpus_path(explicit: &Option<PathBuf>, file: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    match env::var_os(DATA_DIR_ENV) {
        Some(dir) => Ok(PathBuf::from(dir).join(file)),
        None => Err(Error::Config(format!("--corpus is required when {DATA_DIR_ENV} is unset"))),
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        vocab_size: a.vocab_size,
        classes: a.classes,
        sticker_sets: a.sets,
        pairs: a.pairs + a.test_pairs,
        negatives: a.negatives,
        seed: a.seed,
        ..Default::default()
    };
    if a.pairs == 0 {
        return Err(Error::Config("--pairs must be positive".into()));
    }
    spec.validate()?;
    prepare_out(&a.out)?;
    let corpus = synth_corpus(&spec)?;
    let (train, test) = corpus.split_at(a.pairs);
    write_corpus(&a.out.join("train.jsonl"), &train)?;
    let mut files = vec!["train.jsonl"];
    if a.test_pairs > 0 {
        write_corpus(&a.out.join("test.jsonl"), &test)?;
        files.push("test.jsonl");
    }
    write_manifest(
        &a.out,
        "synth",
        json!({
            "train_pairs": a.pairs,
            "test_pairs": a.test_pairs,
            "files": files,
            "synth": SynthManifest::new(&spec),
        }),
    )?;
    println!(
        "wrote {} training and {} held-out contexts over {} stickers to {}",
        a.pairs,
        a.test_pairs,
        spec.sticker_count(),
        a.out.display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let resolved = file.with_flags(a);
    resolved.train.validate()?;
    let corpus_file = corpus_path(&a.corpus, "train.jsonl")?;
    let corpus = load_corpus(&corpus_file, resolved.train.max_utterances)?;
    let vocab = Vocab::build(&corpus.dialogs);
    let model_config = resolved.model_config(&corpus, vocab.len());
    let (model, mut store) = SrsModel::new(model_config.clone())?;
    let contexts = prepare_contexts(&corpus, &vocab, resolved.train.t_x, resolved.train.max_utterances);

    prepare_out(&a.out)?;
    let log_path = a.out.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let epochs = resolved.train.epochs;
    let records = run_training(&model, &mut store, &resolved.train, &contexts, &corpus.stickers, |r, _| {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
        log.flush()?;
        eprintln!(
            "epoch {:>4}/{epochs}  loss_r {:.5}  loss_s {:.5}  train R@1 {:.3}  {:.1}s",
            r.epoch, r.loss_r, r.loss_s, r.train_r1, r.wall_secs
        );
        Ok(())
    })?;

    let checkpoint = a.out.join(CHECKPOINT);
    let meta = ModelMeta {
        config: model_config.clone(),
        vocab: vocab.words().to_vec(),
        extra: json!({ "train": resolved.train }),
    };
    save_model(&checkpoint, &store, &meta)?;
    write_manifest(
        &a.out,
        "train",
        json!({
            "corpus": corpus_file,
            "config_file": a.config,
            "contexts": contexts.len(),
            "stickers": corpus.stickers.len(),
            "parameters": store.num_scalars(),
            "model": model_config,
            "train": resolved.train,
            "checkpoint": CHECKPOINT,
            "log": TRAIN_LOG,
            "final": records.last(),
        }),
    )?;
    println!("saved {}", checkpoint.display());
    Ok(())
}

struct Loaded {
    model: SrsModel,
    store: ParamStore,
    vocab: Vocab,
    corpus: Corpus,
    corpus_file: PathBuf,
}

fn load(checkpoint: &Path, corpus: &Option<PathBuf>) -> Result<Loaded> {
    let (model, store, vocab, _) = load_model(checkpoint)?;
    let corpus_file = corpus_path(corpus, "test.jsonl")?;
    let corpus = load_corpus(&corpus_file, MAX_UTTERANCES)?;
    check_compatible(&model, &corpus)?;
    Ok(Loaded { model, store, vocab, corpus, corpus_file })
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let l = load(&a.checkpoint, &a.corpus)?;
    prepare_out(&a.out)?;
    let max = l.model.config().max_utterances;
    let bank = l.model.sticker_bank(&l.store, &l.corpus.stickers)?;
    let contexts = contexts_for(&l.model, &l.corpus, &l.vocab, max);
    let results = evaluate(&l.model, &l.store, &contexts, &bank)?;
    let metrics = summarize(&results)?;
    let sweep = match &a.sweep {
        Some(n) => Some(sweep_utterances(&l.model, &l.store, &l.corpus, &l.vocab, &bank, n)?),
        None => None,
    };
    let similarity = if a.similarity_report { Some(similarity_report(&l.corpus, &results)?) } else { None };
    let report = EvalReport { metrics, results, sweep, similarity };
    write_json(&a.out.join(REPORT), &report)?;
    write_manifest(
        &a.out,
        "eval",
        json!({
            "checkpoint": a.checkpoint,
            "corpus": l.corpus_file,
            "sweep": a.sweep,
            "similarity_report": a.similarity_report,
            "report": REPORT,
        }),
    )?;
    print!("{}", report.render());
    Ok(())
}

fn find_context(l: &Loaded, id: &str) -> Result<DialogContext> {
    let dialog = l
        .corpus
        .find(id)
        .ok_or_else(|| Error::Corpus(format!("no context with id {id}")))?;
    let c = l.model.config();
    Ok(l.vocab.encode(&dialog.truncated(c.max_utterances), c.t_x))
}

#[derive(Serialize)]
struct RankedCandidate {
    rank: usize,
    slot: usize,
    sticker: String,
    score: f64,
    positive: bool,
}

pub fn rank(a: &ContextArgs) -> Result<()> {
    let l = load(&a.checkpoint, &a.corpus)?;
    let ctx = find_context(&l, &a.context)?;
    prepare_out(&a.out)?;
    let bank = l.model.sticker_bank(&l.store, &l.corpus.stickers)?;
    let scores = l.model.score_context(&l.store, &ctx, &bank)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let ranked: Vec<RankedCandidate> = order
        .iter()
        .enumerate()
        .map(|(r, &slot)| RankedCandidate {
            rank: r + 1,
            slot,
            sticker: l.corpus.stickers[ctx.candidates[slot]].name.clone(),
            score: scores[slot],
            positive: slot == ctx.positive_index,
        })
        .collect();
    write_json(&a.out.join("ranking.json"), &ranked)?;
    write_manifest(
        &a.out,
        "rank",
        json!({ "checkpoint": a.checkpoint, "corpus": l.corpus_file, "context": a.context }),
    )?;
    for c in &ranked {
        let mark = if c.positive { "*" } else { " " };
        println!("{:>3} {mark} {:.6}  {}", c.rank, c.score, c.sticker);
    }
    Ok(())
}

pub fn attention(a: &AttentionArgs) -> Result<()> {
    let t = &a.target;
    let l = load(&t.checkpoint, &t.corpus)?;
    let ctx = find_context(&l, &t.context)?;
    prepare_out(&t.out)?;
    let candidate = a.candidate.unwrap_or(ctx.positive_index);
    let bank = l.model.sticker_bank(&l.store, &l.corpus.stickers)?;
    let dump = attention_dump(&l.model, &l.store, &ctx, &l.vocab, &l.corpus.stickers, &bank, candidate)?;
    write_json(&t.out.join("attention.json"), &dump)?;
    write_manifest(
        &t.out,
        "attention",
        json!({
            "checkpoint": t.checkpoint,
            "corpus": l.corpus_file,
            "context": t.context,
            "candidate": candidate,
        }),
    )?;
    println!("{} candidate {} ({}) score {:.6}", dump.context_id, dump.candidate, dump.sticker, dump.score);
    for u in &dump.utterances {
        let words: Vec<String> = u
            .tokens
            .iter()
            .filter_map(|tw| {
                tw.weight.map(|w| {
                    let mark = if tw.salient { "!" } else { "" };
                    format!("{}{mark}:{w:.3}", tw.token)
                })
            })
            .collect();
        println!("  u{}: {}", u.index, words.join(" "));
    }
    Ok(())
}
