//! Ranking objective and the mini-batch training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DialogContext, Sticker, StickerId, Vocab, MAX_UTTERANCES};
use crate::error::{Error, Result};
use crate::model::SrsModel;
use crate::numerics::{Graph, Gradients, ParamStore, Var};
use crate::sticker_encoder::{classification_loss, StickerRepr};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub lambda_cls: f64,
    pub epochs: usize,
    pub max_utterances: usize,
    pub t_x: usize,
    pub negatives: usize,
    pub seed: u64,
    /// Epochs of classification-only training of the sticker encoder before
    /// joint training. Zero trains everything from a fresh init.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-4,
            margin: 0.3,
            lambda_cls: 1.0,
            epochs: 10,
            max_utterances: MAX_UTTERANCES,
            t_x: 30,
            negatives: 9,
            seed: 7,
            pretrain_epochs: 50,
            pretrain_lr: 1e-3,
            pretrain_batch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("max_utterances", self.max_utterances),
            ("t_x", self.t_x),
            ("negatives", self.negatives),
            ("pretrain_batch_size", self.pretrain_batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
            return Err(Error::Config(format!("pretraining learning rate {} must be positive", self.pretrain_lr)));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin {} must be positive", self.margin)));
        }
        if !(self.lambda_cls >= 0.0 && self.lambda_cls.is_finite()) {
            return Err(Error::Config(format!("lambda_cls {} must be non-negative", self.lambda_cls)));
        }
        Ok(())
    }
}

/// `sum_i max(0, neg_i - pos + margin)`.
pub fn hinge_loss_value(pos: f64, negs: &[f64], margin: f64) -> f64 {
    negs.iter().map(|n| (n - pos + margin).max(0.0)).sum()
}

/// Graph form of [`hinge_loss_value`]; `pos` and each negative are `1 x 1`.
pub fn hinge_loss(g: &mut Graph, pos: Var, negs: &[Var], margin: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &n in negs {
        let gap = g.sub(n, pos)?;
        let shifted = g.add_scalar(gap, margin);
        let term = g.relu(shifted);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(crate::numerics::Tensor::scalar(0.0)),
    })
}

/// `L_r + lambda * L_s`; without a classification loss this is `L_r`.
pub fn total_loss(g: &mut Graph, l_r: Var, l_s: Option<Var>, lambda: f64) -> Result<Var> {
    match l_s {
        Some(l_s) if lambda != 0.0 => {
            let weighted = g.scale(l_s, lambda);
            g.add(l_r, weighted)
        }
        _ => Ok(l_r),
    }
}

/// Tokenize, pad and truncate every dialog of `corpus`.
pub fn prepare_contexts(corpus: &Corpus, vocab: &Vocab, t_x: usize, max_utterances: usize) -> Vec<DialogContext> {
    corpus
        .dialogs
        .iter()
        .map(|d| vocab.encode(&d.truncated(max_utterances), t_x))
        .collect()
}

/// One batch's loss graph plus the statistics read off its forward pass.
pub struct BatchGraph {
    pub graph: Graph,
    pub loss: Var,
    /// Sum over contexts of `L_r`.
    pub ranking_sum: f64,
    /// Sum over contexts of `L_s` (zero without the head).
    pub classify_sum: f64,
    /// Contexts whose positive outscored every negative.
    pub hits: usize,
}

/// Build the mean batch loss over `batch` in `graph`. Every distinct sticker
/// is encoded once and shared by all candidate slots that use it.
pub fn batch_loss(
    model: &SrsModel,
    store: &ParamStore,
    batch: &[&DialogContext],
    stickers: &[Sticker],
    config: &TrainConfig,
    mut graph: Graph,
) -> Result<BatchGraph> {
    if batch.is_empty() {
        return Err(Error::Corpus("empty batch".into()));
    }
    let g = &mut graph;
    let mut reprs: BTreeMap<StickerId, (StickerRepr, Option<Var>)> = BTreeMap::new();
    for ctx in batch {
        for &c in &ctx.candidates {
            if reprs.contains_key(&c) {
                continue;
            }
            let sticker = stickers
                .get(c)
                .ok_or_else(|| Error::Corpus(format!("context {} references unknown sticker {c}", ctx.id)))?;
            let repr = model.encode_sticker(g, store, sticker)?;
            let ce = match model.emoji_logits(g, store, repr.flat)? {
                Some(logits) => Some(classification_loss(g, logits, sticker.emoji)?),
                None => None,
            };
            reprs.insert(c, (repr, ce));
        }
    }
    let mut per_context = Vec::with_capacity(batch.len());
    let (mut ranking_sum, mut classify_sum, mut hits) = (0.0, 0.0, 0);
    for ctx in batch {
        let utterances = model.encode_utterances(g, store, ctx)?;
        let mut scores = Vec::with_capacity(ctx.candidates.len());
        let mut ces = Vec::new();
        for &c in &ctx.candidates {
            let (repr, ce) = reprs[&c];
            scores.push(model.score_candidate(g, store, &utterances, &repr)?.score());
            ces.extend(ce);
        }
        let pos = scores[ctx.positive_index];
        let negs: Vec<Var> = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ctx.positive_index)
            .map(|(_, v)| *v)
            .collect();
        let pos_value = g.value(pos).item();
        if negs.iter().all(|n| g.value(*n).item() < pos_value) {
            hits += 1;
        }
        let l_r = hinge_loss(g, pos, &negs, config.margin)?;
        ranking_sum += g.value(l_r).item();
        let l_s = if ces.is_empty() {
            None
        } else {
            let mut sum = ces[0];
            for &c in &ces[1..] {
                sum = g.add(sum, c)?;
            }
            let mean = g.scale(sum, 1.0 / ces.len() as f64);
            classify_sum += g.value(mean).item();
            Some(mean)
        };
        per_context.push(total_loss(g, l_r, l_s, config.lambda_cls)?);
    }
    let mut sum = per_context[0];
    for &l in &per_context[1..] {
        sum = g.add(sum, l)?;
    }
    let loss = g.scale(sum, 1.0 / batch.len() as f64);
    Ok(BatchGraph { graph, loss, ranking_sum, classify_sum, hits })
}

/// Metrics of one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean hinge loss per context.
    pub loss_r: f64,
    /// Mean classification loss per context.
    pub loss_s: f64,
    /// Fraction of contexts whose positive ranked first in its own
    /// training-mode forward pass.
    pub train_r1: f64,
    pub steps: u64,
    pub wall_secs: f64,
}

impl EpochRecord {
    /// The record without its timing, which is the reproducible part.
    pub fn losses(&self) -> (usize, f64, f64, f64, u64) {
        (self.epoch, self.loss_r, self.loss_s, self.train_r1, self.steps)
    }
}

fn check_contexts(contexts: &[DialogContext], config: &TrainConfig) -> Result<()> {
    if contexts.is_empty() {
        return Err(Error::Corpus("no training contexts".into()));
    }
    for ctx in contexts {
        ctx.validate(config.max_utterances)?;
        if ctx.candidates.len() != config.negatives + 1 {
            return Err(Error::Corpus(format!(
                "context {} has {} candidates, expected {} negatives plus the positive",
                ctx.id,
                ctx.candidates.len(),
                config.negatives
            )));
        }
    }
    Ok(())
}

/// Train `store` in place. `on_epoch` sees every record and the parameters
/// after that epoch; an error from it stops training.
pub fn train(
    model: &SrsModel,
    store: &mut ParamStore,
    config: &TrainConfig,
    contexts: &[DialogContext],
    stickers: &[Sticker],
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    check_contexts(contexts, config)?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    if config.pretrain_epochs > 0 {
        pretrain_classifier(model, store, stickers, config, &mut master)?;
    }
    let mut order: Vec<usize> = (0..contexts.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut master);
        let (mut ranking, mut classify, mut hits) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&DialogContext> = chunk.iter().map(|&i| &contexts[i]).collect();
            let graph = Graph::training(ChaCha8Rng::seed_from_u64(master.random()));
            let out = batch_loss(model, store, &batch, stickers, config, graph)?;
            let value = out.graph.value(out.loss).item();
            if !value.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|c| c.id.as_str()).collect();
                return Err(Error::TrainingFault(format!(
                    "loss {value} in epoch {epoch} batch {b} (contexts {})",
                    ids.join(", ")
                )));
            }
            let grads = out.graph.backward(out.loss)?;
            store.adam_step(&grads, config.lr).map_err(|e| match e {
                Error::TrainingFault(m) => Error::TrainingFault(format!("epoch {epoch} batch {b}: {m}")),
                other => other,
            })?;
            ranking += out.ranking_sum;
            classify += out.classify_sum;
            hits += out.hits;
        }
        let n = contexts.len() as f64;
        let record = EpochRecord {
            epoch,
            loss_r: ranking / n,
            loss_s: classify / n,
            train_r1: hits as f64 / n,
            steps: store.step(),
            wall_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, store)?;
        log.push(record);
    }
    Ok(log)
}

/// Classification-only training of the sticker encoder and emoji head.
/// Returns eval-mode accuracy after each epoch.
pub fn pretrain_classifier(
    model: &SrsModel,
    store: &mut ParamStore,
    stickers: &[Sticker],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if model.emoji_head().is_none() {
        return Err(Error::Config("pretraining needs the emoji classification head".into()));
    }
    if stickers.is_empty() {
        return Err(Error::Corpus("no stickers to pretrain on".into()));
    }
    let mut order: Vec<usize> = (0..stickers.len()).collect();
    let mut accuracy = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 1..=config.pretrain_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.pretrain_batch_size) {
            let mut g = Graph::training(ChaCha8Rng::seed_from_u64(rng.random()));
            let mut total: Option<Var> = None;
            for &i in chunk {
                let repr = model.encode_sticker(&mut g, store, &stickers[i])?;
                let logits = model.emoji_logits(&mut g, store, repr.flat)?.expect("head present");
                let ce = classification_loss(&mut g, logits, stickers[i].emoji)?;
                total = Some(match total {
                    Some(t) => g.add(t, ce)?,
                    None => ce,
                });
            }
            let loss = g.scale(total.expect("non-empty chunk"), 1.0 / chunk.len() as f64);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::TrainingFault(format!("pretraining loss {value} in epoch {epoch}")));
            }
            let grads: Gradients = g.backward(loss)?;
            store.adam_step(&grads, config.pretrain_lr)?;
        }
        accuracy.push(classification_accuracy(model, store, stickers)?);
    }
    Ok(accuracy)
}

/// Eval-mode fraction of stickers whose emoji tag is the argmax logit.
pub fn classification_accuracy(model: &SrsModel, store: &ParamStore, stickers: &[Sticker]) -> Result<f64> {
    if stickers.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for s in stickers {
        let mut g = Graph::new();
        let repr = model.encode_sticker(&mut g, store, s)?;
        let Some(logits) = model.emoji_logits(&mut g, store, repr.flat)? else {
            return Err(Error::Config("model has no emoji classification head".into()));
        };
        let row = g.value(logits).data();
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        correct += usize::from(best == s.emoji);
    }
    Ok(correct as f64 / stickers.len() as f64)
}
