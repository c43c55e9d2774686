//! Ranking metrics, candidate-set similarity, utterance-count sweeps and
//! attention dumps.

pub mod metrics;
pub mod ssim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DialogContext, Sticker, StickerId, Vocab, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{SrsModel, UtteranceMatch};
use crate::numerics::{Graph, ParamStore};
use crate::sticker_encoder::StickerTensors;

pub use metrics::{map_score, rank_of, recall_at_k, summarize, Metrics, RankingResult};
pub use ssim::{ssim, ssim_plane, SSIM_C1, SSIM_C2, SSIM_WINDOW};

pub const SIMILARITY_BUCKETS: usize = 5;

/// Score every context in eval mode.
pub fn evaluate(
    model: &SrsModel,
    store: &ParamStore,
    contexts: &[DialogContext],
    bank: &[StickerTensors],
) -> Result<Vec<RankingResult>> {
    contexts
        .iter()
        .map(|ctx| {
            let scores = model.score_context(store, ctx, bank)?;
            RankingResult::new(ctx.id.clone(), scores, ctx.positive_index)
        })
        .collect()
}

/// Tokenize `corpus` for `model`, keeping the most recent `n` utterances.
pub fn contexts_for(model: &SrsModel, corpus: &Corpus, vocab: &Vocab, n: usize) -> Vec<DialogContext> {
    let config = model.config();
    corpus
        .dialogs
        .iter()
        .map(|d| vocab.encode(&d.truncated(n.min(config.max_utterances)), config.t_x))
        .collect()
}

/// Check that a corpus can be scored by `model` at all.
pub fn check_compatible(model: &SrsModel, corpus: &Corpus) -> Result<()> {
    let classes = model.config().emoji_classes;
    if let Some(s) = corpus.stickers.iter().find(|s| s.emoji >= classes) {
        return Err(Error::Corpus(format!(
            "sticker {} has emoji tag {} but the model knows {classes} tags",
            s.name, s.emoji
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub utterances: usize,
    pub metrics: Metrics,
}

/// Re-evaluate with each context cut to its last `n` utterances, for each `n`.
pub fn sweep_utterances(
    model: &SrsModel,
    store: &ParamStore,
    corpus: &Corpus,
    vocab: &Vocab,
    bank: &[StickerTensors],
    n_list: &[usize],
) -> Result<Vec<SweepRow>> {
    let limit = model.config().max_utterances;
    n_list
        .iter()
        .map(|&n| {
            if n == 0 || n > limit {
                return Err(Error::Config(format!("sweep length {n} outside 1..={limit}")));
            }
            let contexts = contexts_for(model, corpus, vocab, n);
            let results = evaluate(model, store, &contexts, bank)?;
            Ok(SweepRow { utterances: n, metrics: summarize(&results)? })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBucket {
    pub lower: f64,
    pub upper: f64,
    pub context_ids: Vec<String>,
    /// `None` for an empty bucket.
    pub recall_at_1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Mean SSIM between each context's positive and its negatives.
    pub per_context: Vec<(String, f64)>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub buckets: Vec<SimilarityBucket>,
}

/// Pairwise SSIM with memoization; pairs recur across contexts.
#[derive(Default)]
pub struct SsimCache {
    values: BTreeMap<(StickerId, StickerId), f64>,
}

impl SsimCache {
    pub fn get(&mut self, stickers: &[Sticker], a: StickerId, b: StickerId) -> Result<f64> {
        let key = (a.min(b), a.max(b));
        if let Some(v) = self.values.get(&key) {
            return Ok(*v);
        }
        let v = ssim(&stickers[key.0], &stickers[key.1])?;
        self.values.insert(key, v);
        Ok(v)
    }
}

/// Mean SSIM between the positive and every negative of one candidate set.
pub fn context_similarity(
    stickers: &[Sticker],
    candidates: &[StickerId],
    positive_index: usize,
    cache: &mut SsimCache,
) -> Result<f64> {
    let pos = candidates[positive_index];
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &c) in candidates.iter().enumerate() {
        if i != positive_index {
            sum += cache.get(stickers, pos, c)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Corpus("candidate set without negatives".into()));
    }
    Ok(sum / n as f64)
}

/// Split contexts into `buckets` equal-width similarity ranges spanning the
/// observed minimum and maximum, with per-bucket `R@1`.
pub fn bucketize(
    per_context: &[(String, f64)],
    results: &[RankingResult],
    buckets: usize,
) -> Result<Vec<SimilarityBucket>> {
    if buckets == 0 {
        return Err(Error::Config("at least one similarity bucket".into()));
    }
    let hits: BTreeMap<&str, bool> = results.iter().map(|r| (r.context_id.as_str(), r.hit(1))).collect();
    let min = per_context.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max = per_context.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (min, max) = if per_context.is_empty() { (0.0, 0.0) } else { (min, max) };
    let width = (max - min) / buckets as f64;
    let mut out: Vec<SimilarityBucket> = (0..buckets)
        .map(|b| SimilarityBucket {
            lower: min + width * b as f64,
            upper: if b + 1 == buckets { max } else { min + width * (b + 1) as f64 },
            context_ids: Vec::new(),
            recall_at_1: None,
        })
        .collect();
    for (id, s) in per_context {
        let b = if width > 0.0 { (((s - min) / width) as usize).min(buckets - 1) } else { 0 };
        out[b].context_ids.push(id.clone());
    }
    for bucket in &mut out {
        if bucket.context_ids.is_empty() {
            continue;
        }
        let mut found = 0usize;
        for id in &bucket.context_ids {
            let hit = hits
                .get(id.as_str())
                .ok_or_else(|| Error::Corpus(format!("no ranking result for context {id}")))?;
            found += usize::from(*hit);
        }
        bucket.recall_at_1 = Some(found as f64 / bucket.context_ids.len() as f64);
    }
    Ok(out)
}

pub fn similarity_report(corpus: &Corpus, results: &[RankingResult]) -> Result<SimilarityReport> {
    let mut cache = SsimCache::default();
    let per_context = corpus
        .dialogs
        .iter()
        .map(|d| Ok((d.id.clone(), context_similarity(&corpus.stickers, &d.candidates, d.positive_index, &mut cache)?)))
        .collect::<Result<Vec<_>>>()?;
    let n = per_context.len().max(1) as f64;
    let mean = per_context.iter().map(|p| p.1).sum::<f64>() / n;
    let buckets = bucketize(&per_context, results, SIMILARITY_BUCKETS)?;
    let min = buckets.first().map_or(0.0, |b| b.lower);
    let max = buckets.last().map_or(0.0, |b| b.upper);
    Ok(SimilarityReport { per_context, mean, min, max, buckets })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub results: Vec<RankingResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<SimilarityReport>,
}

impl EvalReport {
    /// Plain-text tables for terminals.
    pub fn render(&self) -> String {
        let m = &self.metrics;
        let mut out = format!(
            "contexts {}  candidates {}\nMAP {:.4}  R@1 {:.4}  R@2 {:.4}  R@5 {:.4}\n",
            m.contexts, m.candidates, m.map, m.recall_at_1, m.recall_at_2, m.recall_at_5
        );
        if let Some(rows) = &self.sweep {
            out.push_str("\nutterances      MAP      R@1      R@2      R@5\n");
            for r in rows {
                let m = &r.metrics;
                out.push_str(&format!(
                    "{:>10} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                    r.utterances, m.map, m.recall_at_1, m.recall_at_2, m.recall_at_5
                ));
            }
        }
        if let Some(s) = &self.similarity {
            out.push_str(&format!("\nmean candidate SSIM {:.4} (min {:.4}, max {:.4})\n", s.mean, s.min, s.max));
            out.push_str("      range          contexts      R@1\n");
            for b in &s.buckets {
                let r1 = b.recall_at_1.map_or("-".to_string(), |r| format!("{r:.4}"));
                out.push_str(&format!(
                    "[{:.4}, {:.4}] {:>10} {:>8}\n",
                    b.lower,
                    b.upper,
                    b.context_ids.len(),
                    r1
                ));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub token: String,
    /// `None` at padded positions.
    pub weight: Option<f64>,
    pub salient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceAttention {
    pub index: usize,
    /// One entry per padded token slot.
    pub tokens: Vec<TokenWeight>,
    /// `p x p` row-major sticker cell weights; `None` for an all-pad utterance.
    pub cells: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub context_id: String,
    pub candidate: usize,
    pub sticker: String,
    pub is_positive: bool,
    pub score: f64,
    pub grid: usize,
    pub utterances: Vec<UtteranceAttention>,
}

/// Word and sticker-cell attentions of one candidate, recomputed by an
/// eval-mode forward pass. The token with the largest word weight across the
/// whole context is flagged salient.
pub fn attention_dump(
    model: &SrsModel,
    store: &ParamStore,
    ctx: &DialogContext,
    vocab: &Vocab,
    stickers: &[Sticker],
    bank: &[StickerTensors],
    candidate: usize,
) -> Result<AttentionDump> {
    if model.interaction().is_none() {
        return Err(Error::Config("the model was trained without the interaction network".into()));
    }
    let sticker_id = *ctx
        .candidates
        .get(candidate)
        .ok_or_else(|| Error::Corpus(format!("context {} has no candidate {candidate}", ctx.id)))?;
    let mut g = Graph::new();
    let utterances = model.encode_utterances(&mut g, store, ctx)?;
    let repr = bank
        .get(sticker_id)
        .ok_or_else(|| Error::Corpus(format!("unknown sticker {sticker_id}")))?
        .insert(&mut g);
    let trace = model.score_candidate(&mut g, store, &utterances, &repr)?;
    let p = model.config().grid;
    let mut rows = Vec::with_capacity(ctx.utterances.len());
    for (i, (utt, m)) in ctx.utterances.iter().zip(&trace.matches).enumerate() {
        let UtteranceMatch::Deep(vars) = m else {
            unreachable!("interaction network present");
        };
        let tau_u = vars.tau_u.map(|v| g.value(v).data().to_vec()).unwrap_or_default();
        let tokens = utt
            .token_ids
            .iter()
            .enumerate()
            .map(|(j, &id)| TokenWeight {
                token: if id == PAD_ID { vocab.word(PAD_ID).to_string() } else { vocab.word(id).to_string() },
                weight: tau_u.get(j).copied().filter(|_| utt.mask[j]),
                salient: false,
            })
            .collect();
        let cells = vars
            .tau_s
            .map(|v| g.value(v).data().chunks(p).map(<[f64]>::to_vec).collect());
        rows.push(UtteranceAttention { index: i, tokens, cells });
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        for (j, t) in row.tokens.iter().enumerate() {
            if let Some(w) = t.weight {
                if best.is_none_or(|(_, _, b)| w > b) {
                    best = Some((i, j, w));
                }
            }
        }
    }
    if let Some((i, j, _)) = best {
        rows[i].tokens[j].salient = true;
    }
    Ok(AttentionDump {
        context_id: ctx.id.clone(),
        candidate,
        sticker: stickers.get(sticker_id).map_or_else(String::new, |s| s.name.clone()),
        is_positive: candidate == ctx.positive_index,
        score: g.value(trace.score()).item(),
        grid: p,
        utterances: rows,
    })
}
