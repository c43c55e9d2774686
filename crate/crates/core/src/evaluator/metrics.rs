//! Ranking metrics over candidate sets with exactly one positive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores of one candidate set and the derived rank of its positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub context_id: String,
    pub scores: Vec<f64>,
    pub positive_index: usize,
    /// 1-based; negatives scoring equal to the positive rank ahead of it.
    pub rank: usize,
}

impl RankingResult {
    pub fn new(context_id: impl Into<String>, scores: Vec<f64>, positive_index: usize) -> Result<Self> {
        let context_id = context_id.into();
        if positive_index >= scores.len() {
            return Err(Error::Corpus(format!(
                "context {context_id}: positive index {positive_index} outside {} candidates",
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::TrainingFault(format!("context {context_id}: score {bad}")));
        }
        let rank = rank_of(&scores, positive_index);
        Ok(RankingResult { context_id, scores, positive_index, rank })
    }

    pub fn candidates(&self) -> usize {
        self.scores.len()
    }

    /// Whether the positive is within the top `k`.
    pub fn hit(&self, k: usize) -> bool {
        self.rank <= k
    }
}

/// `1 + #{negatives scoring at least the positive}`.
pub fn rank_of(scores: &[f64], positive_index: usize) -> usize {
    let pos = scores[positive_index];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != positive_index && s >= pos)
        .count()
}

/// `R_n@k`: mean of hits at `k`. Requires `1 <= k <= n` for every result.
pub fn recall_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("recall cutoff must be at least 1".into()));
    }
    if let Some(r) = results.iter().find(|r| k > r.candidates()) {
        return Err(Error::Config(format!(
            "recall cutoff {k} exceeds the {} candidates of {}",
            r.candidates(),
            r.context_id
        )));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    Ok(results.iter().filter(|r| r.hit(k)).count() as f64 / results.len() as f64)
}

/// Mean over contexts of `1 / rank`, the average precision of a single
/// relevant item.
pub fn map_score(results: &[RankingResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(|r| 1.0 / r.rank as f64).sum::<f64>() / results.len() as f64
}

/// The headline metrics of a result set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub contexts: usize,
    pub candidates: usize,
    pub map: f64,
    pub recall_at_1: f64,
    pub recall_at_2: f64,
    pub recall_at_5: f64,
}

pub fn summarize(results: &[RankingResult]) -> Result<Metrics> {
    let candidates = results.iter().map(RankingResult::candidates).min().unwrap_or(0);
    let at = |k: usize| {
        if candidates >= k {
            recall_at_k(results, k)
        } else {
            Ok(1.0)
        }
    };
    Ok(Metrics {
        contexts: results.len(),
        candidates,
        map: map_score(results),
        recall_at_1: at(1)?,
        recall_at_2: at(2)?,
        recall_at_5: at(5)?,
    })
}
