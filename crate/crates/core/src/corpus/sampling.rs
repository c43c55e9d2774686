use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::types::StickerId;
use crate::error::{Error, Result};

/// Draw `n` distinct stickers from `sticker_set`, never the positive.
///
/// The result order is determined by `seed`.
pub fn sample_negatives(
    sticker_set: &[StickerId],
    positive: StickerId,
    n: usize,
    seed: u64,
) -> Result<Vec<StickerId>> {
    let mut pool: Vec<StickerId> = sticker_set.iter().copied().filter(|s| *s != positive).collect();
    pool.sort_unstable();
    pool.dedup();
    if pool.len() < n {
        return Err(Error::Corpus(format!(
            "sticker set offers {} negatives, {n} requested",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = pool.partial_shuffle(&mut rng, n);
    Ok(chosen.to_vec())
}

/// Negatives plus the positive inserted at a uniformly random slot.
/// Returns the candidate list and the positive's index in it.
pub fn build_candidates(
    sticker_set: &[StickerId],
    positive: StickerId,
    negatives: usize,
    seed: u64,
) -> Result<(Vec<StickerId>, usize)> {
    let mut candidates = sample_negatives(sticker_set, positive, negatives, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let slot = rng.random_range(0..=candidates.len());
    candidates.insert(slot, positive);
    Ok((candidates, slot))
}
