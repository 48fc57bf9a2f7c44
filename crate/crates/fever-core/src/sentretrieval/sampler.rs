//! Negative sampling: uniform random draws and online hard negative mining.
//! HNM scores an oversampled pool with frozen parameters in no-gradient mode
//! and keeps only the highest-loss entries.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::{hinge_loss, pointwise_loss, ranknet_loss, LossMode, RetrievalError};
use crate::encoder::{forward, softmax, ModelParams};
use crate::tokenizer::EncodedPair;

const SCORING_BATCH: usize = 64;

/// Uniform sample without replacement from a negative pool; pools smaller
/// than `count` are returned whole in input order.
pub fn sample_random_negatives(
    pool_len: usize,
    rng: &mut ChaCha8Rng,
    count: usize,
) -> Vec<usize> {
    if pool_len <= count {
        return (0..pool_len).collect();
    }
    sample(rng, pool_len, count).into_vec()
}

fn scores_for(
    params: &ModelParams,
    encoded: &[EncodedPair],
) -> Result<Vec<Vec<f64>>, RetrievalError> {
    let mut logits = Vec::with_capacity(encoded.len());
    for chunk in encoded.chunks(SCORING_BATCH) {
        let (rows, _) = forward(params, chunk, false, 0)?;
        logits.extend(rows);
    }
    Ok(logits)
}

/// Indices of the `select` pool negatives with the largest pointwise loss
/// (`-log p[non-evidence]`), ties kept in input order.
pub fn hnm_select_pointwise(
    params: &ModelParams,
    negative_pool: &[EncodedPair],
    select: usize,
) -> Result<Vec<usize>, RetrievalError> {
    let logits = scores_for(params, negative_pool)?;
    let losses: Vec<f64> = logits
        .iter()
        .map(|row| pointwise_loss(&[softmax(row)], &[vec![1.0, 0.0]]))
        .collect();
    Ok(top_by_loss(&losses, select))
}

/// Indices of the `select` hardest (positive, negative) pairs under the
/// active pairwise loss, ties kept in input order.
pub fn hnm_select_pairwise(
    params: &ModelParams,
    pair_pool: &[(EncodedPair, EncodedPair)],
    select: usize,
    mode: LossMode,
) -> Result<Vec<usize>, RetrievalError> {
    debug_assert!(mode.is_pairwise());
    let mut flat = Vec::with_capacity(pair_pool.len() * 2);
    for (pos, neg) in pair_pool {
        flat.push(pos.clone());
        flat.push(neg.clone());
    }
    let logits = scores_for(params, &flat)?;
    let losses: Vec<f64> = (0..pair_pool.len())
        .map(|i| {
            let o_pos = logits[2 * i][0];
            let o_neg = logits[2 * i + 1][0];
            match mode {
                LossMode::Ranknet => ranknet_loss(o_pos, o_neg),
                LossMode::Hinge => hinge_loss(o_pos, o_neg),
                LossMode::Pointwise => unreachable!(),
            }
        })
        .collect();
    Ok(top_by_loss(&losses, select))
}

/// Largest-loss indices, descending, ties resolved by input position.
fn top_by_loss(losses: &[f64], select: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then_with(|| a.cmp(&b)));
    order.truncate(select);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn random_sampling_is_seeded_and_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = sample_random_negatives(100, &mut rng, 16);
        assert_eq!(a.len(), 16);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let b = sample_random_negatives(100, &mut rng2, 16);
        assert_eq!(a, b);
        // Without replacement.
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);
        // Small pools are returned whole.
        let mut rng3 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_random_negatives(10, &mut rng3, 16), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn top_by_loss_matches_sort_oracle_with_ties() {
        let losses = vec![0.9, 0.1, 0.8, 0.8, 0.95, 0.1];
        assert_eq!(top_by_loss(&losses, 3), vec![4, 0, 2]);
        // All equal: first `select` in input order.
        let equal = vec![0.5; 6];
        assert_eq!(top_by_loss(&equal, 4), vec![0, 1, 2, 3]);
    }
}
