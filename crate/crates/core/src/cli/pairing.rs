//! Random reference pairing.

use crate::error::{DiceError, Result};
use crate::rng::SeededRng;

/// For each of `n` images, `k` distinct reference indices drawn uniformly
/// without replacement from the other `n - 1` images.
pub fn pair_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(DiceError::InvalidArgument(format!(
            "pairing needs at least 2 images, got {n}"
        )));
    }
    if k == 0 || k > n - 1 {
        return Err(DiceError::InvalidArgument(format!(
            "cannot draw {k} references from {} other images",
            n - 1
        )));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = SeededRng::derive(seed, "pair", i as u64);
            let mut pool: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            // Partial Fisher-Yates: the first k slots end up a uniform sample.
            for slot in 0..k {
                let pick = slot + rng.below(pool.len() - slot);
                pool.swap(slot, pick);
            }
            pool.truncate(k);
            pool
        })
        .collect())
}
