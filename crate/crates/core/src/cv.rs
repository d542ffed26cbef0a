//! Seeded cross-validation and hold-out splits.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Partitions `0..strata.len()` into `k` folds. Each stratum is shuffled and
/// dealt round-robin, with the dealing position carried across strata so
/// fold sizes also stay within one of each other.
pub fn stratified_folds(strata: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > strata.len() {
        return Err(Error::Config(format!(
            "cannot split {} patients into {k} folds",
            strata.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &s) in strata.iter().enumerate() {
        by_class.entry(s).or_default().push(i);
    }
    let mut folds = alloc::vec![Vec::new(); k];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Training indices for fold `f`: everything outside it.
pub fn train_indices(folds: &[Vec<usize>], f: usize) -> Vec<usize> {
    let mut out: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != f)
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    out.sort_unstable();
    out
}

/// Seeded `(train, validation)` split with `ceil(n·val_fraction)` validation
/// patients, at least one on each side.
pub fn holdout_split(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 || !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "cannot hold out {val_fraction} of {n} patients"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (num_traits::Float::ceil(n as f64 * val_fraction) as usize).clamp(1, n - 1);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_patients_ten_positive_gives_two_per_fold() {
        let strata: Vec<u8> = (0..20).map(|i| u8::from(i % 2 == 0)).collect();
        let folds = stratified_folds(&strata, 5, 3).unwrap();
        for f in &folds {
            assert_eq!(f.iter().filter(|&&i| strata[i] == 1).count(), 2);
            assert_eq!(f.len(), 4);
        }
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(train_indices(&folds, 0).len(), 16);
    }

    #[test]
    fn holdout_is_disjoint_and_covering() {
        let (t, v) = holdout_split(10, 0.2, 1).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        assert!(v.iter().all(|i| !t.contains(i)));
        assert!(holdout_split(1, 0.2, 1).is_err());
    }
}
