use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DensityField;
use crate::rng::rng_from;

/// Fixed random partition of density entries into training and validation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvSplit {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

impl TvSplit {
    pub fn len(&self) -> usize {
        self.train_idx.len() + self.val_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits the flat entry indices of `field` independently of space and time.
pub fn tv_split(field: &DensityField, fraction: f64, seed: u64) -> Result<TvSplit> {
    split_indices(field.len(), fraction, seed)
}

pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<TvSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "training fraction must lie in (0, 1), got {fraction}; a validation set is required"
        )));
    }
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidInput(format!(
            "{n} entries cannot be split {fraction} into two non-empty sets"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    let mut train_idx = idx[..n_train].to_vec();
    let mut val_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok(TvSplit {
        train_idx,
        val_idx,
        fraction,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_for_replicate_one_grid() {
        let s = split_indices(15 * 11 * 9, 0.8, 7).unwrap();
        assert_eq!(s.train_idx.len(), 1188);
        assert_eq!(s.val_idx.len(), 297);
    }

    #[test]
    fn partition_is_disjoint_and_covering() {
        let s = split_indices(1485, 0.8, 11).unwrap();
        let mut all: Vec<usize> = s.train_idx.iter().chain(&s.val_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1485).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(split_indices(500, 0.8, 3).unwrap(), split_indices(500, 0.8, 3).unwrap());
        assert_ne!(split_indices(500, 0.8, 3).unwrap(), split_indices(500, 0.8, 4).unwrap());
    }

    #[test]
    fn full_fraction_rejected() {
        assert!(split_indices(100, 1.0, 0).is_err());
        assert!(split_indices(100, 0.0, 0).is_err());
    }
}
