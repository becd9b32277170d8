//! Stratified dataset splits.

use super::Dataset;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shuffled(mut indices: Vec<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    indices
}

fn check_both_classes(ds: &Dataset, name: &str) -> Result<()> {
    if !ds.has_both_classes() {
        return Err(Error::Stratification(format!(
            "{name} split is missing one bag class"
        )));
    }
    Ok(())
}

/// Stratified (train, val, test) split, deterministic in `seed`. Fractions
/// apply per class with floor rounding; the remainder becomes the test set.
pub fn split(
    dataset: &Dataset,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) || !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(Error::Validation(format!(
            "split fractions must lie in (0, 1), got {train_frac}/{val_frac}"
        )));
    }
    if train_frac + val_frac >= 1.0 {
        return Err(Error::Validation(format!(
            "split fractions must sum below 1, got {train_frac} + {val_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for class in [dataset.positive_bag_indices(), dataset.negative_bag_indices()] {
        let n = class.len();
        let order = shuffled(class, &mut rng);
        let n_train = (train_frac * n as f64).floor() as usize;
        let n_val = (val_frac * n as f64).floor() as usize;
        train.extend_from_slice(&order[..n_train]);
        val.extend_from_slice(&order[n_train..n_train + n_val]);
        test.extend_from_slice(&order[n_train + n_val..]);
    }
    // keep original dataset order within each split
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    let (train, val, test) = (dataset.subset(&train), dataset.subset(&val), dataset.subset(&test));
    check_both_classes(&train, "train")?;
    check_both_classes(&val, "val")?;
    check_both_classes(&test, "test")?;
    Ok((train, val, test))
}

/// Stratified k folds: each element is a (train, held-out) pair.
pub fn k_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    if k < 2 {
        return Err(Error::Validation(format!("k_folds needs k >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in [dataset.positive_bag_indices(), dataset.negative_bag_indices()] {
        for (i, idx) in shuffled(class, &mut rng).into_iter().enumerate() {
            folds[i % k].push(idx);
        }
    }
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut held: Vec<usize> = folds[i].clone();
        let mut rest: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        held.sort_unstable();
        rest.sort_unstable();
        let (train, test) = (dataset.subset(&rest), dataset.subset(&held));
        check_both_classes(&train, "fold train")?;
        check_both_classes(&test, "fold test")?;
        out.push((train, test));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn dataset(bags_per_class: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            d_in: 2,
            bags_per_class,
            instances_min: 3,
            instances_max: 5,
            witness_rate: 0.5,
            hard_negative_fraction: 0.0,
            mu_neg: 0.0,
            mu_pos: 1.0,
            alpha: 0.0,
            sigma: 0.2,
            grid_side: 0,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn stratified_counts() {
        let ds = dataset(10);
        let (train, val, test) = split(&ds, 0.5, 0.25, 42).unwrap();
        let count = |d: &Dataset, label: u8| d.bags.iter().filter(|b| b.label == label).count();
        assert_eq!(count(&train, 1), 5);
        assert_eq!(count(&train, 0), 5);
        assert_eq!(count(&val, 1), 2);
        assert_eq!(count(&val, 0), 2);
        assert_eq!(count(&test, 1), 3);
        assert_eq!(count(&test, 0), 3);
        // disjoint by bag id
        let mut ids: Vec<&str> = train
            .bags
            .iter()
            .chain(&val.bags)
            .chain(&test.bags)
            .map(|b| b.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn excessive_fractions_rejected() {
        let ds = dataset(10);
        assert!(split(&ds, 0.9, 0.2, 1).is_err());
    }

    #[test]
    fn same_seed_same_partition() {
        let ds = dataset(10);
        let a = split(&ds, 0.6, 0.2, 9).unwrap();
        let b = split(&ds, 0.6, 0.2, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn too_small_class_fails_stratification() {
        let ds = dataset(2);
        let err = split(&ds, 0.5, 0.25, 1).unwrap_err();
        assert!(matches!(err, Error::Stratification(_)), "{err}");
    }

    #[test]
    fn k_folds_cover_every_bag_once() {
        let ds = dataset(6);
        let folds = k_folds(&ds, 3, 5).unwrap();
        assert_eq!(folds.len(), 3);
        let held: usize = folds.iter().map(|(_, t)| t.bags.len()).sum();
        assert_eq!(held, ds.bags.len());
    }
}
