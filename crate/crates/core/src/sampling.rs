//! Stratified cross-validation splitting and the resampling experiments.
//!
//! Resamplers take only the training-fold index slice, so validation data
//! cannot be touched by construction.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Disjoint fold assignment over record indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn validation(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// All indices outside `fold`, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Stratified k-fold: per class, indices are shuffled (seeded) then dealt
/// round-robin starting at fold 0, so per-fold class counts deviate from
/// proportionality by at most one.
pub fn stratified_kfold(labels: &[usize], k: usize, plan_seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidConfig("k must be at least 2".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, &label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(plan_seed, &["kfold"]));
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (&class, indices) in by_class.iter_mut() {
        if indices.len() < k {
            return Err(Error::ClassTooSmall {
                class,
                count: indices.len(),
                k,
            });
        }
        indices.shuffle(&mut rng);
        for (j, &idx) in indices.iter().enumerate() {
            folds[j % k].push(idx);
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(FoldPlan {
        k,
        seed: plan_seed,
        folds,
    })
}

/// In-fold class counts ranked by (count desc, class asc).
fn ranked_counts(train: &[usize], labels: &[usize]) -> Vec<(usize, usize)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &idx in train {
        *counts.entry(labels[idx]).or_insert(0) += 1;
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Cut the two largest in-fold classes down to the third-largest count by
/// seeded uniform removal. All other classes are untouched; output preserves
/// the input order of the surviving indices.
pub fn undersample_majorities(
    train: &[usize],
    labels: &[usize],
    sample_seed: u64,
) -> Result<Vec<usize>> {
    let ranked = ranked_counts(train, labels);
    if ranked.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "undersampling needs at least 3 classes, found {}",
            ranked.len()
        )));
    }
    let target = ranked[2].1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(sample_seed, &["undersample"]));
    let mut removed: HashSet<usize> = HashSet::new();
    for &(class, count) in &ranked[..2] {
        if count <= target {
            continue;
        }
        let mut members: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        removed.extend(members.into_iter().skip(target));
    }
    Ok(train.iter().copied().filter(|i| !removed.contains(i)).collect())
}

/// Replicate every class below the second-largest in-fold count up to it by
/// seeded sampling with replacement. Originals are all retained; replicas
/// append after the originals in class order.
pub fn oversample_minorities(
    train: &[usize],
    labels: &[usize],
    sample_seed: u64,
) -> Result<Vec<usize>> {
    let ranked = ranked_counts(train, labels);
    if ranked.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "oversampling needs at least 2 classes, found {}",
            ranked.len()
        )));
    }
    let target = ranked[1].1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(sample_seed, &["oversample"]));
    let mut out = train.to_vec();
    let mut classes: Vec<(usize, usize)> = ranked.clone();
    classes.sort_by_key(|&(class, _)| class);
    for (class, count) in classes {
        if count >= target {
            continue;
        }
        let members: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == class).collect();
        for _ in 0..target - count {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_with_counts(counts: &[usize]) -> Vec<usize> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(class, &n)| std::iter::repeat_n(class, n))
            .collect()
    }

    fn class_count(indices: &[usize], labels: &[usize], class: usize) -> usize {
        indices.iter().filter(|&&i| labels[i] == class).count()
    }

    #[test]
    fn equal_classes_split_exactly() {
        let labels = labels_with_counts(&[5, 5, 5, 5, 5]);
        let plan = stratified_kfold(&labels, 5, 1).unwrap();
        for fold in plan.folds() {
            assert_eq!(fold.len(), 5);
            for class in 0..5 {
                assert_eq!(class_count(fold, &labels, class), 1);
            }
        }
    }

    #[test]
    fn class_of_seven_splits_two_two_one_one_one() {
        let labels = labels_with_counts(&[7, 9]);
        let plan = stratified_kfold(&labels, 5, 3).unwrap();
        let mut sizes: Vec<usize> = (0..5)
            .map(|f| class_count(plan.validation(f), &labels, 0))
            .collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 1, 1, 2, 2]);
    }

    #[test]
    fn folds_partition_the_dataset() {
        let labels = labels_with_counts(&[23, 17, 11, 6]);
        let plan = stratified_kfold(&labels, 5, 9).unwrap();
        let mut all: Vec<usize> = plan.folds().iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        // Proportionality within one instance.
        for class in 0..4 {
            let total = labels.iter().filter(|&&l| l == class).count();
            for f in 0..5 {
                let got = class_count(plan.validation(f), &labels, class) as f64;
                assert!((got - total as f64 / 5.0).abs() <= 1.0);
            }
        }
        // Train/validation are complements.
        let train = plan.train_indices(2);
        let val = plan.validation(2);
        assert_eq!(train.len() + val.len(), labels.len());
        assert!(train.iter().all(|i| !val.contains(i)));
    }

    #[test]
    fn small_class_errors_with_name() {
        let labels = labels_with_counts(&[10, 3]);
        match stratified_kfold(&labels, 5, 1) {
            Err(Error::ClassTooSmall { class, count, k }) => {
                assert_eq!((class, count, k), (1, 3, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plan_is_deterministic() {
        let labels = labels_with_counts(&[12, 9, 7]);
        assert_eq!(
            stratified_kfold(&labels, 3, 5).unwrap(),
            stratified_kfold(&labels, 3, 5).unwrap()
        );
        assert_ne!(
            stratified_kfold(&labels, 3, 5).unwrap(),
            stratified_kfold(&labels, 3, 6).unwrap()
        );
    }

    #[test]
    fn undersample_rank_arithmetic() {
        let labels = labels_with_counts(&[100, 80, 30, 5]);
        let train: Vec<usize> = (0..labels.len()).collect();
        let reduced = undersample_majorities(&train, &labels, 7).unwrap();
        assert_eq!(class_count(&reduced, &labels, 0), 30);
        assert_eq!(class_count(&reduced, &labels, 1), 30);
        assert_eq!(class_count(&reduced, &labels, 2), 30);
        assert_eq!(class_count(&reduced, &labels, 3), 5);
        // Subset of input, order preserved.
        assert!(reduced.windows(2).all(|w| w[0] < w[1]));
        let input: HashSet<usize> = train.iter().copied().collect();
        assert!(reduced.iter().all(|i| input.contains(i)));
    }

    #[test]
    fn undersample_noop_when_top_three_equal() {
        let labels = labels_with_counts(&[30, 30, 30, 5]);
        let train: Vec<usize> = (0..labels.len()).collect();
        let reduced = undersample_majorities(&train, &labels, 7).unwrap();
        assert_eq!(reduced, train);
    }

    #[test]
    fn undersample_needs_three_classes() {
        let labels = labels_with_counts(&[10, 10]);
        let train: Vec<usize> = (0..labels.len()).collect();
        assert!(undersample_majorities(&train, &labels, 1).is_err());
    }

    #[test]
    fn oversample_rank_arithmetic() {
        let labels = labels_with_counts(&[100, 80, 5]);
        let train: Vec<usize> = (0..labels.len()).collect();
        let enlarged = oversample_minorities(&train, &labels, 11).unwrap();
        assert_eq!(class_count(&enlarged, &labels, 0), 100);
        assert_eq!(class_count(&enlarged, &labels, 1), 80);
        assert_eq!(class_count(&enlarged, &labels, 2), 80);
        // Originals all retained, replicas drawn from the class itself.
        assert_eq!(&enlarged[..train.len()], train.as_slice());
        assert!(enlarged[train.len()..].iter().all(|&i| labels[i] == 2));
    }

    #[test]
    fn oversample_noop_when_balanced() {
        let labels = labels_with_counts(&[50, 50]);
        let train: Vec<usize> = (0..labels.len()).collect();
        let enlarged = oversample_minorities(&train, &labels, 11).unwrap();
        assert_eq!(enlarged, train);
    }

    #[test]
    fn resamplers_are_deterministic() {
        let labels = labels_with_counts(&[40, 30, 10, 4]);
        let train: Vec<usize> = (0..labels.len()).collect();
        assert_eq!(
            undersample_majorities(&train, &labels, 3).unwrap(),
            undersample_majorities(&train, &labels, 3).unwrap()
        );
        assert_eq!(
            oversample_minorities(&train, &labels, 3).unwrap(),
            oversample_minorities(&train, &labels, 3).unwrap()
        );
    }
}
