use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SurvivalLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `k` train/test partitions of `0..labels.len()`. Stratified by class when
/// every class has at least `k` members; otherwise a plain shuffled split.
pub fn kfold_split(labels: &[SurvivalLabel], k: usize, seed: u64) -> Result<Vec<Fold>> {
    let n = labels.len();
    if k < 2 || n < k {
        return Err(Error::FoldCount { n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l.class_id).or_default().push(i);
    }
    let order: Vec<usize> = if by_class.values().all(|members| members.len() >= k) {
        by_class
            .into_values()
            .flat_map(|mut members| {
                members.shuffle(&mut rng);
                members
            })
            .collect()
    } else {
        log::warn!("some class has fewer than {k} members; falling back to an unstratified split");
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all
    };
    let mut tests = vec![Vec::new(); k];
    for (pos, idx) in order.into_iter().enumerate() {
        tests[pos % k].push(idx);
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survival::Censorship;

    fn labels(n: usize, n_intervals: usize) -> Vec<SurvivalLabel> {
        (0..n)
            .map(|i| {
                let c = if i % 3 == 0 { Censorship::Alive } else { Censorship::Dead };
                SurvivalLabel::new(c, 1.0 + i as f64, i % n_intervals + 1, n_intervals)
            })
            .collect()
    }

    fn check_partition(folds: &[Fold], n: usize) {
        let mut seen = vec![0; n];
        for f in folds {
            for &i in &f.test {
                seen[i] += 1;
            }
            assert_eq!(f.train.len() + f.test.len(), n);
            assert!(f.train.iter().all(|i| !f.test.contains(i)));
        }
        assert!(seen.iter().all(|&c| c == 1), "union of test folds must cover each index once");
        let sizes: Vec<_> = folds.iter().map(|f| f.test.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn ten_into_five() {
        let folds = kfold_split(&labels(10, 2), 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        assert!(folds.iter().all(|f| f.test.len() == 2));
        check_partition(&folds, 10);
    }

    #[test]
    fn stratified_partition_properties() {
        for n in [37, 100, 201] {
            let folds = kfold_split(&labels(n, 4), 5, n as u64).unwrap();
            check_partition(&folds, n);
        }
    }

    #[test]
    fn unstratified_fallback_still_partitions() {
        let folds = kfold_split(&labels(7, 4), 3, 0).unwrap();
        check_partition(&folds, 7);
    }

    #[test]
    fn too_few_patients() {
        assert!(matches!(kfold_split(&labels(3, 2), 5, 0), Err(Error::FoldCount { .. })));
        assert!(kfold_split(&labels(3, 2), 1, 0).is_err());
    }
}
