use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Shuffled k-way partition; the first `n % k` folds get one extra id.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Config(format!("{} examples cannot fill {k} folds", ids.len())));
    }
    let mut order = ids.to_vec();
    order.sort();
    order.dedup();
    if order.len() != ids.len() {
        return Err(Error::Config("duplicate example ids".into()));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let len = base + usize::from(fold < extra);
        let mut val = order[start..start + len].to_vec();
        let mut train: Vec<String> = order[..start].iter().chain(&order[start + len..]).cloned().collect();
        val.sort();
        train.sort();
        folds.push(FoldSplit { fold, train, val });
        start += len;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:05}")).collect()
    }

    #[test]
    fn ten_into_five() {
        let f = make_folds(&ids(10), 5, 0).unwrap();
        assert!(f.iter().all(|s| s.val.len() == 2 && s.train.len() == 8));
        assert_eq!(f, make_folds(&ids(10), 5, 0).unwrap());
        assert_ne!(f, make_folds(&ids(10), 5, 1).unwrap());
    }

    #[test]
    fn brats_training_set_sizes() {
        let sizes: Vec<usize> = make_folds(&ids(1251), 5, 7).unwrap().iter().map(|s| s.val.len()).collect();
        assert_eq!(sizes, vec![251, 250, 250, 250, 250]);
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(make_folds(&ids(3), 5, 0).is_err());
        assert!(make_folds(&ids(3), 1, 0).is_err());
        let mut dup = ids(6);
        dup[1] = dup[0].clone();
        assert!(make_folds(&dup, 5, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition(n in 5usize..80, k in 2usize..6, seed in any::<u64>()) {
            let all = ids(n);
            let folds = make_folds(&all, k, seed).unwrap();
            let mut seen = BTreeSet::new();
            for f in &folds {
                let v: BTreeSet<_> = f.val.iter().collect();
                let t: BTreeSet<_> = f.train.iter().collect();
                prop_assert!(v.is_disjoint(&t));
                prop_assert_eq!(v.len() + t.len(), n);
                for id in &f.val {
                    prop_assert!(seen.insert(id.clone()));
                }
            }
            prop_assert_eq!(seen.len(), n);
            let sizes: Vec<usize> = folds.iter().map(|f| f.val.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
