use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, GraphError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// K-fold node split: each node is a test node in exactly one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Fold>,
    pub stratified: bool,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct FoldOptions {
    pub k: usize,
    /// Share of each fold's non-test nodes held out for early stopping.
    pub val_fraction: f64,
    pub seed: u64,
    /// Fall back to an unstratified split when a class is smaller than `k`.
    pub allow_unstratified: bool,
}

impl Default for FoldOptions {
    fn default() -> Self {
        Self { k: 5, val_fraction: 0.2, seed: 0, allow_unstratified: false }
    }
}

/// Stratified k-fold plan with default options otherwise.
pub fn make_folds(g: &Graph, k: usize, val_fraction: f64, seed: u64) -> Result<FoldPlan, GraphError> {
    make_folds_with(g, &FoldOptions { k, val_fraction, seed, allow_unstratified: false })
}

pub fn make_folds_with(g: &Graph, opts: &FoldOptions) -> Result<FoldPlan, GraphError> {
    let k = opts.k;
    if k < 2 {
        return Err(GraphError::Invalid(format!("need at least 2 folds, got {k}")));
    }
    if !(0.0..1.0).contains(&opts.val_fraction) {
        return Err(GraphError::Invalid(format!("val_fraction {} outside [0, 1)", opts.val_fraction)));
    }
    let n = g.num_nodes();
    if n < k {
        return Err(GraphError::Invalid(format!("{n} nodes cannot fill {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let counts = g.class_counts();
    let small = counts.iter().enumerate().find(|&(_, &c)| c > 0 && c < k);
    let stratified = match small {
        Some((class, &count)) if !opts.allow_unstratified => {
            return Err(GraphError::Stratification { class, count, k })
        }
        Some(_) => false,
        None => true,
    };

    // Class-major order, shuffled within each class; position p goes to fold p mod k.
    let order: Vec<usize> = if stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); g.num_classes()];
        for (i, &l) in g.labels().iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
            .into_iter()
            .flat_map(|mut members| {
                members.shuffle(&mut rng);
                members
            })
            .collect()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all
    };
    let mut fold_of = vec![0usize; n];
    for (p, &node) in order.iter().enumerate() {
        fold_of[node] = p % k;
    }

    let folds = (0..k)
        .map(|f| {
            let mut test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let mut rest: Vec<usize> = order.iter().copied().filter(|&i| fold_of[i] != f).collect();
            rest.shuffle(&mut rng);
            let mut val = Vec::new();
            let mut train = Vec::new();
            if stratified {
                let mut quota: Vec<usize> = vec![0; g.num_classes()];
                for (c, q) in quota.iter_mut().enumerate() {
                    let members = rest.iter().filter(|&&i| g.labels()[i] == c).count();
                    *q = (members as f64 * opts.val_fraction).round() as usize;
                }
                for &i in &rest {
                    let q = &mut quota[g.labels()[i]];
                    if *q > 0 {
                        *q -= 1;
                        val.push(i);
                    } else {
                        train.push(i);
                    }
                }
            } else {
                let nv = (rest.len() as f64 * opts.val_fraction).round() as usize;
                val.extend_from_slice(&rest[..nv]);
                train.extend_from_slice(&rest[nv..]);
            }
            test.sort_unstable();
            val.sort_unstable();
            train.sort_unstable();
            Fold { train, val, test }
        })
        .collect();
    Ok(FoldPlan { k, folds, stratified, seed: opts.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn labelled(labels: Vec<usize>, c: usize) -> Graph {
        let n = labels.len();
        Graph::new("t", Tensor::zeros(&[n, 1]), labels, c, vec![], true).unwrap()
    }

    #[test]
    fn balanced_binary_ten_nodes() {
        let g = labelled(vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 2);
        let plan = make_folds(&g, 5, 0.2, 1).unwrap();
        for fold in &plan.folds {
            assert_eq!(fold.test.len(), 2);
            let classes: Vec<usize> = fold.test.iter().map(|&i| g.labels()[i]).collect();
            assert!(classes.contains(&0) && classes.contains(&1));
        }
    }

    #[test]
    fn same_seed_same_plan() {
        let g = labelled((0..40).map(|i| i % 3).collect(), 3);
        assert_eq!(make_folds(&g, 4, 0.25, 9).unwrap(), make_folds(&g, 4, 0.25, 9).unwrap());
        assert_ne!(make_folds(&g, 4, 0.25, 9).unwrap(), make_folds(&g, 4, 0.25, 10).unwrap());
    }

    #[test]
    fn partition_and_disjointness() {
        let g = labelled((0..103).map(|i| (i * 7) % 4).collect(), 4);
        let plan = make_folds(&g, 5, 0.2, 3).unwrap();
        let mut hits = vec![0; 103];
        for fold in &plan.folds {
            for &i in &fold.test {
                hits[i] += 1;
            }
            let mut all: Vec<usize> = fold.train.iter().chain(&fold.val).chain(&fold.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..103).collect::<Vec<_>>());
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn cora_sized_fold_sizes() {
        // Cora class sizes.
        let sizes = [351, 217, 418, 818, 426, 298, 180];
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat_n(c, m)).collect();
        assert_eq!(labels.len(), 2708);
        let plan = make_folds(&labelled(labels, 7), 5, 0.2, 0).unwrap();
        let got: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(got, vec![542, 542, 542, 541, 541]);
    }

    #[test]
    fn small_class_needs_fallback() {
        let g = labelled(vec![0, 0, 0, 0, 0, 1], 2);
        assert!(matches!(make_folds(&g, 3, 0.2, 0), Err(GraphError::Stratification { class: 1, count: 1, k: 3 })));
        let plan = make_folds_with(&g, &FoldOptions { k: 3, allow_unstratified: true, ..Default::default() }).unwrap();
        assert!(!plan.stratified);
        assert_eq!(plan.folds.iter().map(|f| f.test.len()).sum::<usize>(), 6);
    }
}
