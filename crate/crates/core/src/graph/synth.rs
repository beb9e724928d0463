//! Synthetic graphs with a label confounder.
//!
//! A hidden confounder `z` agrees with the label `y` with probability `ρ`
//! (otherwise it takes a uniformly random other class) and shifts the
//! spurious feature block. Causal features depend on `y` alone, and edges
//! follow label homophily. The train and test views share every class mean
//! and differ only in `ρ`, so a model that reads the spurious block degrades
//! on the test view while one that reads the causal block does not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Graph, GraphError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_causal: usize,
    pub d_spurious: usize,
    pub num_classes: usize,
    pub rho_train: f64,
    pub rho_test: f64,
    pub p_in: f64,
    pub p_out: f64,
    /// Scale of the per-class causal means (unit-variance noise).
    pub causal_separation: f64,
    /// Scale of the per-confounder spurious means (unit-variance noise).
    pub spurious_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            d_causal: 8,
            d_spurious: 8,
            num_classes: 2,
            rho_train: 0.95,
            rho_test: 0.05,
            p_in: 0.02,
            p_out: 0.002,
            causal_separation: 1.0,
            spurious_separation: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), GraphError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(GraphError::Invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("rho_train", self.rho_train)?;
        unit("rho_test", self.rho_test)?;
        unit("p_in", self.p_in)?;
        unit("p_out", self.p_out)?;
        if self.p_in < self.p_out {
            return Err(GraphError::Invalid(format!("p_in {} < p_out {}", self.p_in, self.p_out)));
        }
        if self.n == 0 || self.num_classes < 2 {
            return Err(GraphError::Invalid("need n ≥ 1 and at least 2 classes".into()));
        }
        if self.d_causal + self.d_spurious == 0 {
            return Err(GraphError::Invalid("no features requested".into()));
        }
        if !(self.causal_separation >= 0.0 && self.spurious_separation >= 0.0) {
            return Err(GraphError::Invalid("separations must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub causal_indices: Vec<usize>,
    pub spurious_indices: Vec<usize>,
    pub confounder_train: Vec<usize>,
    pub confounder_test: Vec<usize>,
    pub rho_train: f64,
    pub rho_test: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticViews {
    pub train: Graph,
    pub test: Graph,
    pub truth: GroundTruth,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

struct ClassMeans {
    causal: Vec<Vec<f64>>,
    spurious: Vec<Vec<f64>>,
}

fn sample_view(spec: &SyntheticSpec, means: &ClassMeans, rho: f64, stream: u64, name: &str) -> (Graph, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let (n, c) = (spec.n, spec.num_classes);
    let d = spec.d_causal + spec.d_spurious;

    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let confounder: Vec<usize> = labels
        .iter()
        .map(|&y| {
            if rng.random_bool(rho) {
                y
            } else {
                let other = rng.random_range(0..c - 1);
                if other >= y {
                    other + 1
                } else {
                    other
                }
            }
        })
        .collect();

    let mut features = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..spec.d_causal {
            features.push(means.causal[labels[i]][j] + normal(&mut rng));
        }
        for j in 0..spec.d_spurious {
            features.push(means.spurious[confounder[i]][j] + normal(&mut rng));
        }
    }
    // Round through f32 so a saved bundle reloads to identical values.
    let features: Vec<f64> = features.into_iter().map(|v| v as f32 as f64).collect();

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { spec.p_in } else { spec.p_out };
            if rng.random_bool(p) {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }
    let g = Graph::new(name, Tensor::matrix(n, d, features), labels, c, edges, false)
        .expect("generator respects graph invariants");
    (g, confounder)
}

/// Draws the train and test views described by `spec`.
pub fn synth_confounded(spec: &SyntheticSpec) -> Result<SyntheticViews, GraphError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.num_classes;
    let means = ClassMeans {
        causal: (0..c)
            .map(|_| (0..spec.d_causal).map(|_| spec.causal_separation * normal(&mut rng)).collect())
            .collect(),
        spurious: (0..c)
            .map(|_| (0..spec.d_spurious).map(|_| spec.spurious_separation * normal(&mut rng)).collect())
            .collect(),
    };
    let (train, confounder_train) = sample_view(spec, &means, spec.rho_train, 1, "synthetic-train");
    let (test, confounder_test) = sample_view(spec, &means, spec.rho_test, 2, "synthetic-test");
    let truth = GroundTruth {
        causal_indices: (0..spec.d_causal).collect(),
        spurious_indices: (spec.d_causal..spec.d_causal + spec.d_spurious).collect(),
        confounder_train,
        confounder_test,
        rho_train: spec.rho_train,
        rho_test: spec.rho_test,
    };
    Ok(SyntheticViews { train, test, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rho_train: f64, rho_test: f64) -> SyntheticSpec {
        SyntheticSpec { n: 400, rho_train, rho_test, seed: 21, ..Default::default() }
    }

    fn agreement(labels: &[usize], z: &[usize]) -> f64 {
        labels.iter().zip(z).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
    }

    #[test]
    fn equal_seeds_reproduce_bitwise() {
        let a = synth_confounded(&small(0.9, 0.1)).unwrap();
        let b = synth_confounded(&small(0.9, 0.1)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn rho_one_aligns_confounder_with_label() {
        let v = synth_confounded(&small(1.0, 1.0)).unwrap();
        assert_eq!(agreement(v.train.labels(), &v.truth.confounder_train), 1.0);
        assert_eq!(agreement(v.test.labels(), &v.truth.confounder_test), 1.0);
    }

    #[test]
    fn rho_half_is_a_fair_coin() {
        let spec = SyntheticSpec { n: 4000, p_in: 0.0, p_out: 0.0, ..small(0.5, 0.5) };
        let v = synth_confounded(&spec).unwrap();
        let a = agreement(v.train.labels(), &v.truth.confounder_train);
        // 3σ band for a fair coin over 4000 draws
        assert!((a - 0.5).abs() < 3.0 * (0.25f64 / 4000.0).sqrt(), "{a}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synth_confounded(&SyntheticSpec { rho_train: 1.5, ..Default::default() }).is_err());
        assert!(synth_confounded(&SyntheticSpec { p_in: 0.001, p_out: 0.01, ..Default::default() }).is_err());
    }

    #[test]
    fn causal_block_has_the_same_class_means_in_both_views() {
        let v = synth_confounded(&SyntheticSpec { n: 2000, p_in: 0.0, p_out: 0.0, ..small(0.95, 0.05) }).unwrap();
        for class in 0..2 {
            for j in v.truth.causal_indices.clone() {
                let stats = |g: &Graph| {
                    let xs: Vec<f64> =
                        (0..g.num_nodes()).filter(|&i| g.labels()[i] == class).map(|i| g.features().get(i, j)).collect();
                    (xs.iter().sum::<f64>() / xs.len() as f64, xs.len())
                };
                let (ma, na) = stats(&v.train);
                let (mb, nb) = stats(&v.test);
                // unit-variance noise: σ of the mean difference is sqrt(1/na + 1/nb)
                let sigma = (1.0 / na as f64 + 1.0 / nb as f64).sqrt();
                assert!((ma - mb).abs() < 3.0 * sigma, "class {class} dim {j}: {ma} vs {mb}");
            }
        }
    }

    #[test]
    fn edges_are_symmetric_and_homophilous() {
        let v = synth_confounded(&small(0.95, 0.05)).unwrap();
        let g = &v.train;
        let set: std::collections::HashSet<_> = g.edges().iter().copied().collect();
        assert!(g.edges().iter().all(|&(s, d)| set.contains(&(d, s)) && s != d));
        let intra = g.edges().iter().filter(|&&(s, d)| g.labels()[s] == g.labels()[d]).count();
        assert!(intra as f64 > 0.8 * g.num_edges() as f64);
    }
}
