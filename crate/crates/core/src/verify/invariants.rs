//! Algebraic identities that hold for every input, checked on random ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_graph, Check, Deviation};
use crate::layers::{AttentionKind, FeatureGate, FusionGate, GatLayer};
use crate::model::{permutation, CcagnnModel, ModelConfig, ModelError};
use crate::tensor::{ParamStore, Tape, Tensor};

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Inputs and gate parameters at scales from mild to saturating.
fn gate_inputs(seed: u64) -> (ChaCha8Rng, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 10f64.powf(rng.random_range(-1.0..3.0));
    (rng, scale)
}

/// `x_c + x_o = h` for the feature gate, relative to `max(|h|, 1)`.
pub fn split_sum(seeds: u64) -> Result<Check, ModelError> {
    let mut dev = Deviation::default();
    for seed in 0..seeds {
        let (mut rng, scale) = gate_inputs(seed);
        let d = rng.random_range(1..=8);
        let mut store = ParamStore::new();
        let gate = FeatureGate::new(&mut store, "gate", d, &mut rng);
        randomize(&mut store, &mut rng, 1.0);
        let n = rng.random_range(1..=10);
        let h = rand_matrix(&mut rng, n, d, scale);
        let tape = Tape::inference();
        let out = gate.disentangle(&tape, &store, tape.constant(h.clone()))?;
        let (c, o) = (out.causal.value(), out.noncausal.value());
        for ((c, o), x) in c.data().iter().zip(o.data()).zip(h.data()) {
            dev.diff((c + o) / x.abs().max(1.0), x / x.abs().max(1.0));
        }
    }
    Ok(dev.check("split sum x_c + x_o = h", seeds as usize, 1e-12))
}

/// Feature-gate and fusion-gate values lie strictly inside (0, 1). The
/// deviation counts entries outside.
pub fn gate_range(seeds: u64) -> Result<Check, ModelError> {
    let mut outside = 0usize;
    for seed in 0..seeds {
        let (mut rng, scale) = gate_inputs(seed);
        let d = rng.random_range(1..=8);
        let mut store = ParamStore::new();
        let gate = FeatureGate::new(&mut store, "gate", d, &mut rng);
        let fusion = FusionGate::new(&mut store, "fusion", d, &mut rng);
        randomize(&mut store, &mut rng, 1.0);
        let n = rng.random_range(1..=10);
        let tape = Tape::inference();
        let out = gate.disentangle(&tape, &store, tape.constant(rand_matrix(&mut rng, n, d, scale)))?;
        let fused = fusion.fuse(&tape, &store, out.causal, out.noncausal)?;
        let values = out.gate.value();
        let alpha = fused.alpha.value();
        outside += values.data().iter().chain(alpha.data()).filter(|&&g| !(g > 0.0 && g < 1.0)).count();
    }
    Ok(Check { name: "gate values inside (0, 1)", trials: seeds as usize, max_deviation: outside as f64, tolerance: 0.0 })
}

/// Attention weights into each node sum to 1 per head.
pub fn attention_rows(seeds: u64) -> Result<Check, ModelError> {
    let mut dev = Deviation::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=20);
        let p = rng.random_range(0.0..0.5);
        let g = random_graph(&mut rng, n, 4, 1, p);
        for kind in [AttentionKind::GatV2, AttentionKind::Gat] {
            let mut store = ParamStore::new();
            let layer = GatLayer::new(&mut store, "gat", 4, 3, 3, true, kind, &mut rng);
            randomize(&mut store, &mut rng, 2.0);
            let tape = Tape::inference();
            let edges = g.edge_index();
            let att = layer.forward(&tape, &store, tape.constant(g.features().clone()), &edges)?.attention.value();
            let mut totals = vec![0.0; n * 3];
            for (e, &t) in edges.dst.iter().enumerate() {
                for h in 0..3 {
                    totals[t * 3 + h] += att.get(e, h);
                }
            }
            for t in totals {
                dev.diff(t, 1.0);
            }
        }
    }
    Ok(dev.check("attention rows sum to 1", seeds as usize, 1e-9))
}

/// With the intervention gate at 0 the counterfactual logits ignore the
/// permutation of causal rows.
pub fn zero_intervention_ignores_permutation(seeds: u64) -> Result<Check, ModelError> {
    let mut dev = Deviation::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut config = ModelConfig::new(4, rng.random_range(2..=4));
        config.heads = 2;
        config.head_dim = 4;
        config.seed = seed;
        let mut model = CcagnnModel::new(config)?;
        model.alpha_int_override = Some(0.0);
        let n = rng.random_range(2..12);
        let d = model.config().hidden();
        let (xc, xo) = (rand_matrix(&mut rng, n, d, 2.0), rand_matrix(&mut rng, n, d, 2.0));
        let tape = Tape::inference();
        let run = |perm: &[usize]| -> Result<Vec<f64>, ModelError> {
            let (l, _, _) = model.counterfactual_intervene(
                &tape,
                model.store(),
                tape.constant(xc.clone()),
                tape.constant(xo.clone()),
                perm,
            )?;
            Ok(l.value().data().to_vec())
        };
        let identity: Vec<usize> = (0..n).collect();
        dev.diffs(&run(&identity)?, &run(&permutation(n, seed))?);
    }
    Ok(dev.check("zero intervention gate ignores the permutation", seeds as usize, 0.0))
}

/// `z = α x_c + (1 − α) x_o` for the fusion gate's own α.
pub fn fusion_identity(seeds: u64) -> Result<Check, ModelError> {
    let mut dev = Deviation::default();
    for seed in 0..seeds {
        let (mut rng, scale) = gate_inputs(seed);
        let d = rng.random_range(1..=8);
        let mut store = ParamStore::new();
        let fusion = FusionGate::new(&mut store, "fusion", d, &mut rng);
        randomize(&mut store, &mut rng, 1.0);
        let n = rng.random_range(1..=10);
        let (xc, xo) = (rand_matrix(&mut rng, n, d, scale), rand_matrix(&mut rng, n, d, scale));
        let tape = Tape::inference();
        let fused = fusion.fuse(&tape, &store, tape.constant(xc.clone()), tape.constant(xo.clone()))?;
        let (z, a) = (fused.z.value(), fused.alpha.value());
        for i in 0..n {
            let ai = a.get(i, 0);
            for k in 0..d {
                let expected = ai * xc.get(i, k) + (1.0 - ai) * xo.get(i, k);
                dev.diff(z.get(i, k) / scale, expected / scale);
            }
        }
    }
    Ok(dev.check("fusion z = α x_c + (1 − α) x_o", seeds as usize, 1e-12))
}

/// Every invariant with `seeds` random trials each.
pub fn all(seeds: u64) -> Result<Vec<Check>, ModelError> {
    Ok(vec![
        split_sum(seeds)?,
        gate_range(seeds)?,
        attention_rows(seeds)?,
        zero_intervention_ignores_permutation(seeds)?,
        fusion_identity(seeds)?,
    ])
}
