//! Straight-line reference implementations written with plain loops, and
//! checks comparing them against the tape-based code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_graph, unit_rows, Check, Deviation};
use crate::graph::Graph;
use crate::layers::{AttentionKind, GatLayer, Linear, MiConfig, MiEstimator, Projection, MAX_LOGIT};
use crate::model::{CcagnnModel, ModelConfig, ModelError};
use crate::tensor::{sigmoid, ParamStore, Tape, Tensor};
use crate::train::macro_f1;

pub const EXACT: f64 = 1e-10;

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn leaky(x: f64, s: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        s * x
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x W + b` for one row.
pub fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|k| x.iter().enumerate().map(|(p, v)| v * w.get(p, k)).sum::<f64>() + b.data()[k]).collect()
}

/// Dense masked attention: a full n×n score matrix per head with non-edges
/// excluded. Returns the layer output and `alpha[head][dst][src]`.
pub fn dense_gat(layer: &GatLayer, store: &ParamStore, g: &Graph) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = g.num_nodes();
    let (hd, dh, heads) = (layer.heads * layer.d_head, layer.d_head, layer.heads);
    let w = store.value(layer.weight());
    let x = g.features();
    let mut wx = vec![vec![0.0; hd]; n];
    for i in 0..n {
        for k in 0..hd {
            wx[i][k] = (0..layer.d_in).map(|p| x.get(i, p) * w.get(p, k)).sum();
        }
    }
    let mut adj = vec![vec![false; n]; n];
    for &(s, t) in g.edges() {
        adj[t][s] = true;
    }
    let att: Vec<Tensor> = layer.attention_params().iter().map(|&p| store.value(p).clone()).collect();
    let slope = layer.negative_slope;
    let mut alpha = vec![vec![vec![0.0; n]; n]; heads];
    let mut out = vec![vec![0.0; hd]; n];
    for h in 0..heads {
        for i in 0..n {
            let mut scores = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if !adj[i][j] {
                    continue;
                }
                scores[j] = match layer.kind() {
                    AttentionKind::GatV2 => (0..dh)
                        .map(|k| att[0].data()[h * dh + k] * leaky(wx[i][h * dh + k] + wx[j][h * dh + k], slope))
                        .sum(),
                    AttentionKind::Gat => {
                        let s: f64 = (0..dh)
                            .map(|k| {
                                att[0].data()[h * dh + k] * wx[i][h * dh + k] + att[1].data()[h * dh + k] * wx[j][h * dh + k]
                            })
                            .sum();
                        leaky(s, slope)
                    }
                };
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..n {
                alpha[h][i][j] = (scores[j] - m).exp() / z;
                for k in 0..dh {
                    out[i][h * dh + k] += alpha[h][i][j] * wx[j][h * dh + k];
                }
            }
        }
    }
    let bias = store.value(layer.bias());
    let result = out
        .into_iter()
        .map(|row| {
            let row: Vec<f64> = if layer.concat {
                row
            } else {
                (0..dh).map(|k| (0..heads).map(|h| row[h * dh + k]).sum::<f64>() / heads as f64).collect()
            };
            row.iter()
                .zip(bias.data())
                .map(|(v, b)| if layer.activation { elu(v + b) } else { v + b })
                .collect()
        })
        .collect();
    (result, alpha)
}

/// `normalize(tanh(x W1 + b1) W2 + b2)` row by row.
pub fn project(p: &Projection, store: &ParamStore, x: &Tensor) -> Vec<Vec<f64>> {
    let lin = |l: &Linear, row: &[f64]| affine(row, store.value(l.weight), store.value(l.bias));
    (0..x.rows())
        .map(|i| {
            let h: Vec<f64> = lin(&p.first, x.row(i)).into_iter().map(f64::tanh).collect();
            let r = lin(&p.second, &h);
            let n = dot(&r, &r).sqrt();
            r.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

/// `mean_i T(fc_i, fo_i) − mean_i log((1/K) Σ_k exp T(q_k, fo_i))` with
/// `T(a, b) = a·b/τ` and unit-normalized queue rows.
pub fn contrastive_mi(fc: &[Vec<f64>], fo: &[Vec<f64>], queue: &[Vec<f64>], tau: f64) -> f64 {
    let b = fc.len() as f64;
    let queue: Vec<Vec<f64>> = queue
        .iter()
        .map(|q| {
            let n = dot(q, q).sqrt();
            q.iter().map(|v| v / n).collect()
        })
        .collect();
    let pos: f64 = fc.iter().zip(fo).map(|(c, o)| dot(c, o) / tau).sum::<f64>() / b;
    let neg: f64 = fo
        .iter()
        .map(|o| (queue.iter().map(|q| (dot(q, o) / tau).exp()).sum::<f64>() / queue.len() as f64).ln())
        .sum::<f64>()
        / b;
    pos - neg
}

/// F1 of class `k` from precision and recall, 0 where a ratio is undefined.
pub fn f1_by_ratios(pred: &[usize], label: &[usize], c: usize, k: usize) -> f64 {
    let mut m = vec![vec![0usize; c]; c];
    for (&p, &y) in pred.iter().zip(label) {
        m[y][p] += 1;
    }
    let tp = m[k][k] as f64;
    let predicted: usize = (0..c).map(|y| m[y][k]).sum();
    let actual: usize = m[k].iter().sum();
    let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
    let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Sparse attention against [`dense_gat`] on random graphs of 1 to 20 nodes,
/// for GATv2 with concatenated and averaged heads and for GAT.
pub fn gat_equivalence(seeds: u64) -> Result<Check, ModelError> {
    let mut dev = Deviation::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=20);
        let g = random_graph(&mut rng, n, 5, 1, 0.2);
        for (kind, concat) in [(AttentionKind::GatV2, true), (AttentionKind::GatV2, false), (AttentionKind::Gat, true)] {
            let mut store = ParamStore::new();
            let layer = GatLayer::new(&mut store, "gat", 5, 3, 2, concat, kind, &mut rng);
            randomize(&mut store, &mut rng);
            let tape = Tape::inference();
            let edges = g.edge_index();
            let out = layer.forward(&tape, &store, tape.constant(g.features().clone()), &edges)?;
            let (dense, alpha) = dense_gat(&layer, &store, &g);
            let h = out.h.value();
            for (i, row) in dense.iter().enumerate() {
                dev.diffs(h.row(i), row);
            }
            let att = out.attention.value();
            for (e, (&s, &t)) in edges.src.iter().zip(edges.dst.iter()).enumerate() {
                for (head, a) in alpha.iter().enumerate() {
                    dev.diff(att.get(e, head), a[t][s]);
                }
            }
        }
    }
    Ok(dev.check("sparse attention vs dense masked attention", seeds as usize, EXACT))
}

fn estimator(store: &mut ParamStore, d: usize, c: usize, rng: &mut ChaCha8Rng) -> MiEstimator {
    let config = MiConfig { projection_dim: 16, temperature: 0.1, queue_capacity: 32, class_queue_capacity: 8 };
    MiEstimator::new(store, "mi", d, c, config, rng)
}

/// `mi_loss` against [`contrastive_mi`] on random inputs and queues.
pub fn mi_equivalence(seeds: u64) -> Result<Check, ModelError> {
    let mut dev = Deviation::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut est = estimator(&mut store, 12, 1, &mut rng);
        let k = rng.random_range(1..=32);
        let queue = unit_rows(&mut rng, k, 16);
        est.queue.push_rows(queue.iter().map(Vec::as_slice));
        let b = rng.random_range(1..=10);
        let (xc, xo) = (rand_matrix(&mut rng, b, 12, 1.0), rand_matrix(&mut rng, b, 12, 1.0));
        let tape = Tape::inference();
        let out = est.mi_loss(&tape, &store, tape.constant(xc.clone()), tape.constant(xo.clone()))?;
        let fc = project(&est.f_c, &store, &xc);
        let fo = project(&est.f_o, &store, &xo);
        dev.diff(out.loss.value().item(), contrastive_mi(&fc, &fo, &queue, 0.1));
    }
    Ok(dev.check("mi_loss vs straight-line estimator", seeds as usize, EXACT))
}

/// `conditional_mi_loss` against the per-class average of [`contrastive_mi`]
/// over the classes present in the batch.
pub fn conditional_mi_equivalence(seeds: u64) -> Result<Check, ModelError> {
    let mut dev = Deviation::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(1..=3);
        let mut store = ParamStore::new();
        let mut est = estimator(&mut store, 6, c, &mut rng);
        let queues: Vec<Vec<Vec<f64>>> = (0..c)
            .map(|_| {
                let k = rng.random_range(1..=8);
                unit_rows(&mut rng, k, 16)
            })
            .collect();
        for (q, rows) in est.class_queues.iter_mut().zip(&queues) {
            q.push_rows(rows.iter().map(Vec::as_slice));
        }
        let b = rng.random_range(1..=12);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let (xc, xo) = (rand_matrix(&mut rng, b, 6, 1.0), rand_matrix(&mut rng, b, 6, 1.0));
        let tape = Tape::inference();
        let out = est.conditional_mi_loss(&tape, &store, tape.constant(xc.clone()), tape.constant(xo.clone()), &labels)?;
        let fc = project(&est.f_c, &store, &xc);
        let fo = project(&est.f_o, &store, &xo);
        let mut terms = Vec::new();
        for (k, queue) in queues.iter().enumerate() {
            let rows: Vec<usize> = (0..b).filter(|&i| labels[i] == k).collect();
            if rows.is_empty() {
                continue;
            }
            let pick = |v: &[Vec<f64>]| rows.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
            terms.push(contrastive_mi(&pick(&fc), &pick(&fo), queue, 0.1));
        }
        let expected = terms.iter().sum::<f64>() / terms.len() as f64;
        dev.diff(out.loss.value().item(), expected);
    }
    Ok(dev.check("conditional_mi_loss vs straight-line estimator", seeds as usize, EXACT))
}

fn decode(mut code: usize, n: usize, c: usize) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let v = code % c;
            code /= c;
            v
        })
        .collect()
}

/// `macro_f1` against [`f1_by_ratios`] for every prediction and label vector
/// with at most 6 nodes and 3 classes.
pub fn macro_f1_exhaustive() -> Result<Check, ModelError> {
    let mut dev = Deviation::default();
    let mut trials = 0;
    for c in 1..=3usize {
        for n in 1..=6usize {
            let total = c.pow(n as u32);
            for pc in 0..total {
                let pred = decode(pc, n, c);
                for lc in 0..total {
                    let label = decode(lc, n, c);
                    let expected = (0..c).map(|k| f1_by_ratios(&pred, &label, c, k)).sum::<f64>() / c as f64;
                    dev.diff(macro_f1(&pred, &label, c)?, expected);
                    trials += 1;
                }
            }
        }
    }
    Ok(dev.check("macro_f1 vs confusion-matrix brute force", trials, 1e-12))
}

fn oracle_config(in_dim: usize, classes: usize, seed: u64) -> ModelConfig {
    let mut c = ModelConfig::new(in_dim, classes);
    c.heads = 2;
    c.head_dim = 4;
    c.mi.projection_dim = 6;
    c.mi.queue_capacity = 32;
    c.mi.class_queue_capacity = 16;
    c.sample_cap = 16;
    c.seed = seed;
    c
}

fn param<'a>(m: &'a CcagnnModel, name: &str) -> Result<&'a Tensor, ModelError> {
    let id = m.store().find(name).ok_or_else(|| ModelError::Config(format!("no parameter {name}")))?;
    Ok(m.store().value(id))
}

/// Fused logits of the full model against a recomputation from the gated
/// embeddings: `α = σ(clamp([x_c ‖ x_o] w + b))`, `z = α x_c + (1 − α) x_o`,
/// logits `= z W + b`.
pub fn fusion_equivalence(seeds: u64) -> Result<Check, ModelError> {
    let mut dev = Deviation::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=15);
        let c = rng.random_range(2..=4);
        let g = random_graph(&mut rng, n, 6, c, 0.3);
        let model = CcagnnModel::new(oracle_config(6, c, seed))?;
        let tape = Tape::inference();
        let out = model.forward(&tape, model.store(), &g, false, 0)?;
        let (xc, xo) = (out.pass.causal.value(), out.pass.noncausal.value());
        let (wf, bf) = (param(&model, "fusion.weight")?, param(&model, "fusion.bias")?);
        let (wc, bc) = (param(&model, "classifier.weight")?, param(&model, "classifier.bias")?);
        let mut expected = Vec::new();
        for i in 0..n {
            let cat: Vec<f64> = xc.row(i).iter().chain(xo.row(i)).copied().collect();
            let a = sigmoid(affine(&cat, wf, bf)[0].clamp(-MAX_LOGIT, MAX_LOGIT));
            let z: Vec<f64> = xc.row(i).iter().zip(xo.row(i)).map(|(c, o)| a * c + (1.0 - a) * o).collect();
            expected.extend(affine(&z, wc, bc));
        }
        dev.diffs(out.logits.fusion.value().data(), &expected);
    }
    Ok(dev.check("fused logits vs straight-line recomputation", seeds as usize, EXACT))
}

/// Counterfactual logits against `z_i = a x_c[π(i)] + (1 − a) x_o[i]`,
/// logits `= z W + b`, with `a = σ(θ)` for a random intervention parameter θ.
pub fn intervention_equivalence(seeds: u64) -> Result<Check, ModelError> {
    let mut dev = Deviation::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(2..=4);
        let mut model = CcagnnModel::new(oracle_config(5, c, seed))?;
        let theta = rng.random_range(-3.0..3.0);
        let id = model.store().find("alpha_int").ok_or_else(|| ModelError::Config("no alpha_int".into()))?;
        model.store_mut().value_mut(id).data_mut()[0] = theta;
        let n = rng.random_range(1..=12);
        let d = model.config().hidden();
        let (xc, xo) = (rand_matrix(&mut rng, n, d, 1.0), rand_matrix(&mut rng, n, d, 1.0));
        let perm = crate::model::permutation(n, seed);
        let tape = Tape::inference();
        let (logits, z, _) = model.counterfactual_intervene(
            &tape,
            model.store(),
            tape.constant(xc.clone()),
            tape.constant(xo.clone()),
            &perm,
        )?;
        let a = sigmoid(theta);
        let (wc, bc) = (param(&model, "classifier.weight")?, param(&model, "classifier.bias")?);
        let mut z_exp = Vec::new();
        let mut l_exp = Vec::new();
        for i in 0..n {
            let row: Vec<f64> = xc.row(perm[i]).iter().zip(xo.row(i)).map(|(c, o)| a * c + (1.0 - a) * o).collect();
            l_exp.extend(affine(&row, wc, bc));
            z_exp.extend(row);
        }
        dev.diffs(z.value().data(), &z_exp);
        dev.diffs(logits.value().data(), &l_exp);
    }
    Ok(dev.check("counterfactual logits vs straight-line recomputation", seeds as usize, EXACT))
}

/// Every oracle comparison with `seeds` random trials each.
pub fn all(seeds: u64) -> Result<Vec<Check>, ModelError> {
    Ok(vec![
        gat_equivalence(seeds)?,
        mi_equivalence(seeds)?,
        conditional_mi_equivalence(seeds)?,
        macro_f1_exhaustive()?,
        fusion_equivalence(seeds)?,
        intervention_equivalence(seeds)?,
    ])
}
