
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::Graph;
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::verify::oracles::{self, dot};
use crate::verify::unit_rows;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn random_graph(r: &mut ChaCha8Rng, n: usize, d: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && r.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    Graph::new("rand", rand_matrix(r, n, d), vec![0; n], 1, edges, true).unwrap().add_self_loops()
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[test]
fn sparse_attention_matches_dense_oracle() {
    let check = oracles::gat_equivalence(50).unwrap();
    assert!(check.passed(), "max deviation {}", check.max_deviation);
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = rng(4);
    let g = random_graph(&mut r, 15, 4, 0.3);
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "gat", 4, 4, 3, true, AttentionKind::GatV2, &mut r);
    let tape = Tape::new();
    let edges = g.edge_index();
    let att = layer.forward(&tape, &store, tape.constant(g.features().clone()), &edges).unwrap().attention.value();
    for i in 0..15 {
        for h in 0..3 {
            let total: f64 = (0..edges.dst.len()).filter(|&e| edges.dst[e] == i).map(|e| att.get(e, h)).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn lone_self_loop_gives_elu_of_transform() {
    let mut r = rng(1);
    let g = Graph::new("one", Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]), vec![0], 1, vec![], true)
        .unwrap()
        .add_self_loops();
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "gat", 3, 2, 1, true, AttentionKind::GatV2, &mut r);
    let tape = Tape::new();
    let out = layer.forward(&tape, &store, tape.constant(g.features().clone()), &g.edge_index()).unwrap();
    assert_eq!(out.attention.value().data(), &[1.0]);
    let w = store.value(layer.weight());
    for k in 0..2 {
        let wx: f64 = (0..3).map(|p| g.features().get(0, p) * w.get(p, k)).sum();
        assert!((out.h.value().get(0, k) - elu(wx)).abs() < 1e-14);
    }
}

#[test]
fn identical_neighbours_share_attention_equally() {
    let mut r = rng(2);
    let features = Tensor::matrix(3, 2, vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7]);
    let g = Graph::new("sym", features, vec![0; 3], 1, vec![(1, 0), (2, 0)], true).unwrap().add_self_loops();
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "gat", 2, 4, 2, true, AttentionKind::GatV2, &mut r);
    let tape = Tape::new();
    let edges = g.edge_index();
    let att = layer.forward(&tape, &store, tape.constant(g.features().clone()), &edges).unwrap().attention.value();
    for e in (0..edges.dst.len()).filter(|&e| edges.dst[e] == 0) {
        for h in 0..2 {
            assert!((att.get(e, h) - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

#[test]
fn missing_self_loops_is_a_contract_error() {
    let mut r = rng(3);
    let g = Graph::new("bare", rand_matrix(&mut r, 3, 2), vec![0; 3], 1, vec![(0, 1)], true).unwrap();
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "gat", 2, 2, 1, true, AttentionKind::GatV2, &mut r);
    let tape = Tape::new();
    let res = layer.forward(&tape, &store, tape.constant(g.features().clone()), &g.edge_index());
    assert!(matches!(res, Err(crate::tensor::TensorError::Contract(_))));
}

#[test]
fn attention_importance_counts_self_attention() {
    let mut r = rng(9);
    // node 2 is isolated apart from its self-loop
    let g = Graph::new("iso", rand_matrix(&mut r, 3, 2), vec![0; 3], 1, vec![(0, 1), (1, 0)], true)
        .unwrap()
        .add_self_loops();
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "gat", 2, 2, 2, true, AttentionKind::GatV2, &mut r);
    let tape = Tape::new();
    let edges = g.edge_index();
    let att = layer.forward(&tape, &store, tape.constant(g.features().clone()), &edges).unwrap().attention.value();
    let imp = attention_importance(&edges, &att);
    assert!((imp[2] - 1.0).abs() < 1e-15);
    assert!(imp[0] > 0.0 && imp[0] < 1.0);
}

#[test]
fn zero_gate_splits_in_half() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let gate = FeatureGate::new(&mut store, "gate", 3, &mut r);
    store.value_mut(gate.weight).data_mut().fill(0.0);
    let tape = Tape::new();
    let h = tape.constant(rand_matrix(&mut r, 4, 3));
    let d = gate.disentangle(&tape, &store, h).unwrap();
    assert!(d.gate.value().data().iter().all(|&g| g == 0.5));
    for ((c, o), x) in d.causal.value().data().iter().zip(d.noncausal.value().data()).zip(h.value().data()) {
        assert_eq!(*c, x / 2.0);
        assert_eq!(*o, x / 2.0);
    }
}

#[test]
fn identity_gate_scalar_example() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let gate = FeatureGate::new(&mut store, "gate", 2, &mut r);
    *store.value_mut(gate.weight) = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let tape = Tape::new();
    let d = gate.disentangle(&tape, &store, tape.constant(Tensor::from_rows(&[vec![2.0, -2.0]]))).unwrap();
    let g = d.gate.value();
    let c = d.causal.value();
    // sigmoid(±2) and 2·sigmoid(2), −2·sigmoid(−2)
    assert!((g.data()[0] - 0.880797).abs() < 1e-6 && (g.data()[1] - 0.119203).abs() < 1e-6);
    assert!((c.data()[0] - 1.761594).abs() < 1e-6 && (c.data()[1] + 0.238406).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn gate_range_and_split_sum(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let gate = FeatureGate::new(&mut store, "gate", 6, &mut r);
        let tape = Tape::new();
        let x = rand_matrix(&mut r, 7, 6).map(|v| v * scale);
        let d = gate.disentangle(&tape, &store, tape.constant(x.clone())).unwrap();
        prop_assert!(d.gate.value().data().iter().all(|&g| g > 0.0 && g < 1.0));
        for ((c, o), v) in d.causal.value().data().iter().zip(d.noncausal.value().data()).zip(x.data()) {
            let sum = c + o;
            prop_assert!((sum - v).abs() <= f64::EPSILON * v.abs(), "{} vs {}", sum, v);
        }
    }
}

#[test]
fn queue_is_fifo_and_bounded() {
    let mut q = EmbeddingQueue::new(3);
    let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
    q.push_rows(rows.iter().map(Vec::as_slice));
    assert_eq!(q.len(), 3);
    assert_eq!(q.rows().map(|r| r[0]).collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
}

fn estimator(store: &mut ParamStore, d: usize, c: usize, r: &mut ChaCha8Rng) -> MiEstimator {
    let config = MiConfig { projection_dim: 16, temperature: 0.1, queue_capacity: 32, class_queue_capacity: 8 };
    MiEstimator::new(store, "mi", d, c, config, r)
}

#[test]
fn mi_loss_matches_straight_line_oracle() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let mut est = estimator(&mut store, 16, 1, &mut r);
    let queue = unit_rows(&mut r, 32, 16);
    est.queue.push_rows(queue.iter().map(Vec::as_slice));
    let (xc, xo) = (rand_matrix(&mut r, 8, 16), rand_matrix(&mut r, 8, 16));
    let tape = Tape::new();
    let out = est.mi_loss(&tape, &store, tape.constant(xc.clone()), tape.constant(xo.clone())).unwrap();
    let fc = oracles::project(&est.f_c, &store, &xc);
    let fo = oracles::project(&est.f_o, &store, &xo);
    let expected = oracles::contrastive_mi(&fc, &fo, &queue, 0.1);
    assert!((out.loss.value().item() - expected).abs() < 1e-10, "{} vs {expected}", out.loss.value().item());
    assert_eq!(est.queue.len(), 32, "mi_loss must not touch the queue");
}

#[test]
fn mi_loss_needs_a_seeded_queue() {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let est = estimator(&mut store, 4, 1, &mut r);
    let tape = Tape::new();
    let x = tape.constant(rand_matrix(&mut r, 2, 4));
    assert!(est.mi_loss(&tape, &store, x, x).is_err());
}

/// Projections replaced by "pick the first p coordinates" so similarities can
/// be set by hand.
fn passthrough_estimator(store: &mut ParamStore, d: usize, c: usize, r: &mut ChaCha8Rng) -> MiEstimator {
    let est = estimator(store, d, c, r);
    for proj in [&est.f_c, &est.f_o] {
        for (l, scale) in [(&proj.first, 1e-3), (&proj.second, 1e3)] {
            let w = store.value_mut(l.weight);
            let (rows, cols) = (w.rows(), w.cols());
            for i in 0..rows {
                for j in 0..cols {
                    w.data_mut()[i * cols + j] = if i == j { scale } else { 0.0 };
                }
            }
        }
    }
    est
}

#[test]
fn orthogonal_embeddings_give_zero_mi() {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let mut est = passthrough_estimator(&mut store, 16, 1, &mut r);
    // causal along e0, non-causal along e1, queue along e2/e3
    let mut q = vec![vec![0.0; 16]; 4];
    q[0][2] = 1.0;
    q[1][3] = 1.0;
    q[2][2] = -1.0;
    q[3][0] = 1.0;
    est.queue.push_rows(q.iter().map(Vec::as_slice));
    let mut xc = Tensor::zeros(&[3, 16]);
    let mut xo = Tensor::zeros(&[3, 16]);
    for i in 0..3 {
        xc.data_mut()[i * 16] = 1.0 + i as f64;
        xo.data_mut()[i * 16 + 1] = 2.0;
    }
    let tape = Tape::new();
    let loss = est.mi_loss(&tape, &store, tape.constant(xc), tape.constant(xo)).unwrap().loss.value().item();
    assert!(loss.abs() < 1e-12, "{loss}");
}

#[test]
fn single_pair_single_negative_is_difference_of_similarities() {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let mut est = passthrough_estimator(&mut store, 16, 1, &mut r);
    let mut xc = Tensor::zeros(&[1, 16]);
    let mut xo = Tensor::zeros(&[1, 16]);
    xc.data_mut()[0] = 1.0;
    xo.data_mut()[0] = 0.6;
    xo.data_mut()[1] = 0.8;
    let mut q = vec![0.0; 16];
    q[1] = 1.0;
    est.queue.push_rows([q.as_slice()]);
    let tape = Tape::new();
    let out = est.mi_loss(&tape, &store, tape.constant(xc), tape.constant(xo)).unwrap();
    let fc = out.causal_proj.row(0).to_vec();
    let fo = oracles::project(&est.f_o, &store, &Tensor::matrix(1, 16, {
        let mut v = vec![0.0; 16];
        v[0] = 0.6;
        v[1] = 0.8;
        v
    }));
    let t_pos = dot(&fc, &fo[0]) / 0.1;
    let t_neg = dot(&q, &fo[0]) / 0.1;
    assert!((out.loss.value().item() - (t_pos - t_neg)).abs() < 1e-9);
    // hand values: passthrough projections leave these unit vectors (nearly) intact
    assert!((t_pos - 6.0).abs() < 1e-3 && (t_neg - 8.0).abs() < 1e-3);
}

#[test]
fn conditional_mi_single_class_reduces_to_unconditional() {
    let mut r = rng(16);
    let mut store = ParamStore::new();
    let mut est = estimator(&mut store, 6, 3, &mut r);
    let queue = unit_rows(&mut r, 5, 16);
    est.class_queues[1].push_rows(queue.iter().map(Vec::as_slice));
    est.queue.push_rows(queue.iter().map(Vec::as_slice));
    let (xc, xo) = (rand_matrix(&mut r, 4, 6), rand_matrix(&mut r, 4, 6));
    let tape = Tape::new();
    let (c, o) = (tape.constant(xc), tape.constant(xo));
    let cond = est.conditional_mi_loss(&tape, &store, c, o, &[1, 1, 1, 1]).unwrap();
    let plain = est.mi_loss(&tape, &store, c, o).unwrap();
    assert!((cond.loss.value().item() - plain.loss.value().item()).abs() < 1e-12);
    assert!(cond.skipped.is_empty());
}

#[test]
fn conditional_mi_two_classes_matches_oracle() {
    let mut r = rng(17);
    let mut store = ParamStore::new();
    let mut est = estimator(&mut store, 6, 2, &mut r);
    let q0 = unit_rows(&mut r, 8, 16);
    let q1 = unit_rows(&mut r, 5, 16);
    est.class_queues[0].push_rows(q0.iter().map(Vec::as_slice));
    est.class_queues[1].push_rows(q1.iter().map(Vec::as_slice));
    let (xc, xo) = (rand_matrix(&mut r, 7, 6), rand_matrix(&mut r, 7, 6));
    let labels = [0, 1, 1, 0, 0, 1, 0];
    let tape = Tape::new();
    let out = est.conditional_mi_loss(&tape, &store, tape.constant(xc.clone()), tape.constant(xo.clone()), &labels).unwrap();
    let fc = oracles::project(&est.f_c, &store, &xc);
    let fo = oracles::project(&est.f_o, &store, &xo);
    let pick = |v: &Vec<Vec<f64>>, k: usize| -> Vec<Vec<f64>> {
        labels.iter().enumerate().filter(|(_, &l)| l == k).map(|(i, _)| v[i].clone()).collect()
    };
    let expected = (oracles::contrastive_mi(&pick(&fc, 0), &pick(&fo, 0), &q0, 0.1) + oracles::contrastive_mi(&pick(&fc, 1), &pick(&fo, 1), &q1, 0.1)) / 2.0;
    assert!((out.loss.value().item() - expected).abs() < 1e-10);
}

#[test]
fn conditional_mi_skips_unseeded_class() {
    let mut r = rng(18);
    let mut store = ParamStore::new();
    let mut est = estimator(&mut store, 4, 2, &mut r);
    est.class_queues[0].push_rows(unit_rows(&mut r, 3, 16).iter().map(Vec::as_slice));
    let tape = Tape::new();
    let x = tape.constant(rand_matrix(&mut r, 3, 4));
    let out = est.conditional_mi_loss(&tape, &store, x, x, &[0, 1, 0]).unwrap();
    assert_eq!(out.skipped, vec![1]);
    assert!(est.conditional_mi_loss(&tape, &store, x, x, &[1, 1, 1]).is_err());
}

#[test]
fn conditional_mi_all_orthogonal_is_zero() {
    let mut r = rng(19);
    let mut store = ParamStore::new();
    let mut est = passthrough_estimator(&mut store, 16, 2, &mut r);
    let mut q = vec![0.0; 16];
    q[2] = 1.0;
    est.class_queues[0].push_rows([q.as_slice()]);
    est.class_queues[1].push_rows([q.as_slice()]);
    let mut xc = Tensor::zeros(&[2, 16]);
    let mut xo = Tensor::zeros(&[2, 16]);
    xc.data_mut()[0] = 1.0;
    xc.data_mut()[16] = 1.0;
    xo.data_mut()[1] = 1.0;
    xo.data_mut()[17] = 1.0;
    let tape = Tape::new();
    let out = est.conditional_mi_loss(&tape, &store, tape.constant(xc), tape.constant(xo), &[0, 1]).unwrap();
    assert!(out.loss.value().item().abs() < 1e-12);
}

#[test]
fn orthogonality_examples() {
    let tape = Tape::new();
    let c = |rows: &[Vec<f64>]| tape.constant(Tensor::from_rows(rows));
    let ortho = orthogonality_loss(c(&[vec![1.0, 0.0], vec![0.0, 3.0]]), c(&[vec![0.0, 2.0], vec![-1.0, 0.0]])).unwrap();
    assert_eq!(ortho.value().item(), 0.0);
    let same = orthogonality_loss(c(&[vec![1.0, 2.0]]), c(&[vec![1.0, 2.0]])).unwrap();
    assert!((same.value().item() - 1.0).abs() < 1e-15);
    let half = orthogonality_loss(c(&[vec![1.0, 0.0]]), c(&[vec![1.0, 1.0]])).unwrap();
    assert!((half.value().item() - 0.5).abs() < 1e-15);
    let zero = orthogonality_loss(c(&[vec![0.0, 0.0]]), c(&[vec![1.0, 1.0]])).unwrap();
    assert_eq!(zero.value().item(), 0.0);
}

#[test]
fn fusion_gate_examples() {
    let mut r = rng(20);
    let mut store = ParamStore::new();
    let fusion = FusionGate::new(&mut store, "fusion", 3, &mut r);
    let (xc, xo) = (rand_matrix(&mut r, 5, 3), rand_matrix(&mut r, 5, 3));
    let tape = Tape::new();
    let (c, o) = (tape.constant(xc.clone()), tape.constant(xo.clone()));

    let fused = fusion.fuse(&tape, &store, c, o).unwrap();
    let (z, a) = (fused.z.value(), fused.alpha.value());
    for i in 0..5 {
        let ai = a.get(i, 0);
        assert!(ai > 0.0 && ai < 1.0);
        for k in 0..3 {
            assert_eq!(z.get(i, k), xc.get(i, k) * ai + xo.get(i, k) * (1.0 - ai));
        }
    }

    store.value_mut(fusion.weight).data_mut().fill(0.0);
    let half = fusion.fuse(&tape, &store, c, o).unwrap();
    assert!(half.alpha.value().data().iter().all(|&v| v == 0.5));
    for ((zv, cv), ov) in half.z.value().data().iter().zip(xc.data()).zip(xo.data()) {
        assert!((zv - (cv + ov) / 2.0).abs() < 1e-15);
    }

    store.value_mut(fusion.bias).data_mut()[0] = 40.0;
    let near_one = fusion.fuse(&tape, &store, c, o).unwrap();
    assert!(near_one.alpha.value().data().iter().all(|&v| v < 1.0));
    for (zv, cv) in near_one.z.value().data().iter().zip(xc.data()) {
        assert!((zv - cv).abs() < 1e-12);
    }
}

#[test]
fn mi_estimator_separates_independent_from_identical() {
    // τ = 1 here: at τ = 0.1 the queue term's Jensen gap (≈ Var(T)/2) alone
    // is far larger than the ±0.1 band for a 32-dimensional projection.
    let mut r = rng(21);
    let mut store = ParamStore::new();
    let config = MiConfig { projection_dim: 32, temperature: 1.0, queue_capacity: 256, class_queue_capacity: 8 };
    let mut est = MiEstimator::new(&mut store, "mi", 16, 1, config, &mut r);
    let gauss = |r: &mut ChaCha8Rng| {
        Tensor::matrix(32, 16, (0..32 * 16).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect())
    };
    let (mut indep, mut same) = (0.0, 0.0);
    let batches = 200;
    for b in 0..batches {
        let (xc, xo) = (gauss(&mut r), gauss(&mut r));
        let tape = Tape::inference();
        let c = tape.constant(xc);
        if est.queue.is_empty() {
            let fc = est.project(&tape, &store, c, c).unwrap().0.value();
            est.enqueue(&fc, &(0..32).collect::<Vec<_>>());
        }
        let out = est.mi_loss(&tape, &store, c, tape.constant(xo)).unwrap();
        indep += out.loss.value().item();
        // f_o := f_c on the same inputs
        let (fc, _) = est.project(&tape, &store, c, c).unwrap();
        let q = est.queue.to_tensor().unwrap();
        let pos = fc.mul(fc).unwrap().sum_rows().mean().value().item();
        let neg: f64 = (0..32)
            .map(|i| {
                let row = fc.value().row(i).to_vec();
                let m = (0..q.rows()).map(|k| dot(q.row(k), &row).exp()).sum::<f64>() / q.rows() as f64;
                m.ln()
            })
            .sum::<f64>()
            / 32.0;
        same += pos - neg;
        est.enqueue(&out.causal_proj, &(0..32).collect::<Vec<_>>());
        let _ = b;
    }
    indep /= batches as f64;
    same /= batches as f64;
    assert!(indep.abs() < 0.1, "independent mean {indep}");
    assert!(same > 0.0 && same - indep >= 0.5, "identical {same} vs independent {indep}");
}

#[test]
fn layer_gradients_pass_finite_differences() {
    let cases = crate::verify::layer_suite(30, 1e-4).unwrap();
    assert_eq!(cases.len(), 8);
    for case in cases {
        assert!(case.passed, "{case:?}");
    }
}
