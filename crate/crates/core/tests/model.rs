use std::collections::HashSet;

use ccagnn_core::graph::{synth_confounded, Graph, SyntheticSpec};
use ccagnn_core::layers::MAX_LOGIT;
use ccagnn_core::model::*;
use ccagnn_core::tensor::{sigmoid, Tape, Tensor};
use ccagnn_core::verify::{model_suite, random_graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(in_dim: usize, classes: usize, seed: u64) -> ModelConfig {
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

fn ten_node_graph() -> Graph {
    let spec = SyntheticSpec { n: 10, d_causal: 3, d_spurious: 3, p_in: 0.4, p_out: 0.1, seed: 4, ..Default::default() };
    synth_confounded(&spec).unwrap().train.add_self_loops()
}

fn known_all(g: &Graph) -> Vec<Option<usize>> {
    g.labels().iter().map(|&y| Some(y)).collect()
}

fn param<'a>(m: &'a CcagnnModel, name: &str) -> &'a Tensor {
    m.store().value(m.store().find(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|k| x.iter().enumerate().map(|(p, v)| v * w.get(p, k)).sum::<f64>() + b.data()[k]).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn fusion_logits_match_straight_line_recomputation() {
    let g = ten_node_graph();
    let mut model = CcagnnModel::new(small_config(6, 2, 11)).unwrap();
    model.prepare(&g, &known_all(&g)).unwrap();
    let tape = Tape::inference();
    let out = model.forward(&tape, model.store(), &g, false, 0).unwrap();
    let (xc, xo) = (out.pass.causal.value(), out.pass.noncausal.value());
    let (wf, bf) = (param(&model, "fusion.weight"), param(&model, "fusion.bias"));
    let (wc, bc) = (param(&model, "classifier.weight"), param(&model, "classifier.bias"));
    let mut expected = Vec::new();
    for i in 0..g.num_nodes() {
        let cat: Vec<f64> = xc.row(i).iter().chain(xo.row(i)).copied().collect();
        let a = sigmoid(dense(&cat, wf, bf)[0].clamp(-MAX_LOGIT, MAX_LOGIT));
        let z: Vec<f64> = xc.row(i).iter().zip(xo.row(i)).map(|(c, o)| a * c + (1.0 - a) * o).collect();
        expected.extend(dense(&z, wc, bc));
    }
    assert!(max_diff(out.logits.fusion.value().data(), &expected) < 1e-10);
    assert!(max_diff(model.predict(&g).unwrap().data(), &expected) < 1e-10);
}

#[test]
fn intervention_matches_straight_line_recomputation() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut model = CcagnnModel::new(small_config(5, 3, 8)).unwrap();
    let alpha_id = model.store().find("alpha_int").unwrap();
    model.store_mut().value_mut(alpha_id).data_mut()[0] = 0.4;
    let d = model.config().hidden();
    let rand = |r: &mut ChaCha8Rng| Tensor::matrix(6, d, (0..6 * d).map(|_| r.random_range(-1.0..1.0)).collect());
    let (xc, xo) = (rand(&mut r), rand(&mut r));
    let perm = [2, 0, 1, 5, 3, 4];
    let tape = Tape::new();
    let (logits, z, alpha) = model
        .counterfactual_intervene(&tape, model.store(), tape.constant(xc.clone()), tape.constant(xo.clone()), &perm)
        .unwrap();
    let a = sigmoid(0.4);
    assert!((alpha.value().item() - a).abs() < 1e-15);
    let (wc, bc) = (param(&model, "classifier.weight"), param(&model, "classifier.bias"));
    let mut z_exp = Vec::new();
    let mut l_exp = Vec::new();
    for i in 0..6 {
        let row: Vec<f64> = xc.row(perm[i]).iter().zip(xo.row(i)).map(|(c, o)| a * c + (1.0 - a) * o).collect();
        l_exp.extend(dense(&row, wc, bc));
        z_exp.extend(row);
    }
    assert!(max_diff(z.value().data(), &z_exp) < 1e-10);
    assert!(max_diff(logits.value().data(), &l_exp) < 1e-10);
}

#[test]
fn zero_intervention_gate_ignores_the_permutation() {
    for seed in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut model = CcagnnModel::new(small_config(4, 2, seed)).unwrap();
        model.alpha_int_override = Some(0.0);
        let n = r.random_range(2..12);
        let d = model.config().hidden();
        let rand = |r: &mut ChaCha8Rng| Tensor::matrix(n, d, (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect());
        let (xc, xo) = (rand(&mut r), rand(&mut r));
        let tape = Tape::inference();
        let run = |perm: &[usize]| {
            let (l, _, _) = model
                .counterfactual_intervene(&tape, model.store(), tape.constant(xc.clone()), tape.constant(xo.clone()), perm)
                .unwrap();
            l.value().data().to_vec()
        };
        let identity: Vec<usize> = (0..n).collect();
        assert_eq!(run(&identity), run(&permutation(n, seed)), "seed {seed}");
    }
}

#[test]
fn permutation_preserves_the_multiset() {
    for seed in 0..100u64 {
        let n = (seed as usize % 37) + 1;
        let mut p = permutation(n, seed);
        p.sort_unstable();
        assert_eq!(p, (0..n).collect::<Vec<_>>());
    }
    assert_eq!(permutation(50, 9), permutation(50, 9));
    assert_ne!(permutation(50, 9), permutation(50, 10));
}

#[test]
fn inference_forward_is_deterministic() {
    let g = ten_node_graph();
    let model = CcagnnModel::new(small_config(6, 2, 1)).unwrap();
    assert_eq!(model.predict(&g).unwrap(), model.predict(&g).unwrap());
}

#[test]
fn zero_rate_augmentation_makes_training_forward_equal_inference() {
    let g = ten_node_graph();
    let mut config = small_config(6, 2, 5);
    config.augment = AugmentationConfig {
        noise_scale: 0.0,
        mask_rate: 0.0,
        edge_drop_rate: 0.0,
        edge_add_rate: 0.0,
        ..AugmentationConfig::default()
    };
    assert!(config.augment.is_identity());
    let model = CcagnnModel::new(config).unwrap();
    let tape = Tape::new();
    let train = model.forward(&tape, model.store(), &g, true, 17).unwrap();
    assert!(train.clean_causal.is_none());
    assert_eq!(train.logits.fusion.value().data(), model.predict(&g).unwrap().data());
}

#[test]
fn noise_is_gaussian_with_the_requested_scale() {
    let (rows, cols) = (400, 25);
    let importance: Vec<f64> = (0..rows).map(|i| 0.5 + (i % 4) as f64 * 0.5).collect();
    let t = noise_term(rows, cols, &importance, 0.3, 77);
    // standardized entries ~ N(0,1): their sum of squares is χ² with rows·cols dof
    let k = (rows * cols) as f64;
    let mut chi2 = 0.0;
    for (i, imp) in importance.iter().enumerate() {
        chi2 += t.row(i).iter().map(|v| (v / (0.3 * imp)).powi(2)).sum::<f64>();
    }
    assert!((chi2 - k).abs() < 4.0 * (2.0 * k).sqrt(), "χ² = {chi2} for {k} dof");
    let h = Tensor::zeros(&[rows, cols]);
    assert_eq!(augment_noise(&h, &importance, 0.0, 77), h);
    assert_eq!(augment_noise(&h, &importance, 0.3, 77), t);
}

#[test]
fn mask_rate_half_masks_about_half() {
    let m = mask_matrix(100, 100, None, 0.5, 3);
    let frac = m.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e4;
    assert!((0.45..=0.55).contains(&frac), "{frac}");
    assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn mask_follows_gradient_importance() {
    let grad = [0.0, 0.0, 2.0, -1.0, 0.5, 0.0, 0.0, 0.0, 0.0];
    let imp = gradient_importance(&grad, 3, 3);
    assert_eq!(imp.data(), &[0.0, 0.0, 1.0, 1.0, 0.5, 0.0, 1.0, 1.0, 1.0]);
    let m = mask_matrix(3, 3, Some(&imp), 1.0, 0);
    for k in [0, 1, 5] {
        assert_eq!(m.data()[k], 1.0);
    }
    for k in [2, 3, 6, 7, 8] {
        assert_eq!(m.data()[k], 0.0);
    }
}

#[test]
fn edge_drop_rate_matches_binomial_band() {
    let mut edges = Vec::new();
    let (n, target) = (400, 10556);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut seen = HashSet::new();
    while edges.len() < target {
        let (s, d) = (r.random_range(0..n), r.random_range(0..n));
        if s != d && seen.insert((s, d)) {
            edges.push((s, d));
        }
    }
    let g = Graph::new("dense", Tensor::zeros(&[n, 1]), vec![0; n], 1, edges, true).unwrap();
    let out = augment_edges(&g, 0.1, 0.0, 12);
    let dropped = g.num_edges() - out.num_edges();
    assert!((950..=1160).contains(&dropped), "{dropped}");
}

#[test]
fn edge_augmentation_keeps_self_loops_and_adds_fresh_edges() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let g = random_graph(&mut r, 30, 2, 2, 0.1);
    let out = augment_edges(&g, 0.2, 0.3, 5);
    assert!(out.has_self_loops());
    let unique: HashSet<_> = out.edges().iter().collect();
    assert_eq!(unique.len(), out.num_edges());
    let non_loop = g.edges().iter().filter(|(s, d)| s != d).count();
    let original: HashSet<_> = g.edges().iter().collect();
    let added = out.edges().iter().filter(|e| !original.contains(e)).count();
    assert_eq!(added, (0.3 * non_loop as f64).round() as usize);
    assert_eq!(augment_edges(&g, 0.0, 0.0, 5), g);
}

fn loss_on(weights: LossWeights, epoch: usize) -> (LossBundle, LossWeights) {
    let g = ten_node_graph();
    let mut config = small_config(6, 2, 21);
    config.weights = weights;
    let mut model = CcagnnModel::new(config).unwrap();
    let mut known = known_all(&g);
    known[3] = None;
    known[8] = None;
    model.prepare(&g, &known).unwrap();
    let train: Vec<usize> = (0..10).filter(|&i| known[i].is_some()).collect();
    let ctx = StepContext { epoch, epochs: 5, known: &known, train_nodes: &train };
    let tape = Tape::new();
    let out = model.forward(&tape, model.store(), &g, true, epoch as u64).unwrap();
    let loss = model.total_loss(&tape, model.store(), &out, &ctx, epoch as u64).unwrap();
    assert_eq!(loss.total.value().item(), loss.bundle.total);
    (loss.bundle, weights)
}

#[test]
fn total_is_the_weighted_sum_of_components() {
    for epoch in [0, 2, 4] {
        let (b, w) = loss_on(LossWeights::default(), epoch);
        let by_hand = w.ce_causal * b.ce_causal
            + w.ce_fusion * b.ce_fusion
            + w.ce_intervention * b.ce_intervention
            + w.ce_noncausal * b.ce_noncausal
            + w.mi * b.mi
            + w.cond_mi * b.cond_mi
            + w.pred_mi * b.pred_mi
            + w.inv_mi * b.inv_mi
            + w.orth * b.orth
            + w.contrastive * b.contrastive
            + w.center * b.center
            + w.adaptive * b.adaptive
            + w.gate_conf * b.gate_conf;
        assert!((b.total - by_hand).abs() < 1e-10, "epoch {epoch}: {} vs {by_hand}", b.total);
        assert!((b.weighted_sum(&w) - b.total).abs() < 1e-10);
        // the ramp term is −(1 − t) times the ramped components
        let t = epoch as f64 / 4.0;
        let ramped = w.ce_intervention * b.ce_intervention
            + w.mi * b.mi
            + w.cond_mi * b.cond_mi
            + w.pred_mi * b.pred_mi
            + w.inv_mi * b.inv_mi;
        assert!((b.adaptive + (1.0 - t) * ramped).abs() < 1e-10);
    }
}

#[test]
fn fusion_weight_alone_reduces_total_to_fusion_cross_entropy() {
    let (b, _) = loss_on(LossWeights::supervised_only(), 1);
    assert!((b.total - b.ce_fusion).abs() < 1e-12);
    assert!(b.ce_fusion > 0.0);
}

#[test]
fn full_model_loss_passes_finite_differences() {
    let cases = model_suite(7, 1e-4).unwrap();
    assert_eq!(cases.len(), 1);
    assert!(cases[0].passed, "{:?}", cases[0]);
}

#[test]
fn checkpoint_round_trip_restores_predictions() {
    let g = ten_node_graph();
    let dir = tempfile::tempdir().unwrap();
    let mut model = CcagnnModel::new(small_config(6, 2, 13)).unwrap();
    let id = model.store().find("classifier.bias").unwrap();
    model.store_mut().value_mut(id).data_mut()[0] = 0.25;
    save_checkpoint(dir.path(), &model).unwrap();
    let meta = read_checkpoint_meta(dir.path()).unwrap();
    assert_eq!(meta.model, "ccagnn");
    assert_eq!(meta.num_values, model.store().numel());
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.params().flatten(), model.store().flatten());
    assert_eq!(loaded.logits(&g).unwrap(), model.predict(&g).unwrap());

    let plain = PlainGat::new(small_config(6, 2, 13)).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    save_checkpoint(dir2.path(), &plain).unwrap();
    assert_eq!(load_checkpoint(dir2.path()).unwrap().logits(&g).unwrap(), plain.logits(&g).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = CcagnnModel::new(small_config(6, 2, 13)).unwrap();
    save_checkpoint(dir.path(), &model).unwrap();
    let path = dir.path().join("params.f64");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let err = load_checkpoint(dir.path()).err().expect("truncated file must fail");
    assert!(err.to_string().contains("bytes"), "{err}");
}

#[test]
fn wrong_feature_width_is_a_dimension_error() {
    let g = ten_node_graph();
    let model = CcagnnModel::new(small_config(7, 2, 0)).unwrap();
    assert!(matches!(model.predict(&g), Err(ModelError::Dimension(_))));
}
