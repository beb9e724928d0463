use ccagnn_core::graph::{make_folds, synth_confounded, Graph, SyntheticSpec};
use ccagnn_core::model::ModelConfig;
use ccagnn_core::tensor::{ParamStore, Tensor};
use ccagnn_core::train::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn adam_with_zero_gradient_leaves_parameters_alone() {
    let mut store = ParamStore::new();
    let id = store.register("w", Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]));
    let mut adam = Adam::new(AdamConfig::default(), &store);
    for _ in 0..3 {
        adam.step(&mut store).unwrap();
    }
    assert_eq!(store.value(id).data(), &[0.5, -1.0, 2.0]);
    assert_eq!(adam.steps(), 3);
}

#[test]
fn adam_first_step_moves_by_learning_rate_against_the_gradient_sign() {
    let mut store = ParamStore::new();
    let id = store.register("w", Tensor::matrix(1, 2, vec![1.0, 1.0]));
    store.get_mut(id).grad.copy_from_slice(&[3.0, -0.02]);
    let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &store);
    adam.step(&mut store).unwrap();
    // m̂ = g and v̂ = g², so the step is lr · g / (|g| + eps)
    let expect = |g: f64| 1.0 - 0.1 * g / (g.abs() + 1e-8);
    let got = store.value(id).data();
    assert!((got[0] - expect(3.0)).abs() < 1e-15);
    assert!((got[1] - expect(-0.02)).abs() < 1e-15);
    assert_eq!(store.grad(id), &[0.0, 0.0]);
}

#[test]
fn adam_on_a_quadratic_matches_the_update_written_out() {
    let cfg = AdamConfig { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut store = ParamStore::new();
    let id = store.register("x", Tensor::scalar(1.0));
    let mut adam = Adam::new(cfg, &store);
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=10 {
        let g = 2.0 * store.value(id).item();
        store.get_mut(id).grad[0] = g;
        adam.step(&mut store).unwrap();

        let g = 2.0 * x;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        x -= 0.05 * mh / (vh.sqrt() + 1e-8);
        assert!((store.value(id).item() - x).abs() < 1e-12, "step {t}");
    }
    assert!(x < 1.0);
}

#[test]
fn adam_rejects_a_store_that_changed_shape() {
    let mut store = ParamStore::new();
    store.register("a", Tensor::zeros(&[2, 2]));
    let mut adam = Adam::new(AdamConfig::default(), &store);
    store.register("b", Tensor::zeros(&[1, 1]));
    assert!(adam.step(&mut store).is_err());
}

/// F1 of one class from precision and recall, with 0 for undefined ratios.
fn f1_by_ratios(pred: &[usize], label: &[usize], k: usize) -> f64 {
    let mut m = [[0usize; 3]; 3];
    for (&p, &y) in pred.iter().zip(label) {
        m[y][p] += 1;
    }
    let tp = m[k][k] as f64;
    let predicted: usize = (0..3).map(|y| m[y][k]).sum();
    let actual: usize = m[k].iter().sum();
    let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
    let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
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

#[test]
fn macro_f1_matches_confusion_matrix_brute_force_exhaustively() {
    for c in 2..=3usize {
        for n in 1..=6usize {
            let total = c.pow(n as u32);
            for pc in 0..total {
                let pred = decode(pc, n, c);
                for lc in 0..total {
                    let label = decode(lc, n, c);
                    let expected = (0..c).map(|k| f1_by_ratios(&pred, &label, k)).sum::<f64>() / c as f64;
                    let got = macro_f1(&pred, &label, c).unwrap();
                    assert!((got - expected).abs() < 1e-12, "{pred:?} {label:?}: {got} vs {expected}");
                }
            }
        }
    }
}

#[test]
fn macro_f1_examples() {
    assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
    assert_eq!(macro_f1(&[1, 0], &[0, 1], 2).unwrap(), 0.0);
    // class 0: tp 1, fp 1, fn 0 → 2/3; class 1: tp 1, fp 0, fn 1 → 2/3
    assert!((macro_f1(&[0, 0, 1], &[0, 1, 1], 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    // an absent class scores 0 and still counts in the mean
    assert_eq!(macro_f1(&[0, 0], &[0, 0], 2).unwrap(), 0.5);
    assert!(macro_f1(&[], &[], 2).is_err());
    assert!(macro_f1(&[2], &[0], 2).is_err());
}

#[test]
fn micro_and_weighted_f1_on_random_samples() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = r.random_range(1..40);
        let c = r.random_range(2..5);
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let label: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let acc = pred.iter().zip(&label).filter(|(a, b)| a == b).count() as f64 / n as f64;
        assert!((f1_score(&pred, &label, c, F1Average::Micro).unwrap() - acc).abs() < 1e-12);
        let per = per_class_f1(&pred, &label, c).unwrap();
        let weighted: f64 =
            (0..c).map(|k| per[k] * label.iter().filter(|&&y| y == k).count() as f64).sum::<f64>() / n as f64;
        assert!((f1_score(&pred, &label, c, F1Average::Weighted).unwrap() - weighted).abs() < 1e-12);
    }
}

fn tiny_graph(seed: u64) -> (Graph, Graph) {
    let spec = SyntheticSpec { n: 80, p_in: 0.08, p_out: 0.01, seed, ..Default::default() };
    let v = synth_confounded(&spec).unwrap();
    (v.train, v.test)
}

fn tiny_config(kind: ModelKind, epochs: usize, patience: usize) -> TrainConfig {
    let mut model = ModelConfig::new(1, 2);
    model.heads = 2;
    model.head_dim = 4;
    model.mi.projection_dim = 8;
    model.mi.queue_capacity = 32;
    model.mi.class_queue_capacity = 16;
    model.sample_cap = 32;
    TrainConfig { epochs, patience, kind, seed: 3, folds: 3, model, adam: AdamConfig { lr: 0.01, ..Default::default() }, ..Default::default() }
}

#[test]
fn identical_configs_train_identically() {
    let (g, _) = tiny_graph(1);
    let fold = &make_folds(&g, 3, 0.2, 3).unwrap().folds[0];
    for kind in [ModelKind::Ccagnn, ModelKind::PlainGat] {
        let cfg = tiny_config(kind, 4, 4);
        let a = train_fold(&g, None, fold, 0, &cfg).unwrap();
        let b = train_fold(&g, None, fold, 0, &cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.telemetry, b.telemetry);
        assert_eq!(a.model.params().flatten(), b.model.params().flatten());
        assert_eq!(a.test_f1, b.test_f1);
    }
}

#[test]
fn parallel_folds_match_sequential_folds() {
    let (g, _) = tiny_graph(2);
    let seq = cross_validate(&g, None, &TrainConfig { jobs: 1, ..tiny_config(ModelKind::PlainGat, 3, 3) }).unwrap();
    let par = cross_validate(&g, None, &TrainConfig { jobs: 3, ..tiny_config(ModelKind::PlainGat, 3, 3) }).unwrap();
    assert_eq!(seq.test_scores(), par.test_scores());
    for (a, b) in seq.folds.iter().zip(&par.folds) {
        assert_eq!(a.records, b.records);
    }
}

#[test]
fn patience_contract_and_best_checkpoint() {
    let (g, _) = tiny_graph(4);
    let plan = make_folds(&g, 3, 0.2, 3).unwrap();
    for (k, fold) in plan.folds.iter().enumerate() {
        for patience in [1, 2, 6] {
            let cfg = tiny_config(ModelKind::PlainGat, 6, patience);
            let r = train_fold(&g, None, fold, k, &cfg).unwrap();
            let vals: Vec<f64> = r.records.iter().map(|e| e.val_f1).collect();
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(r.best_val_f1, max);
            // ties move the checkpoint to the later epoch
            let last_max = vals.iter().rposition(|&v| v == max).unwrap() + 1;
            assert_eq!(r.best_epoch, last_max);
            if patience == 6 {
                assert_eq!(r.records.len(), 6);
            }
            if r.records.len() < 6 {
                // stopped: the last `patience` epochs never beat the earlier best
                let cut = r.records.len() - patience;
                let before = vals[..cut].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(vals[cut..].iter().all(|&v| v <= before));
            }
            assert!(r.records.iter().enumerate().all(|(i, e)| e.epoch == i + 1 && e.fold == k));
        }
    }
}

#[test]
fn test_labels_never_reach_training() {
    let (g, _) = tiny_graph(5);
    let fold = make_folds(&g, 3, 0.2, 3).unwrap().folds[1].clone();
    let mut poisoned = g.labels().to_vec();
    for &i in &fold.test {
        poisoned[i] = 1 - poisoned[i];
    }
    let bad = g.with_labels(poisoned).unwrap();
    for kind in [ModelKind::Ccagnn, ModelKind::PlainGat] {
        let cfg = tiny_config(kind, 3, 3);
        let clean = train_fold(&g, None, &fold, 1, &cfg).unwrap();
        let dirty = train_fold(&bad, None, &fold, 1, &cfg).unwrap();
        assert_eq!(clean.records, dirty.records);
        assert_eq!(clean.model.params().flatten(), dirty.model.params().flatten());
        // the poisoned labels are read exactly once, by the final test score
        let pred = clean.model.logits(&bad.add_self_loops()).unwrap().argmax_rows();
        let p: Vec<usize> = fold.test.iter().map(|&i| pred[i]).collect();
        let y: Vec<usize> = fold.test.iter().map(|&i| bad.labels()[i]).collect();
        assert_eq!(dirty.test_f1, macro_f1(&p, &y, 2).unwrap());
    }
}

#[test]
fn written_run_reads_back_and_summary_recomputes() {
    let (g, test) = tiny_graph(6);
    let cv = cross_validate(&g, Some(&test), &tiny_config(ModelKind::Ccagnn, 3, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &cv).unwrap();

    let metrics = read_metrics(std::fs::File::open(dir.path().join("metrics.csv")).unwrap()).unwrap();
    let expected: Vec<EpochRecord> = cv.folds.iter().flat_map(|f| f.records.clone()).collect();
    assert_eq!(metrics, expected);
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
    assert!(!text.contains('\r'));

    let summary = read_summary(std::fs::File::open(dir.path().join("summary.csv")).unwrap()).unwrap();
    let scores: Vec<f64> = summary.folds.iter().map(|f| f.1).collect();
    assert_eq!(scores, cv.test_scores());
    let (mean, std) = mean_std(&scores);
    assert_eq!(summary.mean, mean);
    assert_eq!(summary.std, std);
    assert_eq!((summary.mean, summary.std), (cv.mean, cv.std));
    for (row, f) in summary.folds.iter().zip(&cv.folds) {
        assert_eq!(row.2, f.best_epoch);
    }
    for k in 0..3 {
        assert!(dir.path().join(format!("checkpoints/fold_{k}/params.f64")).exists());
    }
}

#[test]
fn metrics_with_a_wrong_header_are_rejected() {
    let csv = "fold,epoch\n0,1\n";
    assert!(matches!(read_metrics(csv.as_bytes()), Err(CsvError::Header { .. })));
    let header_only = format!("{}\n", METRICS_HEADER.join(","));
    assert!(matches!(read_metrics(header_only.as_bytes()), Err(CsvError::Empty)));
}

#[test]
fn ablation_variants_change_only_their_mechanism() {
    let base = ModelConfig::new(4, 2);
    for v in AblationVariant::ALL {
        let mut cfg = base.clone();
        v.apply(&mut cfg);
        assert_eq!(AblationVariant::parse(v.name()), Some(v));
        match v {
            AblationVariant::Full => assert_eq!(cfg, base),
            _ => assert_ne!(cfg, base, "{}", v.name()),
        }
    }
}

#[test]
fn invalid_training_configs_are_rejected() {
    let (g, _) = tiny_graph(7);
    for cfg in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { patience: 0, ..TrainConfig::default() },
        TrainConfig { folds: 1, ..TrainConfig::default() },
        TrainConfig { jobs: 0, ..TrainConfig::default() },
        TrainConfig { adam: AdamConfig { lr: -1.0, ..AdamConfig::default() }, ..TrainConfig::default() },
    ] {
        assert!(cross_validate(&g, None, &cfg).is_err());
    }
}
