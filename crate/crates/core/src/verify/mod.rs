//! Self-checks shared by the test suites and the command line: finite-difference
//! gradient suites, independent straight-line oracles and algebraic invariants.

pub mod invariants;
pub mod oracles;

use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::graph::{EdgeIndex, Graph};
use crate::layers::{
    basic_mi_loss, orthogonality_loss, AttentionKind, FeatureGate, FusionGate, GatLayer, MiConfig, MiEstimator,
    Projection,
};
use crate::model::{AugmentationConfig, CcagnnModel, ModelConfig, ModelError, NodeClassifier, StepContext};
use crate::tensor::{grad_check, GradCheckReport, ParamStore, Tape, Tensor, TensorError, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const PRIMITIVE_SEEDS: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Primitives,
    Layers,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Primitives, Suite::Layers, Suite::Model];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Primitives => "primitives",
            Suite::Layers => "layers",
            Suite::Model => "model",
        }
    }

    /// Central-difference step. Composite losses need a smaller step to keep
    /// truncation error under the tolerance.
    pub fn step(self) -> f64 {
        match self {
            Suite::Primitives => 1e-4,
            Suite::Layers | Suite::Model => 1e-5,
        }
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}` (expected primitives, layers or model)"))
    }
}

/// Worst deviation of an implementation from a reference over many trials.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

/// Running maximum of absolute differences.
#[derive(Default)]
struct Deviation(f64);

impl Deviation {
    fn diff(&mut self, a: f64, b: f64) {
        let d = (a - b).abs();
        self.0 = if d.is_nan() { f64::INFINITY } else { self.0.max(d) };
    }

    fn diffs(&mut self, a: &[f64], b: &[f64]) {
        if a.len() != b.len() {
            self.0 = f64::INFINITY;
        }
        for (x, y) in a.iter().zip(b) {
            self.diff(*x, *y);
        }
    }

    fn check(self, name: &'static str, trials: usize, tolerance: f64) -> Check {
        Check { name, trials, max_deviation: self.0, tolerance }
    }
}

/// Outcome of one named check, possibly aggregated over seeds.
#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub suite: Suite,
    pub case: String,
    pub runs: usize,
    pub max_error: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
    pub passed: bool,
}

impl CaseResult {
    fn from_reports(suite: Suite, case: &str, reports: &[GradCheckReport], tolerance: f64) -> Self {
        let mut max_error = 0.0;
        let mut worst = String::new();
        for r in reports {
            if let Some(w) = r.worst() {
                if w.max_rel_err >= max_error {
                    max_error = w.max_rel_err;
                    worst = w.name.clone();
                }
            }
        }
        Self {
            suite,
            case: case.to_string(),
            runs: reports.len(),
            max_error,
            worst,
            passed: reports.iter().all(GradCheckReport::passed) && max_error < tolerance,
        }
    }
}

pub fn run_suite(suite: Suite, tolerance: f64) -> Result<Vec<CaseResult>, ModelError> {
    match suite {
        Suite::Primitives => primitive_suite(PRIMITIVE_SEEDS, tolerance),
        Suite::Layers => layer_suite(30, tolerance),
        Suite::Model => model_suite(7, tolerance),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect())
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn rand_off_kink(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::matrix(r, c, data)
}

/// Fixed non-uniform readout so every output entry carries a distinct weight.
fn weighted<'t>(t: &'t Tape, v: Var<'t>) -> Result<Var<'t>, TensorError> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|k| 0.3 + 0.17 * k as f64).collect())?;
    Ok(v.mul(t.constant(w))?.sum())
}

type Primitive = for<'t> fn(&'t Tape, Var<'t>, Var<'t>) -> Result<Var<'t>, TensorError>;

/// `(name, has a kink at zero, scalar function of two 4 × 3 inputs)`.
pub fn primitives() -> Vec<(&'static str, bool, Primitive)> {
    vec![
        ("add_broadcast", false, |t, a, b| weighted(t, a.add(b.slice_cols(0, 3)?.sum_cols())?)),
        ("sub", false, |t, a, b| weighted(t, a.sub(b)?)),
        ("mul_col_broadcast", false, |t, a, b| weighted(t, a.mul(b.slice_cols(1, 2)?)?)),
        ("div", false, |t, a, b| weighted(t, a.div(b.square().offset(0.5))?)),
        ("sigmoid", false, |t, a, _| weighted(t, a.sigmoid())),
        ("exp", false, |t, a, _| weighted(t, a.exp())),
        ("log", false, |t, a, _| weighted(t, a.square().offset(0.1).log()?)),
        ("tanh", false, |t, a, _| weighted(t, a.tanh())),
        ("elu", true, |t, a, _| weighted(t, a.elu())),
        ("leaky_relu", true, |t, a, _| weighted(t, a.leaky_relu(0.2))),
        ("relu", true, |t, a, _| weighted(t, a.relu())),
        ("clamp", true, |t, a, _| {
            let inside = weighted(t, a.scale(0.3).clamp(-0.5, 0.5))?;
            let outside = weighted(t, a.scale(0.3).clamp(-0.01, 0.01))?;
            inside.add(outside)
        }),
        ("sqrt", false, |t, a, _| weighted(t, a.square().offset(0.2).sqrt()?)),
        ("matmul", false, |t, a, b| weighted(t, a.matmul(b.transpose())?)),
        ("sum_rows", false, |t, a, _| weighted(t, a.sum_rows())),
        ("gather_rows", false, |t, a, _| weighted(t, a.gather_rows(Rc::from(vec![2, 0, 2, 3, 1]))?)),
        ("segment_sum", false, |t, a, _| weighted(t, a.segment_sum(Rc::from(vec![1, 1, 0, 2]), 3)?)),
        ("segment_softmax", false, |t, a, _| weighted(t, a.segment_softmax(Rc::from(vec![0, 0, 0, 1]))?)),
        ("concat_slice", false, |t, a, b| weighted(t, Var::concat_cols(&[a, b.scale(2.0)])?.slice_cols(1, 5)?)),
        ("block_sum_cols", false, |t, a, b| weighted(t, Var::concat_cols(&[a, b])?.block_sum_cols(2)?)),
        ("repeat_cols", false, |t, a, _| weighted(t, a.repeat_cols(3)?)),
        ("log_softmax_rows", false, |t, a, _| weighted(t, a.log_softmax_rows())),
        ("logsumexp_rows", false, |t, a, _| weighted(t, a.logsumexp_rows())),
        ("normalize_rows", false, |t, a, _| weighted(t, a.normalize_rows())),
        ("cosine_rows", false, |t, a, b| weighted(t, a.cosine_rows(b)?)),
    ]
}

/// Every primitive on `seeds` random input pairs.
pub fn primitive_suite(seeds: u64, tolerance: f64) -> Result<Vec<CaseResult>, ModelError> {
    let mut out = Vec::new();
    for (name, kinked, f) in primitives() {
        let mut reports = Vec::with_capacity(seeds as usize);
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draw = if kinked { rand_off_kink } else { rand_tensor };
            let (av, bv) = (draw(&mut rng, 4, 3), draw(&mut rng, 4, 3));
            let mut store = ParamStore::new();
            let a = store.register("a", av);
            let b = store.register("b", bv);
            let report = grad_check(
                &mut store,
                |t, s| f(t, t.param(s, a), t.param(s, b)),
                Suite::Primitives.step(),
                tolerance,
            )?;
            reports.push(report);
        }
        out.push(CaseResult::from_reports(Suite::Primitives, name, &reports, tolerance));
    }
    Ok(out)
}

/// Random graph with self-loops; edge `(i, j)` appears with probability `p`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let features = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
    let labels = (0..n).map(|i| i % c).collect();
    Graph::new("random", features, labels, c, edges, true).expect("valid random graph").add_self_loops()
}

/// Rows drawn uniformly from the unit sphere.
pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn hidden<'t>(
    v2: &GatLayer,
    v1: &GatLayer,
    x: &Tensor,
    edges: &EdgeIndex,
    t: &'t Tape,
    s: &ParamStore,
) -> Result<Var<'t>, TensorError> {
    let h = v2.forward(t, s, t.constant(x.clone()), edges)?.h;
    Ok(v1.forward(t, s, h, edges)?.h)
}

/// Each layer, fed by the two attention layers below it.
pub fn layer_suite(seed: u64, tolerance: f64) -> Result<Vec<CaseResult>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng, 8, 4, 2, 0.3);
    let edges = g.edge_index();
    let x = g.features().clone();
    let labels: Vec<usize> = g.labels().to_vec();

    let mut store = ParamStore::new();
    let v2 = GatLayer::new(&mut store, "gatv2", 4, 3, 2, true, AttentionKind::GatV2, &mut rng);
    let v1 = GatLayer::new(&mut store, "gat", 6, 3, 2, false, AttentionKind::Gat, &mut rng);
    let gate = FeatureGate::new(&mut store, "gate", 3, &mut rng);
    let fusion = FusionGate::new(&mut store, "fusion", 3, &mut rng);
    let mi_config = MiConfig { projection_dim: 4, temperature: 0.5, queue_capacity: 6, class_queue_capacity: 3 };
    let mut est = MiEstimator::new(&mut store, "mi", 3, 2, mi_config, &mut rng);
    let shared = Projection::new(&mut store, "basic", 3, 4, &mut rng);
    est.queue.push_rows(unit_rows(&mut rng, 6, 4).iter().map(Vec::as_slice));
    for q in &mut est.class_queues {
        q.push_rows(unit_rows(&mut rng, 3, 4).iter().map(Vec::as_slice));
    }
    let readout = Tensor::matrix(8, 3, (0..24).map(|k| (k as f64 * 0.37).sin()).collect());
    let step = Suite::Layers.step();

    type Case<'a> = Box<dyn for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, TensorError> + 'a>;
    let cases: Vec<(&str, Case)> = vec![
        ("gatv2", Box::new(|t, s| weighted(t, v2.forward(t, s, t.constant(x.clone()), &edges)?.h))),
        ("gat", Box::new(|t, s| weighted(t, hidden(&v2, &v1, &x, &edges, t, s)?))),
        (
            "feature_gate",
            Box::new(|t, s| {
                let d = gate.disentangle(t, s, hidden(&v2, &v1, &x, &edges, t, s)?)?;
                Ok(weighted(t, d.causal)?.add(weighted(t, d.noncausal.scale(0.5))?)?)
            }),
        ),
        (
            "fusion_gate",
            Box::new(|t, s| {
                let d = gate.disentangle(t, s, hidden(&v2, &v1, &x, &edges, t, s)?)?;
                Ok(fusion.fuse(t, s, d.causal, d.noncausal)?.z.mul(t.constant(readout.clone()))?.sum())
            }),
        ),
        (
            "mi_loss",
            Box::new(|t, s| {
                let d = gate.disentangle(t, s, hidden(&v2, &v1, &x, &edges, t, s)?)?;
                Ok(est.mi_loss(t, s, d.causal, d.noncausal)?.loss)
            }),
        ),
        (
            "conditional_mi_loss",
            Box::new(|t, s| {
                let d = gate.disentangle(t, s, hidden(&v2, &v1, &x, &edges, t, s)?)?;
                Ok(est.conditional_mi_loss(t, s, d.causal, d.noncausal, &labels)?.loss)
            }),
        ),
        (
            "basic_mi_loss",
            Box::new(|t, s| {
                let d = gate.disentangle(t, s, hidden(&v2, &v1, &x, &edges, t, s)?)?;
                basic_mi_loss(t, s, &shared, d.causal, d.noncausal, 0.5)
            }),
        ),
        (
            "orthogonality_loss",
            Box::new(|t, s| {
                let d = gate.disentangle(t, s, hidden(&v2, &v1, &x, &edges, t, s)?)?;
                orthogonality_loss(d.causal, d.noncausal)
            }),
        ),
    ];
    let mut out = Vec::new();
    for (name, f) in &cases {
        let report = grad_check(&mut store, |t, s| f(t, s), step, tolerance)?;
        out.push(CaseResult::from_reports(Suite::Layers, name, &[report], tolerance));
    }
    Ok(out)
}

/// Configuration used by the full-model check: small widths, every loss
/// weight on, the warm-up ramp mid-way, and every augmentation except the
/// attention-scaled noise (its scale is read from detached attention, so
/// finite differences would see a path the tape does not record).
pub fn model_check_config(in_dim: usize, classes: usize, seed: u64) -> ModelConfig {
    let mut config = ModelConfig::new(in_dim, classes);
    config.heads = 2;
    config.head_dim = 3;
    config.mi = MiConfig { projection_dim: 4, temperature: 0.5, queue_capacity: 16, class_queue_capacity: 8 };
    config.sample_cap = 8;
    config.augment = AugmentationConfig { noise: false, ..AugmentationConfig::default() };
    config.seed = seed;
    config
}

/// The combined training loss of the full model on a 10-node random graph.
pub fn model_suite(seed: u64, tolerance: f64) -> Result<Vec<CaseResult>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng, 10, 5, 3, 0.25);
    let mut model = CcagnnModel::new(model_check_config(5, 3, seed))?;
    let train: Vec<usize> = vec![0, 1, 2, 4, 5, 7];
    let mut known = vec![None; 10];
    for &i in &train {
        known[i] = Some(g.labels()[i]);
    }
    model.prepare(&g, &known)?;
    let ctx = StepContext { epoch: 2, epochs: 5, known: &known, train_nodes: &train };
    let mut store = model.store().clone();
    let report = grad_check(
        &mut store,
        |t, s| {
            let out = model.forward(t, s, &g, true, 3).map_err(contract)?;
            Ok(model.total_loss(t, s, &out, &ctx, 3).map_err(contract)?.total)
        },
        Suite::Model.step(),
        tolerance,
    )?;
    Ok(vec![CaseResult::from_reports(Suite::Model, "ccagnn_total_loss", &[report], tolerance)])
}

fn contract(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}
