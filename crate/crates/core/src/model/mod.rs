//! The full network: a graph-attention trunk, the causal/non-causal split,
//! per-pathway convolutions, four prediction branches and the combined loss.

mod augment;
mod baseline;
mod checkpoint;
mod config;
mod losses;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{EdgeIndex, Graph, GraphError};
use crate::layers::{
    attention_importance, basic_mi_loss, mix, orthogonality_loss, FeatureGate, FusionGate, GatLayer, Linear,
    MiEstimator, Projection,
};
use crate::tensor::{sigmoid, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub use augment::{
    augment_edges, augment_mask, augment_noise, derive_seed, gradient_importance, mask_matrix, noise_term,
    permutation, sample_from, sample_rows,
};
pub use baseline::PlainGat;
pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta, ParamEntry};
pub use config::{AugmentationConfig, LossWeights, MiMode, ModelConfig};
pub use losses::{
    center_loss, cross_entropy, gate_confidence, kl_to_uniform, progress, prototype_infonce, ramp,
    supervised_contrastive, view_infonce, LossBundle,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss component `{component}` = {value}")]
    NonFinite { component: &'static str, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: std::path::PathBuf, detail: String },
}

// Stream tags for derive_seed.
const TAG_EDGES: u64 = 1;
const TAG_MASK: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_PERM: u64 = 4;
const TAG_SAMPLE: u64 = 5;
const TAG_TRAIN_SAMPLE: u64 = 6;

/// Per-step information shared by every model kind.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub epoch: usize,
    pub epochs: usize,
    /// Label of each node when it is a training node, `None` otherwise.
    pub known: &'a [Option<usize>],
    pub train_nodes: &'a [usize],
}

/// Telemetry returned by a training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub losses: LossBundle,
    pub gate_mean: f64,
    pub alpha_mean: f64,
    pub alpha_int: f64,
    pub ramp: f64,
}

/// What the training loop needs from a model.
pub trait NodeClassifier: Send {
    fn kind(&self) -> &'static str;
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Called once before the first step.
    fn prepare(&mut self, g: &Graph, known: &[Option<usize>]) -> Result<(), ModelError>;
    /// Forward and backward for one step. Gradients are accumulated into the
    /// parameter store; the caller applies the optimizer.
    fn train_step(&mut self, g: &Graph, ctx: &StepContext<'_>) -> Result<StepStats, ModelError>;
    /// Inference-mode logits used for prediction.
    fn logits(&self, g: &Graph) -> Result<Tensor, ModelError>;
}

/// Logits of the four branches, each `n × c`.
#[derive(Clone, Copy)]
pub struct Branches<'t> {
    pub causal: Var<'t>,
    pub noncausal: Var<'t>,
    pub fusion: Var<'t>,
    pub intervention: Var<'t>,
}

/// One pass through trunk, gate and pathway convolutions.
#[derive(Clone)]
pub struct Pass<'t> {
    pub h: Var<'t>,
    pub gate: Var<'t>,
    /// Gate outputs.
    pub x_c: Var<'t>,
    pub x_o: Var<'t>,
    /// Pathway-convolution outputs.
    pub causal: Var<'t>,
    pub noncausal: Var<'t>,
    /// Last trunk layer's attention, `E × heads`.
    pub attention: Rc<Tensor>,
    pub edges: EdgeIndex,
}

pub struct ForwardOutput<'t> {
    /// The (possibly masked) input features.
    pub input: Var<'t>,
    pub pass: Pass<'t>,
    /// Causal pathway on the unperturbed graph, present when augmentation changed anything.
    pub clean_causal: Option<Var<'t>>,
    pub alpha: Var<'t>,
    pub z: Var<'t>,
    pub alpha_int: Var<'t>,
    pub z_int: Var<'t>,
    pub permutation: Vec<usize>,
    pub logits: Branches<'t>,
}

/// Detached values applied to the model after the optimizer step.
pub struct StateUpdate {
    causal_proj: Tensor,
    proj_labels: Vec<usize>,
    class_means: Vec<Option<Vec<f64>>>,
}

pub struct LossOutput<'t> {
    pub total: Var<'t>,
    pub bundle: LossBundle,
    pub ramp: f64,
    pub update: StateUpdate,
}

#[derive(Clone, Debug)]
pub struct CcagnnModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Vec<GatLayer>,
    gate: FeatureGate,
    causal_conv: GatLayer,
    noncausal_conv: GatLayer,
    fusion: FusionGate,
    pub mi: MiEstimator,
    head: Projection,
    prototypes: ParamId,
    alpha_int: ParamId,
    classifier: Linear,
    /// Replaces the learned intervention gate when set.
    pub alpha_int_override: Option<f64>,
    centers: Tensor,
    centers_ready: bool,
    mask_importance: Option<Tensor>,
}

impl CcagnnModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (heads, dh, hidden) = (config.heads, config.head_dim, config.hidden());
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let d_in = if l == 0 { config.in_dim } else { hidden };
            encoder.push(GatLayer::new(&mut store, &format!("encoder.{l}"), d_in, dh, heads, true, config.attention, &mut rng));
        }
        let mut gate = FeatureGate::new(&mut store, "gate", hidden, &mut rng);
        gate.fixed = config.fixed_gate;
        let causal_conv = GatLayer::new(&mut store, "causal_conv", hidden, dh, heads, true, config.attention, &mut rng);
        let noncausal_conv =
            GatLayer::new(&mut store, "noncausal_conv", hidden, dh, heads, true, config.attention, &mut rng);
        let mut fusion = FusionGate::new(&mut store, "fusion", hidden, &mut rng);
        fusion.fixed = config.fixed_gate;
        let mi = MiEstimator::new(&mut store, "mi", hidden, config.num_classes, config.mi, &mut rng);
        let p = config.mi.projection_dim;
        let head = Projection::new(&mut store, "causal_head", hidden, p, &mut rng);
        let prototypes = store.register("prototypes", crate::layers::glorot(&mut rng, config.num_classes, p));
        let alpha_int = store.register("alpha_int", Tensor::zeros(&[1, 1]));
        let classifier = Linear::new(&mut store, "classifier", hidden, config.num_classes, &mut rng);
        let centers = Tensor::zeros(&[config.num_classes, hidden]);
        Ok(Self {
            config,
            store,
            encoder,
            gate,
            causal_conv,
            noncausal_conv,
            fusion,
            mi,
            head,
            prototypes,
            alpha_int,
            classifier,
            alpha_int_override: None,
            centers,
            centers_ready: false,
            mask_importance: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn set_centers(&mut self, centers: Tensor) {
        self.centers = centers;
        self.centers_ready = true;
    }

    /// Importance used by the next masked step.
    pub fn mask_importance(&self) -> Option<&Tensor> {
        self.mask_importance.as_ref()
    }

    /// Current intervention gate value.
    pub fn alpha_int_value(&self) -> f64 {
        self.alpha_int_override.unwrap_or_else(|| sigmoid(self.store.value(self.alpha_int).item()))
    }

    fn check_graph(&self, g: &Graph) -> Result<(), ModelError> {
        if g.num_features() != self.config.in_dim {
            return Err(ModelError::Dimension(format!(
                "model expects {} input features, graph `{}` has {}",
                self.config.in_dim,
                g.name(),
                g.num_features()
            )));
        }
        if g.num_classes() > self.config.num_classes {
            return Err(ModelError::Dimension(format!(
                "model has {} classes, graph `{}` has {}",
                self.config.num_classes,
                g.name(),
                g.num_classes()
            )));
        }
        Ok(())
    }

    fn pass<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        edges: EdgeIndex,
        noise: Option<u64>,
    ) -> Result<Pass<'t>, ModelError> {
        let mut h = x;
        let mut attention = None;
        for layer in &self.encoder {
            let out = layer.forward(tape, store, h, &edges)?;
            h = out.h;
            attention = Some(out.attention.value());
        }
        let attention = attention.expect("encoder has at least one layer");
        if let Some(seed) = noise {
            let importance = attention_importance(&edges, &attention);
            let v = h.value();
            let term = noise_term(v.rows(), v.cols(), &importance, self.config.augment.noise_scale, seed);
            h = h.add(tape.constant(term))?;
        }
        let d = self.gate.disentangle(tape, store, h)?;
        let causal = self.causal_conv.forward(tape, store, d.causal, &edges)?.h;
        let noncausal = self.noncausal_conv.forward(tape, store, d.noncausal, &edges)?.h;
        Ok(Pass { h, gate: d.gate, x_c: d.causal, x_o: d.noncausal, causal, noncausal, attention, edges })
    }

    fn alpha_int_var<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Var<'t> {
        match self.alpha_int_override {
            Some(v) => tape.constant(Tensor::scalar(v)),
            None => tape.param(store, self.alpha_int).sigmoid(),
        }
    }

    /// `f_cls(α_int · x_c[π] + (1 − α_int) · x_o)`.
    pub fn counterfactual_intervene<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x_c: Var<'t>,
        x_o: Var<'t>,
        perm: &[usize],
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>), ModelError> {
        let alpha = self.alpha_int_var(tape, store);
        let shuffled = x_c.gather_rows(Rc::from(perm))?;
        let z = mix(shuffled, x_o, alpha)?;
        let logits = self.classifier.forward(tape, store, z)?;
        Ok((logits, z, alpha))
    }

    pub fn classify<'t>(&self, tape: &'t Tape, store: &ParamStore, z: Var<'t>) -> Result<Var<'t>, ModelError> {
        Ok(self.classifier.forward(tape, store, z)?)
    }

    /// Full forward. `g` must carry one self-loop per node. When `training`
    /// is set, the enabled augmentations are applied with seeds derived from
    /// `step`; the permutation is derived from `step` either way.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        g: &Graph,
        training: bool,
        step: u64,
    ) -> Result<ForwardOutput<'t>, ModelError> {
        self.check_graph(g)?;
        let aug = &self.config.augment;
        let seed = self.config.seed ^ aug.seed;
        let n = g.num_nodes();
        let features = g.features();

        let use_edges = training && aug.edges && (aug.edge_drop_rate > 0.0 || aug.edge_add_rate > 0.0);
        let use_mask = training && aug.mask && aug.mask_rate > 0.0;
        let use_noise = training && aug.noise && aug.noise_scale > 0.0;

        let x_value = if use_mask {
            let mask_seed = derive_seed(seed, TAG_MASK, step);
            augment_mask(features, self.mask_importance.as_ref(), aug.mask_rate, mask_seed)
        } else {
            features.clone()
        };
        let input = if tape.is_recording() && use_mask { tape.leaf(x_value) } else { tape.constant(x_value) };
        let edges = if use_edges {
            augment_edges(g, aug.edge_drop_rate, aug.edge_add_rate, derive_seed(seed, TAG_EDGES, step)).edge_index()
        } else {
            g.edge_index()
        };
        let noise = use_noise.then(|| derive_seed(seed, TAG_NOISE, step));
        let pass = self.pass(tape, store, input, edges, noise)?;

        let clean_causal = if use_edges || use_mask || use_noise {
            let clean = self.pass(tape, store, tape.constant(features.clone()), g.edge_index(), None)?;
            Some(clean.causal)
        } else {
            None
        };

        let fused = self.fusion.fuse(tape, store, pass.causal, pass.noncausal)?;
        let perm = permutation(n, derive_seed(self.config.seed, TAG_PERM, step));
        let (intervention, z_int, alpha_int) =
            self.counterfactual_intervene(tape, store, pass.causal, pass.noncausal, &perm)?;
        let logits = Branches {
            causal: self.classifier.forward(tape, store, pass.causal)?,
            noncausal: self.classifier.forward(tape, store, pass.noncausal)?,
            fusion: self.classifier.forward(tape, store, fused.z)?,
            intervention,
        };
        Ok(ForwardOutput {
            input,
            pass,
            clean_causal,
            alpha: fused.alpha,
            z: fused.z,
            alpha_int,
            z_int,
            permutation: perm,
            logits,
        })
    }

    /// Labels for every node: the known label where given, otherwise the
    /// fused branch's prediction.
    fn fill_labels(known: &[Option<usize>], fused: &Tensor) -> Vec<usize> {
        let pred = fused.argmax_rows();
        known.iter().zip(pred).map(|(k, p)| k.unwrap_or(p)).collect()
    }

    /// Every loss component and their weighted total.
    pub fn total_loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        out: &ForwardOutput<'t>,
        ctx: &StepContext<'_>,
        step: u64,
    ) -> Result<LossOutput<'t>, ModelError> {
        let w = &self.config.weights;
        let n = out.z.value().rows();
        if ctx.known.len() != n {
            return Err(ModelError::Dimension(format!("{} label slots for {n} nodes", ctx.known.len())));
        }
        let train: Vec<usize> = ctx.train_nodes.to_vec();
        let train_labels: Vec<usize> = train
            .iter()
            .map(|&i| ctx.known[i].ok_or_else(|| ModelError::Config(format!("training node {i} has no label"))))
            .collect::<Result<_, _>>()?;
        let filled = Self::fill_labels(ctx.known, &out.logits.fusion.value());
        let tau_c = self.config.contrastive_temperature;
        let cap = self.config.sample_cap;

        let ce_causal = cross_entropy(out.logits.causal, &train, &train_labels)?;
        let ce_fusion = cross_entropy(out.logits.fusion, &train, &train_labels)?;
        let (int_rows, int_labels): (Vec<usize>, Vec<usize>) = (0..n)
            .filter_map(|i| ctx.known[out.permutation[i]].map(|y| (i, y)))
            .unzip();
        let ce_intervention = cross_entropy(out.logits.intervention, &int_rows, &int_labels)?;
        let ce_noncausal = kl_to_uniform(out.logits.noncausal);

        let sample = Rc::<[usize]>::from(sample_rows(n, cap, derive_seed(self.config.seed, TAG_SAMPLE, step)));
        let sample_labels: Vec<usize> = sample.iter().map(|&i| filled[i]).collect();
        let xc_s = out.pass.causal.gather_rows(sample.clone())?;
        let xo_s = out.pass.noncausal.gather_rows(sample.clone())?;
        let zero = || tape.constant(Tensor::scalar(0.0));
        let (mi, cond_mi, causal_proj) = match self.config.mi_mode {
            crate::model::MiMode::Queue => {
                let m = self.mi.mi_loss(tape, store, xc_s, xo_s)?;
                let c = self.mi.conditional_mi_loss(tape, store, xc_s, xo_s, &sample_labels)?;
                (m.loss, c.loss, m.causal_proj)
            }
            crate::model::MiMode::Basic => {
                let m = basic_mi_loss(tape, store, &self.mi.f_c, xc_s, xo_s, self.config.mi.temperature)?;
                (m, zero(), Tensor::zeros(&[0, self.config.mi.projection_dim]))
            }
        };

        let train_s = sample_from(&train, cap, derive_seed(self.config.seed, TAG_TRAIN_SAMPLE, step));
        let train_s_labels: Vec<usize> = train_s.iter().map(|&i| filled[i]).collect();
        let pred_mi = if train_s.is_empty() {
            zero()
        } else {
            let u = self.head.forward(tape, store, out.pass.causal.gather_rows(Rc::from(train_s.as_slice()))?)?;
            prototype_infonce(u, tape.param(store, self.prototypes), &train_s_labels, tau_c)?
        };
        let clean = out.clean_causal.unwrap_or(out.pass.causal);
        let inv_a = self.head.forward(tape, store, clean.gather_rows(sample.clone())?)?;
        let inv_b = self.head.forward(tape, store, xc_s)?;
        let inv_mi = view_infonce(inv_a, inv_b, tau_c)?;
        let orth = orthogonality_loss(out.pass.causal, out.pass.noncausal)?;
        let contrastive = if train_s.is_empty() {
            zero()
        } else {
            supervised_contrastive(out.z.gather_rows(Rc::from(train_s.as_slice()))?, &train_s_labels, tau_c)?
        };
        let center = center_loss(out.z, &train, &train_labels, &self.centers)?;

        let p_c = out.logits.causal.value();
        let p_o = out.logits.noncausal.value();
        let targets: Vec<f64> = train
            .iter()
            .zip(&train_labels)
            .map(|(&i, &y)| if softmax_at(p_c.row(i), y) > softmax_at(p_o.row(i), y) { 1.0 } else { 0.0 })
            .collect();
        let gate_conf = gate_confidence(out.alpha, &train, &targets)?;

        let t = progress(ctx.epoch, ctx.epochs);
        let ramped = sum_weighted(&[
            (ce_intervention, w.ce_intervention),
            (mi, w.mi),
            (cond_mi, w.cond_mi),
            (pred_mi, w.pred_mi),
            (inv_mi, w.inv_mi),
        ])?;
        let adaptive = ramped.scale(-(1.0 - t));
        let total = sum_weighted(&[
            (ce_causal, w.ce_causal),
            (ce_fusion, w.ce_fusion),
            (ce_intervention, w.ce_intervention),
            (ce_noncausal, w.ce_noncausal),
            (mi, w.mi),
            (cond_mi, w.cond_mi),
            (pred_mi, w.pred_mi),
            (inv_mi, w.inv_mi),
            (orth, w.orth),
            (contrastive, w.contrastive),
            (center, w.center),
            (adaptive, w.adaptive),
            (gate_conf, w.gate_conf),
        ])?;
        let item = |v: Var<'_>| v.value().item();
        let bundle = LossBundle {
            ce_causal: item(ce_causal),
            ce_fusion: item(ce_fusion),
            ce_intervention: item(ce_intervention),
            ce_noncausal: item(ce_noncausal),
            mi: item(mi),
            cond_mi: item(cond_mi),
            pred_mi: item(pred_mi),
            inv_mi: item(inv_mi),
            orth: item(orth),
            contrastive: item(contrastive),
            center: item(center),
            adaptive: item(adaptive),
            gate_conf: item(gate_conf),
            total: item(total),
        };
        bundle.check_finite()?;

        let z = out.z.value();
        let class_means = class_means(&z, &train, &train_labels, self.config.num_classes);
        Ok(LossOutput {
            total,
            bundle,
            ramp: ramp(w.adaptive, ctx.epoch, ctx.epochs),
            update: StateUpdate { causal_proj, proj_labels: sample_labels, class_means },
        })
    }

    /// Pushes detached projections into the negative queues and moves the
    /// class centers toward the batch means.
    pub fn apply_update(&mut self, update: StateUpdate) {
        let rows: Vec<usize> = (0..update.causal_proj.rows()).collect();
        if self.config.mi_mode == MiMode::Queue {
            self.mi.enqueue(&update.causal_proj, &rows);
            self.mi.enqueue_by_class(&update.causal_proj, &rows, &update.proj_labels);
        }
        let d = self.centers.cols();
        let decay = self.config.center_decay;
        for (k, mean) in update.class_means.iter().enumerate() {
            let Some(mean) = mean else { continue };
            let row = &mut self.centers.data_mut()[k * d..(k + 1) * d];
            for (c, m) in row.iter_mut().zip(mean) {
                *c = if self.centers_ready { decay * *c + (1.0 - decay) * m } else { *m };
            }
        }
        self.centers_ready = true;
    }

    /// Seeds the negative queues and class centers from an inference pass.
    pub fn prime(&mut self, g: &Graph, known: &[Option<usize>]) -> Result<(), ModelError> {
        let tape = Tape::inference();
        let out = self.forward(&tape, &self.store, g, false, 0)?;
        let n = g.num_nodes();
        let filled = Self::fill_labels(known, &out.logits.fusion.value());
        let sample = Rc::<[usize]>::from(sample_rows(n, self.config.sample_cap, derive_seed(self.config.seed, TAG_SAMPLE, u64::MAX)));
        let xc = out.pass.causal.gather_rows(sample.clone())?;
        let xo = out.pass.noncausal.gather_rows(sample.clone())?;
        let (fc, _) = self.mi.project(&tape, &self.store, xc, xo)?;
        let proj = fc.value().as_ref().clone();
        let labels: Vec<usize> = sample.iter().map(|&i| filled[i]).collect();
        let train: Vec<usize> = (0..n).filter(|&i| known[i].is_some()).collect();
        let train_labels: Vec<usize> = train.iter().map(|&i| filled[i]).collect();
        let class_means = class_means(&out.z.value(), &train, &train_labels, self.config.num_classes);
        self.centers_ready = false;
        self.apply_update(StateUpdate { causal_proj: proj, proj_labels: labels, class_means });
        Ok(())
    }

    /// Inference-mode fused logits.
    pub fn predict(&self, g: &Graph) -> Result<Tensor, ModelError> {
        let tape = Tape::inference();
        let out = self.forward(&tape, &self.store, g, false, 0)?;
        Ok(out.logits.fusion.value().as_ref().clone())
    }

    /// Mean gate value and mean fusion weight on an inference pass.
    pub fn gate_summary(&self, g: &Graph) -> Result<(f64, f64), ModelError> {
        let tape = Tape::inference();
        let out = self.forward(&tape, &self.store, g, false, 0)?;
        Ok((mean(out.pass.gate.value().data()), mean(out.alpha.value().data())))
    }
}

impl NodeClassifier for CcagnnModel {
    fn kind(&self) -> &'static str {
        "ccagnn"
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn prepare(&mut self, g: &Graph, known: &[Option<usize>]) -> Result<(), ModelError> {
        self.mask_importance = None;
        self.prime(g, known)
    }

    fn train_step(&mut self, g: &Graph, ctx: &StepContext<'_>) -> Result<StepStats, ModelError> {
        let step = ctx.epoch as u64;
        let tape = Tape::new();
        let out = self.forward(&tape, &self.store, g, true, step)?;
        let loss = self.total_loss(&tape, &self.store, &out, ctx, step)?;
        let grads = tape.backward(loss.total)?;
        grads.accumulate_into(&mut self.store);
        if let Some(gx) = grads.wrt(out.input) {
            let x = out.input.value();
            self.mask_importance = Some(gradient_importance(gx, x.rows(), x.cols()));
        }
        let stats = StepStats {
            losses: loss.bundle,
            gate_mean: mean(out.pass.gate.value().data()),
            alpha_mean: mean(out.alpha.value().data()),
            alpha_int: out.alpha_int.value().item(),
            ramp: loss.ramp,
        };
        drop(out);
        self.apply_update(loss.update);
        Ok(stats)
    }

    fn logits(&self, g: &Graph) -> Result<Tensor, ModelError> {
        self.predict(g)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn softmax_at(row: &[f64], k: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    (row[k] - m).exp() / z
}

fn sum_weighted<'t>(terms: &[(Var<'t>, f64)]) -> Result<Var<'t>, TensorError> {
    let mut total = terms[0].0.scale(terms[0].1);
    for &(v, w) in &terms[1..] {
        total = total.add(v.scale(w))?;
    }
    Ok(total)
}

fn class_means(z: &Tensor, rows: &[usize], labels: &[usize], c: usize) -> Vec<Option<Vec<f64>>> {
    let d = z.cols();
    let mut sums = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for (&i, &y) in rows.iter().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(z.row(i)) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, k)| (k > 0).then(|| s.into_iter().map(|v| v / k as f64).collect()))
        .collect()
}

#[cfg(test)]
mod tests;
