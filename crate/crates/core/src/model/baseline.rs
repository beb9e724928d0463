use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cross_entropy, LossBundle, ModelConfig, ModelError, NodeClassifier, StepContext, StepStats};
use crate::graph::Graph;
use crate::layers::{GatLayer, Linear};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// The same attention trunk with a single linear head trained by
/// cross-entropy alone.
#[derive(Clone, Debug)]
pub struct PlainGat {
    config: ModelConfig,
    store: ParamStore,
    encoder: Vec<GatLayer>,
    classifier: Linear,
}

impl PlainGat {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let hidden = config.hidden();
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                let d_in = if l == 0 { config.in_dim } else { hidden };
                GatLayer::new(&mut store, &format!("encoder.{l}"), d_in, config.head_dim, config.heads, true, config.attention, &mut rng)
            })
            .collect();
        let classifier = Linear::new(&mut store, "classifier", hidden, config.num_classes, &mut rng);
        Ok(Self { config, store, encoder, classifier })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, g: &Graph) -> Result<Var<'t>, ModelError> {
        if g.num_features() != self.config.in_dim {
            return Err(ModelError::Dimension(format!(
                "model expects {} input features, graph `{}` has {}",
                self.config.in_dim,
                g.name(),
                g.num_features()
            )));
        }
        let edges = g.edge_index();
        let mut h = tape.constant(g.features().clone());
        for layer in &self.encoder {
            h = layer.forward(tape, store, h, &edges)?.h;
        }
        Ok(self.classifier.forward(tape, store, h)?)
    }
}

impl NodeClassifier for PlainGat {
    fn kind(&self) -> &'static str {
        "plain_gat"
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

    fn prepare(&mut self, _g: &Graph, _known: &[Option<usize>]) -> Result<(), ModelError> {
        Ok(())
    }

    fn train_step(&mut self, g: &Graph, ctx: &StepContext<'_>) -> Result<StepStats, ModelError> {
        let tape = Tape::new();
        let logits = self.forward(&tape, &self.store, g)?;
        let labels: Vec<usize> = ctx
            .train_nodes
            .iter()
            .map(|&i| ctx.known[i].ok_or_else(|| ModelError::Config(format!("training node {i} has no label"))))
            .collect::<Result<_, _>>()?;
        let loss = cross_entropy(logits, ctx.train_nodes, &labels)?;
        let value = loss.value().item();
        let losses = LossBundle { ce_fusion: value, total: value, ..LossBundle::default() };
        losses.check_finite()?;
        tape.backward(loss)?.accumulate_into(&mut self.store);
        Ok(StepStats { losses, ..StepStats::default() })
    }

    fn logits(&self, g: &Graph) -> Result<Tensor, ModelError> {
        let tape = Tape::inference();
        Ok(self.forward(&tape, &self.store, g)?.value().as_ref().clone())
    }
}
