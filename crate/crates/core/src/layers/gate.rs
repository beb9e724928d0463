use rand_chacha::ChaCha8Rng;

use super::linear::glorot;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Gate logits are clamped here so the sigmoid never rounds to exactly 0 or 1.
pub const MAX_LOGIT: f64 = 30.0;

/// Feature-wise sigmoid gate splitting an embedding into a causal part
/// `g ⊙ x` and a non-causal part `(1 − g) ⊙ x`.
#[derive(Clone, Debug)]
pub struct FeatureGate {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    /// When set, `g` is this constant instead of a learned function of `x`.
    pub fixed: Option<f64>,
}

/// Gate values with the two parts they produce. All three are `n × d`.
pub struct Disentangled<'t> {
    pub gate: Var<'t>,
    pub causal: Var<'t>,
    pub noncausal: Var<'t>,
}

impl FeatureGate {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.register(format!("{name}.weight"), glorot(rng, dim, dim));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[1, dim]));
        Self { weight, bias, dim, fixed: None }
    }

    pub fn disentangle<'t>(&self, tape: &'t Tape, store: &ParamStore, h: Var<'t>) -> Result<Disentangled<'t>, TensorError> {
        let gate = match self.fixed {
            Some(v) => {
                let value = h.value();
                tape.constant(Tensor::filled(value.shape(), v))
            }
            None => h
                .matmul(tape.param(store, self.weight))?
                .add(tape.param(store, self.bias))?
                .clamp(-MAX_LOGIT, MAX_LOGIT)
                .sigmoid(),
        };
        let causal = gate.mul(h)?;
        let noncausal = gate.one_minus().mul(h)?;
        Ok(Disentangled { gate, causal, noncausal })
    }
}
