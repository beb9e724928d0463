use rand_chacha::ChaCha8Rng;

use super::gate::MAX_LOGIT;
use super::linear::glorot;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Per-node convex combination `z = α·x_c + (1 − α)·x_o` with
/// `α = σ([x_c ∥ x_o]·w + b)`.
#[derive(Clone, Debug)]
pub struct FusionGate {
    pub weight: ParamId,
    pub bias: ParamId,
    /// When set, `α` is this constant.
    pub fixed: Option<f64>,
}

pub struct Fused<'t> {
    pub z: Var<'t>,
    /// `n × 1`.
    pub alpha: Var<'t>,
}

impl FusionGate {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.register(format!("{name}.weight"), glorot(rng, 2 * dim, 1));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[1, 1]));
        Self { weight, bias, fixed: None }
    }

    pub fn fuse<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        causal: Var<'t>,
        noncausal: Var<'t>,
    ) -> Result<Fused<'t>, TensorError> {
        let alpha = match self.fixed {
            Some(v) => tape.constant(Tensor::filled(&[causal.value().rows(), 1], v)),
            None => Var::concat_cols(&[causal, noncausal])?
                .matmul(tape.param(store, self.weight))?
                .add(tape.param(store, self.bias))?
                .clamp(-MAX_LOGIT, MAX_LOGIT)
                .sigmoid(),
        };
        let z = mix(causal, noncausal, alpha)?;
        Ok(Fused { z, alpha })
    }
}

/// `α ⊙ a + (1 − α) ⊙ b` with `α` broadcast from `n × 1` or `1 × 1`.
pub fn mix<'t>(a: Var<'t>, b: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>, TensorError> {
    a.mul(alpha)?.add(b.mul(alpha.one_minus())?)
}
