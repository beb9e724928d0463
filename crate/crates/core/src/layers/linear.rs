use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Glorot-uniform `rows × cols` matrix.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

/// `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.register(format!("{name}.weight"), glorot(rng, d_in, d_out));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[1, d_out]));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        x.matmul(tape.param(store, self.weight))?.add(tape.param(store, self.bias))
    }
}
