//! Contrastive mutual-information penalty between the causal and non-causal
//! pathways.
//!
//! With projections `f_c`, `f_o` and similarity `T(u, v) = cos(u, v) / τ`,
//!
//! ```text
//! L_MI = mean_i T(f_c(x_c,i), f_o(x_o,i)) − mean_i log( mean_{q∈Q} exp T(q, f_o(x_o,i)) )
//! ```
//!
//! where `Q` is a FIFO queue of past (detached) causal projections. Lowering
//! `L_MI` lowers the estimated dependence between the two pathways.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linear::Linear;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

/// Two-layer map `d → p → p` with a tanh hidden layer.
#[derive(Clone, Debug)]
pub struct Projection {
    pub first: Linear,
    pub second: Linear,
}

impl Projection {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, p: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), d, p, rng),
            second: Linear::new(store, &format!("{name}.1"), p, p, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let h = self.first.forward(tape, store, x)?.tanh();
        self.second.forward(tape, store, h)
    }
}

/// Bounded first-in-first-out store of embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    rows: VecDeque<Vec<f64>>,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, rows: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends rows, evicting the oldest beyond capacity.
    pub fn push_rows<'a>(&mut self, rows: impl IntoIterator<Item = &'a [f64]>) {
        for r in rows {
            if self.capacity == 0 {
                return;
            }
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(r.to_vec());
        }
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    /// Oldest first.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(Vec::as_slice)
    }

    /// Queue contents as a `K × p` matrix, oldest first.
    pub fn to_tensor(&self) -> Option<Tensor> {
        let first = self.rows.front()?;
        let p = first.len();
        let mut data = Vec::with_capacity(self.rows.len() * p);
        for r in &self.rows {
            data.extend_from_slice(r);
        }
        Some(Tensor::matrix(self.rows.len(), p, data))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    pub projection_dim: usize,
    pub temperature: f64,
    pub queue_capacity: usize,
    pub class_queue_capacity: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self { projection_dim: 32, temperature: 0.1, queue_capacity: 256, class_queue_capacity: 64 }
    }
}

/// Result of an MI evaluation: the loss plus the detached, normalized causal
/// projections a caller may enqueue afterwards.
pub struct MiOutput<'t> {
    pub loss: Var<'t>,
    pub causal_proj: Tensor,
}

pub struct ConditionalMiOutput<'t> {
    pub loss: Var<'t>,
    pub causal_proj: Tensor,
    /// Classes present in the batch whose queue was empty.
    pub skipped: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct MiEstimator {
    pub f_c: Projection,
    pub f_o: Projection,
    pub config: MiConfig,
    pub queue: EmbeddingQueue,
    pub class_queues: Vec<EmbeddingQueue>,
}

impl MiEstimator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        num_classes: usize,
        config: MiConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            f_c: Projection::new(store, &format!("{name}.f_c"), d, config.projection_dim, rng),
            f_o: Projection::new(store, &format!("{name}.f_o"), d, config.projection_dim, rng),
            config,
            queue: EmbeddingQueue::new(config.queue_capacity),
            class_queues: vec![EmbeddingQueue::new(config.class_queue_capacity); num_classes],
        }
    }

    /// Normalized projections `(f_c(x_c), f_o(x_o))`.
    pub fn project<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x_c: Var<'t>,
        x_o: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let fc = self.f_c.forward(tape, store, x_c)?.normalize_rows();
        let fo = self.f_o.forward(tape, store, x_o)?.normalize_rows();
        Ok((fc, fo))
    }

    /// Unconditional estimate against the global queue. Does not modify the queue.
    pub fn mi_loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x_c: Var<'t>,
        x_o: Var<'t>,
    ) -> Result<MiOutput<'t>, TensorError> {
        let queue = self
            .queue
            .to_tensor()
            .ok_or_else(|| TensorError::Contract("MI negative queue is empty; seed it first".into()))?;
        let (fc, fo) = self.project(tape, store, x_c, x_o)?;
        let loss = contrastive_mi(tape, fc, fo, &queue, self.config.temperature)?;
        Ok(MiOutput { loss, causal_proj: fc.value().as_ref().clone() })
    }

    /// Per-class estimate: positives and negatives are restricted to the class
    /// given by `labels` (true labels or pseudo-labels), then averaged over the
    /// classes present. Classes with an empty queue are skipped.
    pub fn conditional_mi_loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x_c: Var<'t>,
        x_o: Var<'t>,
        labels: &[usize],
    ) -> Result<ConditionalMiOutput<'t>, TensorError> {
        let (fc, fo) = self.project(tape, store, x_c, x_o)?;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.class_queues.len()];
        for (i, &l) in labels.iter().enumerate() {
            members
                .get_mut(l)
                .ok_or_else(|| TensorError::Contract(format!("label {l} has no class queue")))?
                .push(i);
        }
        let mut terms = Vec::new();
        let mut skipped = Vec::new();
        for (class, idx) in members.into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let Some(queue) = self.class_queues[class].to_tensor() else {
                skipped.push(class);
                continue;
            };
            let idx: std::rc::Rc<[usize]> = idx.into();
            let fc_k = fc.gather_rows(idx.clone())?;
            let fo_k = fo.gather_rows(idx)?;
            terms.push(contrastive_mi(tape, fc_k, fo_k, &queue, self.config.temperature)?);
        }
        if terms.is_empty() {
            return Err(TensorError::Contract("no class in the batch has a seeded queue".into()));
        }
        let count = terms.len() as f64;
        let mut total = terms[0];
        for t in &terms[1..] {
            total = total.add(*t)?;
        }
        Ok(ConditionalMiOutput { loss: total.scale(1.0 / count), causal_proj: fc.value().as_ref().clone(), skipped })
    }

    /// Pushes detached causal projections into the global queue.
    pub fn enqueue(&mut self, proj: &Tensor, rows: &[usize]) {
        self.queue.push_rows(rows.iter().map(|&i| proj.row(i)));
    }

    /// Pushes each row into the queue of its class.
    pub fn enqueue_by_class(&mut self, proj: &Tensor, rows: &[usize], labels: &[usize]) {
        for &i in rows {
            if let Some(q) = self.class_queues.get_mut(labels[i]) {
                q.push_rows(std::iter::once(proj.row(i)));
            }
        }
    }
}

/// `mean_i T(fc_i, fo_i) − mean_i [log Σ_k exp T(q_k, fo_i) − log K]` for
/// row-normalized `fc`, `fo` and a constant queue.
fn contrastive_mi<'t>(tape: &'t Tape, fc: Var<'t>, fo: Var<'t>, queue: &Tensor, tau: f64) -> Result<Var<'t>, TensorError> {
    let k = queue.rows() as f64;
    let positive = fc.mul(fo)?.sum_rows().mean().scale(1.0 / tau);
    let q = tape.constant(normalize_rows(queue).transpose());
    let negative = fo.matmul(q)?.scale(1.0 / tau).logsumexp_rows().offset(-k.ln()).mean();
    positive.sub(negative)
}

/// Single-encoder variant: both pathways share `f_c`, and the negatives are
/// the other rows of the batch instead of a queue.
pub fn basic_mi_loss<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    encoder: &Projection,
    x_c: Var<'t>,
    x_o: Var<'t>,
    tau: f64,
) -> Result<Var<'t>, TensorError> {
    let fc = encoder.forward(tape, store, x_c)?.normalize_rows();
    let fo = encoder.forward(tape, store, x_o)?.normalize_rows();
    let b = fc.value().rows() as f64;
    let positive = fc.mul(fo)?.sum_rows().mean().scale(1.0 / tau);
    let negative = fo.matmul(fc.transpose())?.scale(1.0 / tau).logsumexp_rows().offset(-b.ln()).mean();
    positive.sub(negative)
}

fn normalize_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = Vec::with_capacity(t.len());
    for i in 0..t.rows() {
        let row = t.row(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.extend(row.iter().map(|v| if n == 0.0 { 0.0 } else { v / n }));
    }
    Tensor::matrix(t.rows(), c, out)
}

/// Mean over rows of the squared cosine between `x_c` and `x_o`; zero rows give 0.
pub fn orthogonality_loss<'t>(x_c: Var<'t>, x_o: Var<'t>) -> Result<Var<'t>, TensorError> {
    Ok(x_c.cosine_rows(x_o)?.square().mean())
}
