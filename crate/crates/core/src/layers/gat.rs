//! Sparse multi-head graph attention.
//!
//! For each edge `j → i` and head `h` the layer scores
//!
//! ```text
//! GATv2:  e_ij = a_h · LeakyReLU(W_h x_i + W_h x_j)
//! GAT:    e_ij = LeakyReLU(a_dst,h · W_h x_i + a_src,h · W_h x_j)
//! ```
//!
//! normalizes the scores over the incoming edges of `i`, and aggregates
//! `Σ_j α_ij W_h x_j`. Heads are concatenated or averaged, a bias is added and
//! ELU is applied.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linear::glorot;
use crate::graph::EdgeIndex;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Nonlinearity before the attention projection.
    GatV2,
    /// Original scoring: projection of the concatenated endpoints, then LeakyReLU.
    Gat,
}

#[derive(Clone, Debug)]
enum Scoring {
    V2 { a: ParamId },
    V1 { a_dst: ParamId, a_src: ParamId },
}

#[derive(Clone, Debug)]
pub struct GatLayer {
    weight: ParamId,
    scoring: Scoring,
    bias: ParamId,
    pub d_in: usize,
    pub d_head: usize,
    pub heads: usize,
    pub concat: bool,
    pub negative_slope: f64,
    /// Apply ELU to the output.
    pub activation: bool,
}

/// Output of [`GatLayer::forward`].
pub struct GatOutput<'t> {
    pub h: Var<'t>,
    /// `E × heads` attention weights in CSR edge order.
    pub attention: Var<'t>,
}

/// `(H·D) × D` matrix averaging the heads.
fn head_mean(heads: usize, d: usize) -> Tensor {
    let mut m = vec![0.0; heads * d * d];
    for k in 0..heads * d {
        m[k * d + k % d] = 1.0 / heads as f64;
    }
    Tensor::matrix(heads * d, d, m)
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_head: usize,
        heads: usize,
        concat: bool,
        kind: AttentionKind,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hd = heads * d_head;
        let weight = store.register(format!("{name}.weight"), glorot(rng, d_in, hd));
        let scoring = match kind {
            AttentionKind::GatV2 => Scoring::V2 { a: store.register(format!("{name}.att"), glorot(rng, 1, hd)) },
            AttentionKind::Gat => Scoring::V1 {
                a_dst: store.register(format!("{name}.att_dst"), glorot(rng, 1, hd)),
                a_src: store.register(format!("{name}.att_src"), glorot(rng, 1, hd)),
            },
        };
        let width = if concat { hd } else { d_head };
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[1, width]));
        Self {
            weight,
            scoring,
            bias,
            d_in,
            d_head,
            heads,
            concat,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
            activation: true,
        }
    }

    pub fn kind(&self) -> AttentionKind {
        match self.scoring {
            Scoring::V2 { .. } => AttentionKind::GatV2,
            Scoring::V1 { .. } => AttentionKind::Gat,
        }
    }

    pub fn out_width(&self) -> usize {
        if self.concat {
            self.heads * self.d_head
        } else {
            self.d_head
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// Attention vectors: `[a]` for GATv2, `[a_dst, a_src]` for GAT.
    pub fn attention_params(&self) -> Vec<ParamId> {
        match self.scoring {
            Scoring::V2 { a } => vec![a],
            Scoring::V1 { a_dst, a_src } => vec![a_dst, a_src],
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        edges: &EdgeIndex,
    ) -> Result<GatOutput<'t>, TensorError> {
        if !edges.self_loops {
            return Err(TensorError::Contract(
                "graph attention needs exactly one self-loop per node".into(),
            ));
        }
        let width = x.value().cols();
        if width != self.d_in {
            return Err(TensorError::Shape { op: "gat_forward", lhs: vec![x.value().rows(), width], rhs: vec![self.d_in] });
        }
        let n = edges.num_nodes;
        let wx = x.matmul(tape.param(store, self.weight))?;
        let wx_src = wx.gather_rows(edges.src.clone())?;
        let scores = match self.scoring {
            Scoring::V2 { a } => {
                let pre = wx.gather_rows(edges.dst.clone())?.add(wx_src)?.leaky_relu(self.negative_slope);
                pre.mul(tape.param(store, a))?.block_sum_cols(self.d_head)?
            }
            Scoring::V1 { a_dst, a_src } => {
                let s_dst = wx.mul(tape.param(store, a_dst))?.block_sum_cols(self.d_head)?;
                let s_src = wx.mul(tape.param(store, a_src))?.block_sum_cols(self.d_head)?;
                s_dst
                    .gather_rows(edges.dst.clone())?
                    .add(s_src.gather_rows(edges.src.clone())?)?
                    .leaky_relu(self.negative_slope)
            }
        };
        let attention = scores.segment_softmax(edges.dst.clone())?;
        let messages = wx_src.mul(attention.repeat_cols(self.d_head)?)?;
        let mut h = messages.segment_sum(edges.dst.clone(), n)?;
        if !self.concat {
            h = h.matmul(tape.constant(head_mean(self.heads, self.d_head)))?;
        }
        h = h.add(tape.param(store, self.bias))?;
        if self.activation {
            h = h.elu();
        }
        Ok(GatOutput { h, attention })
    }
}

/// Mean attention each node receives as a source, averaged over heads.
/// Self-loops count, so an isolated node scores its own self-attention.
pub fn attention_importance(edges: &EdgeIndex, attention: &Tensor) -> Vec<f64> {
    let heads = attention.cols();
    let mut total = vec![0.0; edges.num_nodes];
    let mut count = vec![0usize; edges.num_nodes];
    for (e, &s) in edges.src.iter().enumerate() {
        total[s] += attention.row(e).iter().sum::<f64>() / heads as f64;
        count[s] += 1;
    }
    total.iter().zip(&count).map(|(t, &c)| if c == 0 { 0.0 } else { t / c as f64 }).collect()
}
