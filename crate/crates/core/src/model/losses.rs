//! Loss components on tape values. Row sets are passed explicitly so callers
//! decide which nodes carry labels.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::config::LossWeights;
use super::ModelError;
use crate::tensor::{Tape, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// Large negative logit used to exclude an entry from a softmax.
const EXCLUDED: f64 = -1e4;

fn zero(tape: &Tape) -> Var<'_> {
    tape.constant(Tensor::scalar(0.0))
}

fn one_hot(labels: &[usize], c: usize) -> Tensor {
    let mut m = vec![0.0; labels.len() * c];
    for (i, &y) in labels.iter().enumerate() {
        m[i * c + y] = 1.0;
    }
    Tensor::matrix(labels.len(), c, m)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits[rows])`.
/// Empty `rows` give 0.
pub fn cross_entropy<'t>(logits: Var<'t>, rows: &[usize], labels: &[usize]) -> Result<Var<'t>> {
    assert_eq!(rows.len(), labels.len());
    let tape = logits.tape();
    if rows.is_empty() {
        return Ok(zero(tape));
    }
    let c = logits.value().cols();
    let picked = logits.gather_rows(Rc::from(rows))?.log_softmax_rows();
    Ok(picked.mul(tape.constant(one_hot(labels, c)))?.sum().scale(-1.0 / rows.len() as f64))
}

/// Mean over rows of `KL(uniform ‖ softmax(logits_i))`.
pub fn kl_to_uniform(logits: Var<'_>) -> Var<'_> {
    let c = logits.value().cols() as f64;
    logits.log_softmax_rows().mean().neg().offset(-c.ln())
}

/// Supervised contrastive loss over row-normalized `z`. Rows with no other
/// same-label row are not anchors; with no anchors the loss is 0.
pub fn supervised_contrastive<'t>(z: Var<'t>, labels: &[usize], tau: f64) -> Result<Var<'t>> {
    let tape = z.tape();
    let b = labels.len();
    let mut weights = vec![0.0; b * b];
    let mut anchor = vec![0.0; b];
    let mut anchors = 0usize;
    for i in 0..b {
        let positives = (0..b).filter(|&p| p != i && labels[p] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        anchors += 1;
        anchor[i] = 1.0;
        for p in 0..b {
            if p != i && labels[p] == labels[i] {
                weights[i * b + p] = 1.0 / positives as f64;
            }
        }
    }
    if anchors == 0 {
        return Ok(zero(tape));
    }
    let zn = z.normalize_rows();
    let sim = zn.matmul(zn.transpose())?.scale(1.0 / tau);
    let mut diag = vec![0.0; b * b];
    for i in 0..b {
        diag[i * b + i] = EXCLUDED;
    }
    let lse = sim.add(tape.constant(Tensor::matrix(b, b, diag)))?.logsumexp_rows();
    let pos = sim.mul(tape.constant(Tensor::matrix(b, b, weights)))?.sum();
    let norm = lse.mul(tape.constant(Tensor::matrix(b, 1, anchor)))?.sum();
    Ok(norm.sub(pos)?.scale(1.0 / anchors as f64))
}

/// Mean squared distance of `z[rows]` to the fixed centers of their labels.
pub fn center_loss<'t>(z: Var<'t>, rows: &[usize], labels: &[usize], centers: &Tensor) -> Result<Var<'t>> {
    let tape = z.tape();
    if rows.is_empty() {
        return Ok(zero(tape));
    }
    let target = tape.constant(centers.select_rows(labels));
    Ok(z.gather_rows(Rc::from(rows))?.sub(target)?.square().sum().scale(1.0 / rows.len() as f64))
}

/// Binary cross-entropy of the per-node gate `alpha[rows]` against 0/1 targets.
pub fn gate_confidence<'t>(alpha: Var<'t>, rows: &[usize], targets: &[f64]) -> Result<Var<'t>> {
    let tape = alpha.tape();
    if rows.is_empty() {
        return Ok(zero(tape));
    }
    let a = alpha.gather_rows(Rc::from(rows))?;
    let t = tape.constant(Tensor::matrix(rows.len(), 1, targets.to_vec()));
    let t_neg = tape.constant(Tensor::matrix(rows.len(), 1, targets.iter().map(|v| 1.0 - v).collect()));
    let ll = a.log()?.mul(t)?.add(a.one_minus().log()?.mul(t_neg)?)?;
    Ok(ll.sum().scale(-1.0 / rows.len() as f64))
}

/// InfoNCE of normalized `u` against normalized class prototypes; minimizing
/// it raises the agreement between the causal part and the label.
pub fn prototype_infonce<'t>(u: Var<'t>, prototypes: Var<'t>, labels: &[usize], tau: f64) -> Result<Var<'t>> {
    let tape = u.tape();
    if labels.is_empty() {
        return Ok(zero(tape));
    }
    let logits = u.normalize_rows().matmul(prototypes.normalize_rows().transpose())?.scale(1.0 / tau);
    let rows: Vec<usize> = (0..labels.len()).collect();
    cross_entropy(logits, &rows, labels)
}

/// InfoNCE between two views: row `i` of `a` should match row `i` of `b`
/// against every other row of `b`.
pub fn view_infonce<'t>(a: Var<'t>, b: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let tape = a.tape();
    let n = a.value().rows();
    if n == 0 {
        return Ok(zero(tape));
    }
    let logits = a.normalize_rows().matmul(b.normalize_rows().transpose())?.scale(1.0 / tau);
    let rows: Vec<usize> = (0..n).collect();
    cross_entropy(logits, &rows, &rows)
}

/// Scalar values of every loss component for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ce_causal: f64,
    pub ce_fusion: f64,
    pub ce_intervention: f64,
    pub ce_noncausal: f64,
    pub mi: f64,
    pub cond_mi: f64,
    pub pred_mi: f64,
    pub inv_mi: f64,
    pub orth: f64,
    pub contrastive: f64,
    pub center: f64,
    pub adaptive: f64,
    pub gate_conf: f64,
    pub total: f64,
}

impl LossBundle {
    pub const NAMES: [&'static str; 13] = [
        "ce_causal",
        "ce_fusion",
        "ce_intervention",
        "ce_noncausal",
        "mi",
        "cond_mi",
        "pred_mi",
        "inv_mi",
        "orth",
        "contrastive",
        "center",
        "adaptive",
        "gate_conf",
    ];

    pub fn components(&self) -> [f64; 13] {
        [
            self.ce_causal,
            self.ce_fusion,
            self.ce_intervention,
            self.ce_noncausal,
            self.mi,
            self.cond_mi,
            self.pred_mi,
            self.inv_mi,
            self.orth,
            self.contrastive,
            self.center,
            self.adaptive,
            self.gate_conf,
        ]
    }

    /// `Σ w_k · component_k`.
    pub fn weighted_sum(&self, weights: &LossWeights) -> f64 {
        self.components().iter().zip(weights.as_array()).map(|(c, w)| c * w).sum()
    }

    /// First non-finite component, total included.
    pub fn check_finite(&self) -> std::result::Result<(), ModelError> {
        let named = Self::NAMES.iter().copied().zip(self.components()).chain(std::iter::once(("total", self.total)));
        for (component, value) in named {
            if !value.is_finite() {
                return Err(ModelError::NonFinite { component, value });
            }
        }
        Ok(())
    }
}

/// Warm-up factor for the intervention and MI terms at `epoch` of `epochs`:
/// `1 − w · (1 − t)` with `t` running from 0 to 1.
pub fn ramp(weight: f64, epoch: usize, epochs: usize) -> f64 {
    1.0 - weight * (1.0 - progress(epoch, epochs))
}

pub fn progress(epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        1.0
    } else {
        (epoch as f64 / (epochs - 1) as f64).min(1.0)
    }
}
