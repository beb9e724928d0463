use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::layers::{AttentionKind, MiConfig};

/// Weights of the thirteen loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
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
    /// Strength of the warm-up ramp on the intervention and MI terms.
    pub adaptive: f64,
    pub gate_conf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce_causal: 0.5,
            ce_fusion: 1.0,
            ce_intervention: 0.5,
            ce_noncausal: 0.1,
            mi: 0.1,
            cond_mi: 0.1,
            pred_mi: 0.1,
            inv_mi: 0.1,
            orth: 0.1,
            contrastive: 0.05,
            center: 0.05,
            adaptive: 1.0,
            gate_conf: 0.1,
        }
    }
}

impl LossWeights {
    /// Only the fusion cross-entropy.
    pub fn supervised_only() -> Self {
        Self {
            ce_causal: 0.0,
            ce_fusion: 1.0,
            ce_intervention: 0.0,
            ce_noncausal: 0.0,
            mi: 0.0,
            cond_mi: 0.0,
            pred_mi: 0.0,
            inv_mi: 0.0,
            orth: 0.0,
            contrastive: 0.0,
            center: 0.0,
            adaptive: 0.0,
            gate_conf: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 13] {
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

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(ModelError::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub noise_scale: f64,
    pub mask_rate: f64,
    pub edge_drop_rate: f64,
    pub edge_add_rate: f64,
    pub noise: bool,
    pub mask: bool,
    pub edges: bool,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            noise_scale: 0.1,
            mask_rate: 0.1,
            edge_drop_rate: 0.05,
            edge_add_rate: 0.05,
            noise: true,
            mask: true,
            edges: true,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Every mechanism switched off.
    pub fn disabled() -> Self {
        Self { noise: false, mask: false, edges: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("mask_rate", self.mask_rate),
            ("edge_drop_rate", self.edge_drop_rate),
            ("edge_add_rate", self.edge_add_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ModelError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(ModelError::Config(format!("noise_scale = {} must be finite and ≥ 0", self.noise_scale)));
        }
        Ok(())
    }

    /// True when training and inference forwards coincide.
    pub fn is_identity(&self) -> bool {
        let noise = self.noise && self.noise_scale > 0.0;
        let mask = self.mask && self.mask_rate > 0.0;
        let edges = self.edges && (self.edge_drop_rate > 0.0 || self.edge_add_rate > 0.0);
        !(noise || mask || edges)
    }
}

/// How the pathway-independence penalty is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiMode {
    /// Dual encoders, negative queues and the conditional term.
    Queue,
    /// One shared encoder with in-batch negatives and no conditional term.
    Basic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub num_classes: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub encoder_layers: usize,
    pub attention: AttentionKind,
    pub mi: MiConfig,
    pub mi_mode: MiMode,
    /// `None` learns the feature and fusion gates; `Some(v)` pins both to `v`.
    pub fixed_gate: Option<f64>,
    /// Temperature of the supervised-contrastive, prototype and invariance terms.
    pub contrastive_temperature: f64,
    pub center_decay: f64,
    /// Rows drawn for the quadratic-cost terms.
    pub sample_cap: usize,
    pub weights: LossWeights,
    pub augment: AugmentationConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(in_dim: usize, num_classes: usize) -> Self {
        Self {
            in_dim,
            num_classes,
            heads: 4,
            head_dim: 16,
            encoder_layers: 2,
            attention: AttentionKind::GatV2,
            mi: MiConfig::default(),
            mi_mode: MiMode::Queue,
            fixed_gate: None,
            contrastive_temperature: 0.5,
            center_decay: 0.9,
            sample_cap: 512,
            weights: LossWeights::default(),
            augment: AugmentationConfig::default(),
            seed: 0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_dim == 0 || self.num_classes < 2 {
            return Err(ModelError::Config("need at least one feature and two classes".into()));
        }
        if self.heads == 0 || self.head_dim == 0 || self.encoder_layers == 0 {
            return Err(ModelError::Config("heads, head_dim and encoder_layers must be positive".into()));
        }
        if !(self.mi.temperature > 0.0 && self.contrastive_temperature > 0.0) {
            return Err(ModelError::Config("temperatures must be positive".into()));
        }
        if self.mi.projection_dim == 0 {
            return Err(ModelError::Config("projection_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.center_decay) {
            return Err(ModelError::Config(format!("center_decay = {} outside [0, 1)", self.center_decay)));
        }
        if let Some(v) = self.fixed_gate {
            if !(v > 0.0 && v < 1.0) {
                return Err(ModelError::Config(format!("fixed gate {v} outside (0, 1)")));
            }
        }
        if self.sample_cap < 2 {
            return Err(ModelError::Config("sample_cap must be at least 2".into()));
        }
        self.weights.validate()?;
        self.augment.validate()
    }
}
