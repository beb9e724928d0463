//! Building blocks: graph attention, the disentangling feature gate, the
//! mutual-information estimator and the fusion gate.

mod fusion;
mod gat;
mod gate;
mod linear;
mod mi;

pub use fusion::{mix, Fused, FusionGate};
pub use gat::{attention_importance, AttentionKind, GatLayer, GatOutput, DEFAULT_NEGATIVE_SLOPE};
pub use gate::{Disentangled, FeatureGate, MAX_LOGIT};
pub use linear::{glorot, Linear};
pub use mi::{
    basic_mi_loss, orthogonality_loss, ConditionalMiOutput, EmbeddingQueue, MiConfig, MiEstimator, MiOutput,
    Projection,
};

#[cfg(test)]
mod tests;
