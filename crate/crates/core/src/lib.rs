//! Confounder-aware graph attention network.
//!
//! Node embeddings from a GATv2 trunk are split by a learned feature gate into
//! a causal and a non-causal part. The two parts are pushed apart with a
//! contrastive mutual-information penalty, and the classifier is trained on
//! counterfactual recombinations so that predictions follow the causal part.

pub mod tensor;
pub mod graph;
pub mod layers;
pub mod model;
pub mod train;
pub mod verify;
