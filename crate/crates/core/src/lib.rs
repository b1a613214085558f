//! snapvit-core: single-shot structured pruning of vision transformers.
//!
//! The pipeline scores every prunable structure (attention heads, FFN
//! neurons) with a local curvature proxy from self-supervised gradients,
//! then searches for per-block correlation factors with an exponential
//! natural evolution strategy. The fused scores give one global ranking
//! from which sub-networks at any sparsity can be cut without retraining.

pub mod analytics;
pub mod artifact;
pub mod correction;
pub mod curvature;
pub mod data;
pub mod error;
pub mod fitness;
pub mod pruner;
pub mod ssl;
pub mod tensor;
pub mod vit;
pub mod xnes;

pub use error::{Result, SnapError};
pub use tensor::Tensor;
