//! Edge-enhanced graph attention policy with a per-step Gaussian head.
//!
//! Node inputs pass through a two-layer ELU embedding, `layers` attention
//! layers of the form
//!
//! ```text
//! h_i' = elu( sum_j alpha_ij W [h_i | e_ij | h_j] )
//! alpha_ij = softmax_j( leaky( a . [h_i | e_ij | h_j] ) )
//! ```
//!
//! and a linear head emitting five numbers per future step: the mean and a
//! Cholesky factor with exponentiated diagonal. Gradients are computed by a
//! hand-written reverse pass over exactly this architecture.

mod checkpoint;
mod model;
mod params;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{
    attention_coefficients, backward, egat_layer, forward, nll_loss, step_nll, GaussianPrediction, LOG_DIAG_RANGE,
    LossAndGrad,
};
pub use params::{ModelConfig, ModelParams, TapeGradients, Weights};
