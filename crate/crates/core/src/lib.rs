//! Sparse autoencoders for activation interpretability.
//!
//! The centerpiece is a cross-attention SAE whose concept weights come from
//! a sparsemax over query–concept similarities, so each sample selects its
//! own number of active concepts. MLP SAEs with ReLU, JumpReLU, gated,
//! TopK and BatchTopK activations are provided as baselines.
//!
//! Modules, bottom-up:
//!
//! * [`numeric`]: dense `f64` matrices and the seeded random stream.
//! * [`activations`]: sparsemax (with its exact vector-Jacobian product and
//!   an enumeration oracle), softmax, ReLU, JumpReLU, TopK, BatchTopK.
//! * [`models`]: both architectures with hand-written backward passes and
//!   the checkpoint format.
//! * [`training`]: loss, Adam, dead-concept tracking, the training loop.
//! * [`data`]: synthetic superposition data and activation files.
//! * [`metrics`]: NMSE, FVU, L0, cosine similarity, dictionary recovery,
//!   K* estimation, activation histograms.

// `!(x > 0.0)` is used on purpose so NaN is rejected, and the numeric
// kernels index several parallel arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod activations;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod numeric;
pub mod training;

pub use activations::{sparsemax, sparsemax_vjp, SparseCode};
pub use error::{Error, Result};
pub use models::{
    ActivationKind, Architecture, AttnSae, Forward, Gradients, MlpSae, Model, ModelConfig, Sae,
    Seeds,
};
pub use numeric::{Matrix, Rng};
