//! Deep temporal clustering of gridded multivariate spatiotemporal data.
//!
//! The pipeline ingests a 4D grid (time x lon x lat x variables), learns
//! latent embeddings with a convolutional-recurrent U-Net autoencoder whose
//! bottleneck couples per-time-slice graph attention with a bidirectional
//! recurrent summary, clusters time steps with a Student's-t soft-assignment
//! head trained against a sharpened target distribution, and scores the
//! result with six internal validation metrics next to k-means and
//! hierarchical baselines.

pub mod eval;
pub mod grid;
pub mod layers;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, TensorError, Var};
