//! Time-series segmentation with a windowed sequence-to-sequence network.
//!
//! A cycle of `S` sensor channels over `T` timesteps is cut into `N`
//! non-overlapping windows. A two-stream dilated CNN encodes each window, a
//! two-layer bidirectional LSTM relates windows to each other, and a CNN
//! refinement head turns the window context back into one class
//! distribution per timestep. Training optimises a weighted sum of a coarse
//! window-level loss and the dense final loss.
//!
//! Modules:
//! - [`substrate`]: tensors, layer kernels, reverse-mode graph, Adam
//! - [`model`]: the network, its ablation variants and parameter counting
//! - [`data`]: cycle I/O, normalisation, padding, splits, synthetic cycles
//! - [`metrics`]: accuracy, macro-F1, changepoint precision / recall
//! - [`train`]: dual-loss training, early stopping, evaluation, checkpoints
//! - [`cli`]: configuration documents and the command implementations

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod substrate;
pub mod train;

pub use error::{Error, Result};
pub use substrate::Tensor;
