//! The segmentation network: windowing, the three stages, both prediction
//! heads, parameter counting and the ablation variants.

mod config;
mod count;
mod network;
mod windows;

pub use config::{MergeMode, ModelConfig, Variant};
pub use count::{count_params, LayerCount, LayerDims, ParamCount};
pub use network::{make_ablation, DualPrediction, Heads, PrecTime};
pub use windows::{merge_windows, split_windows, unsplit_windows, WindowBatch};
