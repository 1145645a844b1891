//! Cycle ingestion, label encoding, normalisation, padding, dataset splits
//! and a synthetic cycle generator.

mod cycle;
mod io;
mod prep;
mod synth;

pub use cycle::{Alphabet, Cycle, PAD_LABEL};
pub use io::{load_cycle, DEFAULT_SAMPLE_RATE_HZ, read_manifest, write_cycle, write_manifest, ManifestEntry, SplitName};
pub use prep::{
    decode, global_minima, one_hot, pad_min_value, pad_split, pad_with_values, padded_length, split_dataset,
    split_sizes, zscore_normalize, DatasetSplit, NormStats, PadMode, PaddedSplit,
};
pub use synth::{synth_generate, StateSignature, SynthSpec};
