//! Synthetic rope inspection data.

pub mod augment;
pub mod describe;
pub mod manifest;
pub mod splits;
pub mod synth;

pub use splits::{make_splits, Dataset, NormStats, Split, SplitCounts, Splits};
pub use synth::{generate_sample, Sample};
