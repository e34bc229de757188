//! Everything around the networks: run configuration, dataset files,
//! checkpoints, and the assembled train/eval/bench pipeline.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pipeline;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint};
pub use config::RunConfig;
pub use dataset::{generate, load_samples, Sample, SynthOptions};
pub use pipeline::{BenchRow, EpochLog, PrGcn, TrainLog};
