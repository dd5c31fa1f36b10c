//! Data synthesis, training, evaluation and model bundles.

pub mod bundle_io;
pub mod dataset;
pub mod eval;
pub mod gradsuite;
pub mod scenes;
pub mod train;

pub use bundle_io::{load_bundle, save_bundle};
pub use dataset::{load_split, synth_dataset, DatasetManifest, LoadedSample, Split, SynthOptions};
pub use eval::{evaluate, infer};
pub use train::{train, Stage, TrainConfig};
