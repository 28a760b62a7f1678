//! Data, configuration, training and evaluation around the networks.

pub mod augment;
pub mod checks;
pub mod config;
pub mod metrics;
pub mod store;
pub mod synth;
pub mod train;

pub use config::{Profile, RunConfig};
pub use synth::{generate_clip, generate_dataset, Motion, RgbdClip, SynthSpec, Task};
pub use train::{evaluate, Evaluation, FusionModes, Trainer};
