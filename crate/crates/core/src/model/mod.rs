//! Desk-scale decoder-only transformer.

mod config;
mod forward;
mod graph;
mod io;
pub mod synth;

pub use config::{ModelConfig, TransformState};
pub use forward::{
    forward, forward_batch, forward_capture, forward_trace, norm_rows, sample_sequences, Trace,
};
pub use graph::{
    absorb_rmsnorm, energy_fraction, Capture, LayerWeights, Linear, LinearKind, ModelGraph,
    TransformMeta,
};
pub use io::{load_model, save_model, CONFIG_FILE, TRANSFORM_FILE, WEIGHTS_FILE};
pub use synth::{synth_model, OutlierSpec, SynthSpec};
