//! Toy DETR-style detector: patch backbone with fixed 2D positions, optional
//! encoder, and a decoder whose self-attention can take the projected modality
//! token as an extra row.

mod bench;
mod checkpoint;
mod config;
mod model;
mod params;

pub use bench::{latency_bench, LatencyReport};
pub use checkpoint::{
    checkpoint_paths, load_checkpoint, round_to_f32, save_checkpoint, CheckpointHeader, CheckpointManifest,
    TensorEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use config::{DetectorConfig, MocaMode};
pub use model::{
    extract_patches, moca_augment, multi_head_attention, sine_position_encoding, AttnVars, BoundDetector,
    Detector, ForwardOptions, ForwardOutput, LayerOutput, CLASS_PRIOR_BIAS,
};
pub use params::ParamSet;
pub(crate) use params::Init;

#[cfg(test)]
mod tests;
