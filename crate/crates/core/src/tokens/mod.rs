//! Modality tokens: prompts, raw text vectors, the registry, the learnable
//! projection into model space, and cluster-separation analysis.

mod projection;
mod prompt;
mod registry;
mod silhouette;
mod synth;

pub use projection::{project_on_tape, project_token, TokenProjection};
pub use prompt::{build_prompt, PromptSpec, MEDICAL_CATEGORIES};
pub use registry::{EmbeddingSource, RawEmbedding, TokenRegistry};
pub use silhouette::silhouette_score;
pub use synth::{fnv1a64, synth_embedding, SplitMix64};
