use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub d_model: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    #[serde(default)]
    pub encoder_layers: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub moca: bool,
    /// Query state `Q^(l)` used by the alignment loss; `Q^(1)` is the learned
    /// initial query set and `Q^(l)` the output of decoder layer `l − 1`.
    pub qra_layer: usize,
}

impl DetectorConfig {
    /// Desk-scale defaults for 64×64 inputs.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            d_model: 64,
            num_queries: 25,
            decoder_layers: 6,
            heads: 4,
            patch_size: 8,
            encoder_layers: 1,
            ffn_dim: 128,
            num_classes,
            moca: true,
            qra_layer: 5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.heads >= 1, Validation, "detector.heads must be >= 1");
        ensure!(
            self.d_model % self.heads == 0,
            Validation,
            "detector.d_model {} not divisible by detector.heads {}",
            self.d_model,
            self.heads
        );
        ensure!(
            self.d_model % 4 == 0 && self.d_model >= 4,
            Validation,
            "detector.d_model {} must be a positive multiple of 4 (2D positional encoding)",
            self.d_model
        );
        ensure!(self.num_queries >= 1, Validation, "detector.num_queries must be >= 1");
        ensure!(
            self.decoder_layers >= 2,
            Validation,
            "detector.decoder_layers must be >= 2, got {}",
            self.decoder_layers
        );
        ensure!(self.patch_size >= 1, Validation, "detector.patch_size must be >= 1");
        ensure!(self.ffn_dim >= 1, Validation, "detector.ffn_dim must be >= 1");
        ensure!(self.num_classes >= 1, Validation, "detector.num_classes must be >= 1");
        ensure!(
            (2..=self.decoder_layers).contains(&self.qra_layer),
            Validation,
            "detector.qra_layer {} outside [2, {}]",
            self.qra_layer,
            self.decoder_layers
        );
        Ok(())
    }
}

/// How the decoder treats the modality token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MocaMode {
    /// Plain decoder; any token is ignored.
    Off,
    /// Token row appended to the self-attention input of every layer.
    On,
    /// Token row appended but its key column removed from every softmax.
    MaskedToken,
}
