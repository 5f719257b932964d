use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of every network in the crate. Stage-two and classifier models only
/// read the fields they need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub fusion_layers: usize,
    pub pointer_layers: usize,
    /// Longest token sequence any network accepts, markers included.
    pub max_len: usize,
    /// Number of discourse slots the pointer network can index.
    pub max_sentences: usize,
    pub num_styles: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 128,
            heads: 4,
            ff_dim: 256,
            encoder_layers: 2,
            decoder_layers: 2,
            fusion_layers: 2,
            pointer_layers: 1,
            max_len: 128,
            max_sentences: 16,
            num_styles: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("fusion_layers", self.fusion_layers),
            ("pointer_layers", self.pointer_layers),
            ("max_len", self.max_len),
            ("max_sentences", self.max_sentences),
            ("num_styles", self.num_styles),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
