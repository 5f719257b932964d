//! Networks: the stage-one transfer model, the style classifier and the
//! stage-two mask filler, plus their checkpoint format.

mod batch;
mod checkpoint;
mod classifier;
mod config;
mod filler;
mod layers;
mod params;
mod transfer;

pub use batch::MarkedIds;
pub use checkpoint::{Checkpoint, NamedArray, FORMAT_VERSION, MAGIC};
pub use classifier::{StyleClassifier, CLASSIFIER_KIND};
pub use config::ModelConfig;
pub use filler::{fill_conditioning, FillModel, FILLER_KIND};
pub use layers::{log_softmax_last, softmax_last};
pub use params::ParamStore;
pub use transfer::{bilinear_pointer_probs, DiscourseBundle, FusedBundle, TransferModel, TRANSFER_KIND};

pub(crate) use batch::teacher_pairs;
pub(crate) use layers::length_mask;

use serde::{Deserialize, Serialize};

use crate::corpus::StyleVocabulary;
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Everything besides the arrays needed to rebuild a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub styles: Vec<String>,
    pub seed: u64,
}

impl ModelMeta {
    pub fn new(config: ModelConfig, vocab: &Vocab, styles: &StyleVocabulary, seed: u64) -> Self {
        Self {
            config,
            vocab: vocab.tokens().to_vec(),
            styles: styles.names().to_vec(),
            seed,
        }
    }

    /// Validates the config against the vocabularies it is paired with.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.config.vocab_size != self.vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match a vocabulary of {} tokens",
                self.config.vocab_size,
                self.vocab.len()
            )));
        }
        if self.config.num_styles != self.styles.len() {
            return Err(Error::Config(format!(
                "num_styles {} does not match {} style names",
                self.config.num_styles,
                self.styles.len()
            )));
        }
        Ok(())
    }

    pub fn vocabularies(&self) -> Result<(Vocab, StyleVocabulary)> {
        Ok((
            Vocab::from_tokens(self.vocab.clone()),
            StyleVocabulary::new(self.styles.iter().cloned())?,
        ))
    }
}
