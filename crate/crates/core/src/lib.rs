//! Discourse-level author-style transfer for multi-sentence stories.
//!
//! Transfer runs in two stages. Stage one masks style-specific keywords,
//! encodes the masked story into one discourse vector per sentence, fuses
//! those vectors with a learnable target-style embedding and decodes a
//! restyled, still-masked story. Stage two is a style-agnostic denoising
//! model that fills the masks back in from the extracted keywords.
//!
//! Module map:
//! - [`corpus`], [`text`], [`synthetic`]: data handling and a seeded toy corpus
//! - [`keywords`]: style-specific keyword dictionaries and masking
//! - [`nn`]: encoder, fusion, pointer network, decoder, style classifier
//! - [`objectives`]: the training losses
//! - [`trainer`]: classifier, stage-one and stage-two training loops
//! - [`pipeline`]: two-stage inference
//! - [`eval`]: automatic metrics and stylistic-feature analysis
//! - [`config`]: run configuration and presets
//! - [`workflow`]: end-to-end training and scoring

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod keywords;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod synthetic;
pub mod text;
pub mod trainer;
pub mod vocab;
pub mod workflow;

pub use error::{Error, Result};
