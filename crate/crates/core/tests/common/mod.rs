#![allow(dead_code)]

use candle_core::DType;
use restyle::corpus::{Story, StyleVocabulary};
use restyle::nn::{FillModel, ModelConfig, StyleClassifier, TransferModel};
use restyle::synthetic::{generate, SyntheticConfig};
use restyle::vocab::Vocab;
use restyle::workflow::build_vocab;

pub struct Fixture {
    pub styles: StyleVocabulary,
    pub stories: Vec<Story>,
    pub vocab: Vocab,
    pub cfg: ModelConfig,
}

pub fn fixture(per_style: usize) -> Fixture {
    let (styles, stories) = generate(&SyntheticConfig {
        per_style,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let vocab = build_vocab(&stories);
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        heads: 2,
        ff_dim: 32,
        encoder_layers: 1,
        decoder_layers: 1,
        fusion_layers: 1,
        pointer_layers: 1,
        max_len: 64,
        max_sentences: 8,
        num_styles: styles.len(),
    };
    Fixture {
        styles,
        stories,
        vocab,
        cfg,
    }
}

impl Fixture {
    pub fn transfer(&self, dtype: DType) -> TransferModel {
        TransferModel::with_dtype(self.cfg, self.vocab.clone(), self.styles.clone(), 11, dtype).unwrap()
    }

    pub fn classifier(&self, dtype: DType) -> StyleClassifier {
        StyleClassifier::with_dtype(self.cfg, self.vocab.clone(), self.styles.clone(), 12, dtype).unwrap()
    }

    pub fn filler(&self, dtype: DType) -> FillModel {
        FillModel::with_dtype(self.cfg, self.vocab.clone(), 13, dtype).unwrap()
    }
}

pub fn scalar(t: &candle_core::Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}
