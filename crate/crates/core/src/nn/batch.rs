use candle_core::{DType, Tensor};

use super::ParamStore;
use crate::corpus::MarkedText;
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Encoder input: marked token ids and the indices of their markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedIds {
    pub ids: Vec<u32>,
    pub markers: Vec<usize>,
}

impl MarkedIds {
    pub fn from_marked(marked: &MarkedText, vocab: &Vocab) -> Self {
        Self {
            ids: vocab.encode(&marked.tokens),
            markers: marked.marker_positions.clone(),
        }
    }
}

/// Right-padded `(B, T)` id matrix plus the true lengths.
pub(crate) fn pad_ids(seqs: &[&[u32]], pad: u32) -> Result<(Tensor, Vec<usize>)> {
    if seqs.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let t = lens.iter().copied().max().unwrap_or(0).max(1);
    let mut data = Vec::with_capacity(seqs.len() * t);
    for s in seqs {
        data.extend_from_slice(s);
        data.extend(std::iter::repeat_n(pad, t - s.len()));
    }
    Ok((
        Tensor::from_vec(data, (seqs.len(), t), &ParamStore::device())?,
        lens,
    ))
}

/// Additive `(V,)` bias that rules out `banned` tokens.
pub(crate) fn ban_bias(vocab_size: usize, banned: &[u32], dtype: DType) -> Result<Tensor> {
    let mut data = vec![0.0f64; vocab_size];
    for &b in banned {
        if (b as usize) < vocab_size {
            data[b as usize] = super::layers::NEG_INF;
        }
    }
    Ok(Tensor::from_vec(data, vocab_size, &ParamStore::device())?.to_dtype(dtype)?)
}

/// Decoder input (`bos` + target) and output (target + `eos`) for teacher forcing.
pub(crate) fn teacher_pairs(targets: &[&[u32]], vocab: &Vocab) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let inputs = targets
        .iter()
        .map(|t| std::iter::once(vocab.bos()).chain(t.iter().copied()).collect())
        .collect();
    let outputs = targets
        .iter()
        .map(|t| t.iter().copied().chain(std::iter::once(vocab.eos())).collect())
        .collect();
    (inputs, outputs)
}
