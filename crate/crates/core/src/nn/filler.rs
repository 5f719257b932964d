use candle_core::{DType, Tensor, D};

use super::batch::{ban_bias, pad_ids};
use super::checkpoint::Checkpoint;
use super::layers::{key_padding_bias, Decoder, Memory, Stack};
use super::params::{Builder, Init, ParamStore};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::TokenEmbedder;
use crate::vocab::{Vocab, KEY_SEPARATOR};

pub const FILLER_KIND: &str = "filler";

/// Stage-two input: every keyword in order, each followed by the key
/// separator, then the masked text.
pub fn fill_conditioning(keywords: &[String], masked: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(2 * keywords.len() + masked.len());
    for k in keywords {
        out.push(k.clone());
        out.push(KEY_SEPARATOR.to_string());
    }
    out.extend_from_slice(masked);
    out
}

#[derive(Debug, Clone)]
struct FillNet {
    tok_emb: Tensor,
    pos_emb: Tensor,
    encoder: Stack,
    decoder: Decoder,
}

impl FillNet {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        let emb_std = Init::Normal(1.0 / (d as f64).sqrt());
        let mut vb = Builder::new(store, seed);
        let vb = &mut vb;
        Ok(Self {
            tok_emb: vb.param("tok_emb", &[cfg.vocab_size, d], emb_std)?,
            pos_emb: vb.param("pos_emb", &[cfg.max_len, d], emb_std)?,
            encoder: Stack::new(vb, "enc", cfg.encoder_layers, d, cfg.heads, cfg.ff_dim)?,
            decoder: Decoder::new(
                vb,
                "dec",
                cfg.decoder_layers,
                d,
                cfg.heads,
                cfg.ff_dim,
                cfg.vocab_size,
            )?,
        })
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct FillMeta {
    config: ModelConfig,
    vocab: Vec<String>,
    seed: u64,
}

/// Stage-two encoder-decoder that rewrites masked text into full text given
/// its keywords. It has no notion of style.
#[derive(Debug, Clone)]
pub struct FillModel {
    cfg: ModelConfig,
    vocab: Vocab,
    seed: u64,
    params: ParamStore,
    net: FillNet,
}

/// Encoded conditioning for a batch.
pub struct FillMemory {
    states: Tensor,
    lens: Vec<usize>,
}

impl FillModel {
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, vocab, seed, DType::F32)
    }

    pub fn with_dtype(cfg: ModelConfig, vocab: Vocab, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match a vocabulary of {} tokens",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        let mut params = ParamStore::new(dtype);
        let net = FillNet::build(&cfg, &mut params, seed)?;
        Ok(Self {
            cfg,
            vocab,
            seed,
            params,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn embed(&self, ids: &Tensor, offset: usize) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let tok = self
            .net
            .tok_emb
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, t, self.cfg.d_model))?;
        Ok(tok.broadcast_add(&self.net.pos_emb.narrow(0, offset, t)?)?)
    }

    fn check_len(&self, seqs: &[&[u32]]) -> Result<()> {
        if let Some(s) = seqs.iter().find(|s| s.len() > self.cfg.max_len) {
            return Err(Error::TooLong {
                len: s.len(),
                max: self.cfg.max_len,
            });
        }
        Ok(())
    }

    /// Encodes conditioning sequences built by [`fill_conditioning`].
    pub fn encode(&self, inputs: &[&[u32]]) -> Result<FillMemory> {
        self.check_len(inputs)?;
        let (ids, lens) = pad_ids(inputs, self.vocab.pad())?;
        let bias = key_padding_bias(&lens, ids.dim(1)?, self.params.dtype())?;
        Ok(FillMemory {
            states: self.net.encoder.forward(&self.embed(&ids, 0)?, Some(&bias))?,
            lens,
        })
    }

    fn memory(&self, enc: &FillMemory) -> Result<Memory> {
        self.net.decoder.memory(&enc.states, &enc.lens)
    }

    /// Teacher-forced logits `(B, T, V)`.
    pub fn decode(&self, enc: &FillMemory, prefixes: &[&[u32]]) -> Result<Tensor> {
        self.check_len(prefixes)?;
        let (ids, _) = pad_ids(prefixes, self.vocab.pad())?;
        self.net.decoder.forward(&self.embed(&ids, 0)?, &self.memory(enc)?)
    }

    /// Width-1 decoding that can never emit a mask, marker or separator.
    pub fn greedy(&self, inputs: &[&[u32]], max_new: &[usize]) -> Result<Vec<Vec<u32>>> {
        if max_new.len() != inputs.len() {
            return Err(Error::LengthMismatch(format!(
                "{} length limits for {} inputs",
                max_new.len(),
                inputs.len()
            )));
        }
        let enc = self.encode(inputs)?;
        let mem = self.memory(&enc)?;
        let b = inputs.len();
        let limit = max_new.iter().copied().max().unwrap_or(0).min(self.cfg.max_len);
        let ban = ban_bias(self.cfg.vocab_size, &self.vocab.banned_ids(false), self.params.dtype())?;
        let mut cache = self.net.decoder.new_cache();
        let bos = Tensor::from_vec(vec![self.vocab.bos(); b], (b, 1), &ParamStore::device())?;
        let mut x = self.embed(&bos, 0)?;
        let mut out = vec![Vec::new(); b];
        let mut done: Vec<bool> = max_new.iter().map(|&m| m == 0).collect();
        for t in 0..limit {
            if done.iter().all(|&d| d) {
                break;
            }
            let logits = self.net.decoder.step(&x, &mut cache, &mem)?.broadcast_add(&ban)?;
            let next = logits.squeeze(1)?.argmax(D::Minus1)?;
            for (i, id) in next.to_vec1::<u32>()?.into_iter().enumerate() {
                if done[i] {
                    continue;
                }
                if id == self.vocab.eos() {
                    done[i] = true;
                } else {
                    out[i].push(id);
                    done[i] = out[i].len() >= max_new[i];
                }
            }
            if t + 1 < limit {
                x = self.embed(&next.unsqueeze(1)?, t + 1)?;
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = FillMeta {
            config: self.cfg,
            vocab: self.vocab.tokens().to_vec(),
            seed: self.seed,
        };
        Ok(Checkpoint::new(
            FILLER_KIND,
            serde_json::to_value(meta)?,
            self.params.export()?,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(FILLER_KIND)?;
        let meta: FillMeta = serde_json::from_value(ckpt.meta.clone())?;
        let mut model = Self::new(meta.config, Vocab::from_tokens(meta.vocab), meta.seed)?;
        model.params.import(&ckpt.arrays_with_prefix(""))?;
        model.net = FillNet::build(&model.cfg, &mut model.params, model.seed)?;
        Ok(model)
    }
}

/// Contextual token vectors from the denoising encoder; longer inputs are
/// embedded window by window.
impl TokenEmbedder for FillModel {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f32>>> {
        let ids = self.vocab.encode(tokens);
        let mut out = Vec::with_capacity(ids.len());
        for window in ids.chunks(self.cfg.max_len) {
            let enc = self.encode(&[window])?;
            out.extend(enc.states.get(0)?.to_dtype(DType::F32)?.to_vec2::<f32>()?);
        }
        Ok(out)
    }
}
