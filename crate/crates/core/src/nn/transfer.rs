use candle_core::{DType, Tensor, D};

use super::batch::{ban_bias, pad_ids, MarkedIds};
use super::checkpoint::Checkpoint;
use super::layers::{key_padding_bias, length_mask, softmax_last, Decoder, Memory, Stack};
use super::params::{Builder, Init, ParamStore};
use super::{ModelConfig, ModelMeta};
use crate::corpus::{StyleId, StyleVocabulary};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

pub const TRANSFER_KIND: &str = "transfer";

/// Encoder output for a batch: full token states and the states gathered at
/// sentence markers, zero-padded to the longest story.
#[derive(Debug, Clone)]
pub struct DiscourseBundle {
    /// `(B, T, d)`
    pub token_states: Tensor,
    pub token_lens: Vec<usize>,
    /// `(B, N, d)`
    pub reps: Tensor,
    /// Sentence count per sample.
    pub counts: Vec<usize>,
}

impl DiscourseBundle {
    pub fn batch_size(&self) -> usize {
        self.counts.len()
    }

    /// The `n` discourse vectors of sample `b`.
    pub fn sample_reps(&self, b: usize) -> Result<Vec<Vec<f32>>> {
        let n = self.counts[b];
        Ok(self
            .reps
            .get(b)?
            .narrow(0, 0, n)?
            .to_dtype(DType::F32)?
            .to_vec2::<f32>()?)
    }

    /// `(B, d)` mean of each sample's valid discourse vectors.
    pub fn mean_reps(&self) -> Result<Tensor> {
        let n = self.reps.dim(1)?;
        let mask = length_mask(&self.counts, n, self.reps.dtype())?.unsqueeze(2)?;
        let counts: Vec<f64> = self.counts.iter().map(|&c| c as f64).collect();
        let counts = Tensor::from_vec(counts, (self.counts.len(), 1), &ParamStore::device())?
            .to_dtype(self.reps.dtype())?;
        Ok(self.reps.broadcast_mul(&mask)?.sum(1)?.broadcast_div(&counts)?)
    }
}

/// Fusion output: slot 0 holds the style, slots `1..=n` the sentences.
#[derive(Debug, Clone)]
pub struct FusedBundle {
    /// `(B, N + 1, d)`
    pub fused: Tensor,
    pub counts: Vec<usize>,
}

impl FusedBundle {
    pub fn slot_counts(&self) -> Vec<usize> {
        self.counts.iter().map(|c| c + 1).collect()
    }

    /// The `n + 1` fused vectors of sample `b`.
    pub fn sample(&self, b: usize) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .fused
            .get(b)?
            .narrow(0, 0, self.counts[b] + 1)?
            .to_dtype(DType::F32)?
            .to_vec2::<f32>()?)
    }
}

/// Row-softmax of `Z W Zᵀ` for one sample's pointer states `Z` `(n, d)`.
pub fn bilinear_pointer_probs(z: &Tensor, w: &Tensor) -> Result<Tensor> {
    if z.dim(0)? == 0 {
        return Err(Error::Empty("pointer scores need at least one sentence".into()));
    }
    softmax_last(&z.matmul(w)?.matmul(&z.t()?)?)
}

#[derive(Debug, Clone)]
struct TransferNet {
    tok_emb: Tensor,
    pos_emb: Tensor,
    style_emb: Tensor,
    encoder: Stack,
    fusion: Stack,
    slot_emb: Tensor,
    pointer: Stack,
    pointer_w: Tensor,
    decoder: Decoder,
}

impl TransferNet {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        let emb_std = Init::Normal(1.0 / (d as f64).sqrt());
        let mut vb = Builder::new(store, seed);
        let vb = &mut vb;
        Ok(Self {
            tok_emb: vb.param("tok_emb", &[cfg.vocab_size, d], emb_std)?,
            pos_emb: vb.param("pos_emb", &[cfg.max_len, d], emb_std)?,
            style_emb: vb.param("style_emb", &[cfg.num_styles, d], Init::Normal(1.0))?,
            encoder: Stack::new(vb, "enc", cfg.encoder_layers, d, cfg.heads, cfg.ff_dim)?,
            fusion: Stack::new(vb, "fusion", cfg.fusion_layers, d, cfg.heads, cfg.ff_dim)?,
            slot_emb: vb.param("pointer.slot_emb", &[cfg.max_sentences, d], emb_std)?,
            pointer: Stack::new(vb, "pointer", cfg.pointer_layers, d, cfg.heads, cfg.ff_dim)?,
            pointer_w: vb.param("pointer.w", &[d, d], Init::Normal(1.0 / d as f64))?,
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

/// Stage-one network: encoder, style fusion, pointer network and decoder.
#[derive(Debug, Clone)]
pub struct TransferModel {
    cfg: ModelConfig,
    vocab: Vocab,
    styles: StyleVocabulary,
    seed: u64,
    params: ParamStore,
    net: TransferNet,
}

impl TransferModel {
    pub fn new(cfg: ModelConfig, vocab: Vocab, styles: StyleVocabulary, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, vocab, styles, seed, DType::F32)
    }

    pub fn with_dtype(
        cfg: ModelConfig,
        vocab: Vocab,
        styles: StyleVocabulary,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let meta = ModelMeta::new(cfg, &vocab, &styles, seed);
        meta.check()?;
        let mut params = ParamStore::new(dtype);
        let net = TransferNet::build(&cfg, &mut params, seed)?;
        Ok(Self {
            cfg,
            vocab,
            styles,
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

    pub fn styles(&self) -> &StyleVocabulary {
        &self.styles
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Token plus learned absolute position embeddings for ids `(B, T)`.
    fn embed(&self, ids: &Tensor, offset: usize) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let tok = self
            .net
            .tok_emb
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, t, self.cfg.d_model))?;
        Ok(tok.broadcast_add(&self.net.pos_emb.narrow(0, offset, t)?)?)
    }

    fn position(&self, t: usize) -> Result<Tensor> {
        Ok(self.net.pos_emb.narrow(0, t, 1)?.unsqueeze(0)?)
    }

    /// Encodes marked stories and gathers the states at their markers.
    pub fn encode(&self, inputs: &[MarkedIds]) -> Result<DiscourseBundle> {
        for m in inputs {
            if m.ids.len() > self.cfg.max_len {
                return Err(Error::TooLong {
                    len: m.ids.len(),
                    max: self.cfg.max_len,
                });
            }
            if m.markers.is_empty() {
                return Err(Error::Validation("input has no sentence markers".into()));
            }
            if let Some(&p) = m.markers.iter().find(|&&p| p >= m.ids.len()) {
                return Err(Error::Validation(format!("marker position {p} out of range")));
            }
        }
        let seqs: Vec<&[u32]> = inputs.iter().map(|m| m.ids.as_slice()).collect();
        let (ids, lens) = pad_ids(&seqs, self.vocab.pad())?;
        let (b, t) = ids.dims2()?;
        let bias = key_padding_bias(&lens, t, self.dtype())?;
        let states = self.net.encoder.forward(&self.embed(&ids, 0)?, Some(&bias))?;

        let counts: Vec<usize> = inputs.iter().map(|m| m.markers.len()).collect();
        let n = counts.iter().copied().max().unwrap_or(1);
        let zero_row = (b * t) as u32;
        let mut index = Vec::with_capacity(b * n);
        for (i, m) in inputs.iter().enumerate() {
            index.extend(m.markers.iter().map(|&p| (i * t + p) as u32));
            index.extend(std::iter::repeat_n(zero_row, n - m.markers.len()));
        }
        let d = self.cfg.d_model;
        let flat = Tensor::cat(
            &[
                states.reshape((b * t, d))?,
                Tensor::zeros((1, d), self.dtype(), &ParamStore::device())?,
            ],
            0,
        )?;
        let index = Tensor::from_vec(index, b * n, &ParamStore::device())?;
        let reps = flat.index_select(&index, 0)?.reshape((b, n, d))?;
        Ok(DiscourseBundle {
            token_states: states,
            token_lens: lens,
            reps,
            counts,
        })
    }

    /// Self-attention over `[s; r_1 … r_n]` for each sample's style `s`.
    pub fn fuse(&self, styles: &[StyleId], bundle: &DiscourseBundle) -> Result<FusedBundle> {
        if styles.len() != bundle.batch_size() {
            return Err(Error::LengthMismatch(format!(
                "{} styles for {} samples",
                styles.len(),
                bundle.batch_size()
            )));
        }
        let ids = styles
            .iter()
            .map(|s| {
                if s.0 < self.cfg.num_styles {
                    Ok(s.0 as u32)
                } else {
                    Err(Error::StyleOutOfRange(s.0))
                }
            })
            .collect::<Result<Vec<u32>>>()?;
        let ids = Tensor::from_vec(ids, styles.len(), &ParamStore::device())?;
        let s = self.net.style_emb.index_select(&ids, 0)?.unsqueeze(1)?;
        self.fuse_vectors(&s, bundle)
    }

    /// Fusion with explicit style vectors `(B, 1, d)`.
    pub fn fuse_vectors(&self, style: &Tensor, bundle: &DiscourseBundle) -> Result<FusedBundle> {
        let x = Tensor::cat(&[style, &bundle.reps], 1)?;
        let slots: Vec<usize> = bundle.counts.iter().map(|c| c + 1).collect();
        let bias = key_padding_bias(&slots, x.dim(1)?, self.dtype())?;
        Ok(FusedBundle {
            fused: self.net.fusion.forward(&x, Some(&bias))?,
            counts: bundle.counts.clone(),
        })
    }

    /// Masked ordering logits `(B, N, N)`: row `i` scores every position for
    /// the `i`-th input sentence.
    pub fn pointer_scores(&self, fused: &FusedBundle) -> Result<Tensor> {
        let (b, slots, d) = fused.fused.dims3()?;
        let n = slots - 1;
        if n == 0 || fused.counts.iter().any(|&c| c == 0) {
            return Err(Error::Empty("pointer scores need at least one sentence".into()));
        }
        if n > self.cfg.max_sentences {
            return Err(Error::TooLong {
                len: n,
                max: self.cfg.max_sentences,
            });
        }
        let disc = fused
            .fused
            .narrow(1, 1, n)?
            .broadcast_add(&self.net.slot_emb.narrow(0, 0, n)?)?;
        let bias = key_padding_bias(&fused.counts, n, self.dtype())?;
        let z = self.net.pointer.forward(&disc, Some(&bias))?;
        let zw = z.reshape((b * n, d))?.matmul(&self.net.pointer_w)?.reshape((b, n, d))?;
        let scores = zw.matmul(&z.transpose(1, 2)?.contiguous()?)?;
        Ok(scores.broadcast_add(&bias.squeeze(1)?)?)
    }

    /// Per-sample `n × n` ordering distributions.
    pub fn pointer_predict(&self, fused: &FusedBundle) -> Result<Vec<Vec<Vec<f64>>>> {
        let probs = softmax_last(&self.pointer_scores(fused)?)?
            .to_dtype(DType::F64)?
            .to_vec3::<f64>()?;
        Ok(probs
            .into_iter()
            .zip(&fused.counts)
            .map(|(rows, &n)| rows.into_iter().take(n).map(|r| r[..n].to_vec()).collect())
            .collect())
    }

    fn memory(&self, fused: &FusedBundle) -> Result<Memory> {
        self.net.decoder.memory(&fused.fused, &fused.slot_counts())
    }

    /// Teacher-forced next-token logits `(B, T, V)` for each prefix.
    pub fn decode(&self, fused: &FusedBundle, prefixes: &[&[u32]]) -> Result<Tensor> {
        if let Some(p) = prefixes.iter().find(|p| p.len() > self.cfg.max_len) {
            return Err(Error::TooLong {
                len: p.len(),
                max: self.cfg.max_len,
            });
        }
        let (ids, _) = pad_ids(prefixes, self.vocab.pad())?;
        let mem = self.memory(fused)?;
        self.net.decoder.forward(&self.embed(&ids, 0)?, &mem)
    }

    fn bos_input(&self, b: usize) -> Result<Tensor> {
        let ids = Tensor::from_vec(vec![self.vocab.bos(); b], (b, 1), &ParamStore::device())?;
        self.embed(&ids, 0)
    }

    /// Autoregressive rollout that feeds back the probability-weighted mix
    /// of token embeddings. Returns `(B, steps, V)` distributions.
    pub fn soft_decode(&self, fused: &FusedBundle, steps: usize, temperature: f64) -> Result<Tensor> {
        if steps == 0 || steps > self.cfg.max_len {
            return Err(Error::Validation(format!(
                "soft decoding needs 1..={} steps, got {steps}",
                self.cfg.max_len
            )));
        }
        if temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let b = fused.counts.len();
        let ban = ban_bias(self.cfg.vocab_size, &self.vocab.banned_ids(true), self.dtype())?;
        let mem = self.memory(fused)?;
        let mut cache = self.net.decoder.new_cache();
        let mut x = self.bos_input(b)?;
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let logits = self.net.decoder.step(&x, &mut cache, &mem)?.broadcast_add(&ban)?;
            let p = softmax_last(&(logits / temperature)?)?;
            if t + 1 < steps {
                let mixed = p.squeeze(1)?.matmul(&self.net.tok_emb)?.unsqueeze(1)?;
                x = mixed.broadcast_add(&self.position(t + 1)?)?;
            }
            out.push(p);
        }
        Ok(Tensor::cat(&out, 1)?)
    }

    /// Width-1 decoding; each sample stops at `eos` or after `max_new[b]` tokens.
    pub fn greedy(&self, fused: &FusedBundle, max_new: &[usize]) -> Result<Vec<Vec<u32>>> {
        let b = fused.counts.len();
        if max_new.len() != b {
            return Err(Error::LengthMismatch(format!(
                "{} length limits for {b} samples",
                max_new.len()
            )));
        }
        let limit = max_new.iter().copied().max().unwrap_or(0).min(self.cfg.max_len);
        let ban = ban_bias(self.cfg.vocab_size, &self.vocab.banned_ids(true), self.dtype())?;
        let mem = self.memory(fused)?;
        let mut cache = self.net.decoder.new_cache();
        let mut x = self.bos_input(b)?;
        let mut out = vec![Vec::new(); b];
        let mut done: Vec<bool> = max_new.iter().map(|&m| m == 0).collect();
        for t in 0..limit {
            if done.iter().all(|&d| d) {
                break;
            }
            let logits = self.net.decoder.step(&x, &mut cache, &mem)?.broadcast_add(&ban)?;
            let next = logits.squeeze(1)?.argmax(D::Minus1)?;
            let ids = next.to_vec1::<u32>()?;
            for (i, &id) in ids.iter().enumerate() {
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

    /// Encode, fuse with `targets`, and decode greedily.
    pub fn generate(&self, inputs: &[MarkedIds], targets: &[StyleId], max_new: &[usize]) -> Result<Vec<Vec<u32>>> {
        let bundle = self.encode(inputs)?;
        let fused = self.fuse(targets, &bundle)?;
        self.greedy(&fused, max_new)
    }

    pub fn style_embeddings(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.net.style_emb.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta::new(self.cfg, &self.vocab, &self.styles, self.seed)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            TRANSFER_KIND,
            serde_json::to_value(self.meta())?,
            self.params.export()?,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(TRANSFER_KIND)?;
        let meta: ModelMeta = serde_json::from_value(ckpt.meta.clone())?;
        let (vocab, styles) = meta.vocabularies()?;
        let mut model = Self::new(meta.config, vocab, styles, meta.seed)?;
        model.params.import(&ckpt.arrays_with_prefix(""))?;
        model.net = TransferNet::build(&model.cfg, &mut model.params, model.seed)?;
        Ok(model)
    }
}
