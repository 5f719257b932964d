use candle_core::{DType, Tensor};

use super::batch::pad_ids;
use super::checkpoint::Checkpoint;
use super::layers::{key_padding_bias, length_mask, softmax_last, Linear, Stack};
use super::params::{Builder, Init, ParamStore};
use super::{ModelConfig, ModelMeta};
use crate::corpus::{StyleId, StyleVocabulary};
use crate::error::{Error, Result};
use crate::eval::StyleScorer;
use crate::vocab::Vocab;

pub const CLASSIFIER_KIND: &str = "classifier";

#[derive(Debug, Clone)]
struct ClassifierNet {
    tok_emb: Tensor,
    pos_emb: Tensor,
    encoder: Stack,
    head: Linear,
}

impl ClassifierNet {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        let emb_std = Init::Normal(1.0 / (d as f64).sqrt());
        let mut vb = Builder::new(store, seed);
        let vb = &mut vb;
        Ok(Self {
            tok_emb: vb.param("tok_emb", &[cfg.vocab_size, d], emb_std)?,
            pos_emb: vb.param("pos_emb", &[cfg.max_len, d], emb_std)?,
            encoder: Stack::new(vb, "enc", cfg.encoder_layers, d, cfg.heads, cfg.ff_dim)?,
            head: Linear::zero_init(vb, "head", d, cfg.num_styles)?,
        })
    }
}

/// Encoder stack with a mean-pooled linear head over styles. The head starts
/// at zero, so an untrained classifier is uniform.
///
/// Inputs longer than `max_len` are truncated to their first `max_len` tokens.
#[derive(Debug, Clone)]
pub struct StyleClassifier {
    cfg: ModelConfig,
    vocab: Vocab,
    styles: StyleVocabulary,
    seed: u64,
    params: ParamStore,
    net: ClassifierNet,
}

impl StyleClassifier {
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
        ModelMeta::new(cfg, &vocab, &styles, seed).check()?;
        let mut params = ParamStore::new(dtype);
        let net = ClassifierNet::build(&cfg, &mut params, seed)?;
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

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    /// Detaches every parameter from autograd from now on.
    pub fn freeze(&mut self) -> Result<()> {
        self.set_frozen(true)
    }

    pub fn unfreeze(&mut self) -> Result<()> {
        self.set_frozen(false)
    }

    fn set_frozen(&mut self, frozen: bool) -> Result<()> {
        self.params.set_frozen(frozen);
        self.net = ClassifierNet::build(&self.cfg, &mut self.params, self.seed)?;
        Ok(())
    }

    fn pooled_logits(&self, x: &Tensor, lens: &[usize]) -> Result<Tensor> {
        let t = x.dim(1)?;
        let x = x.broadcast_add(&self.net.pos_emb.narrow(0, 0, t)?)?;
        let bias = key_padding_bias(lens, t, x.dtype())?;
        let states = self.net.encoder.forward(&x, Some(&bias))?;
        let mask = length_mask(lens, t, x.dtype())?.unsqueeze(2)?;
        let counts: Vec<f64> = lens.iter().map(|&l| l.max(1) as f64).collect();
        let counts = Tensor::from_vec(counts, (lens.len(), 1), &ParamStore::device())?.to_dtype(x.dtype())?;
        let pooled = states.broadcast_mul(&mask)?.sum(1)?.broadcast_div(&counts)?;
        self.net.head.forward(&pooled)
    }

    fn truncate<'a>(&self, seq: &'a [u32]) -> &'a [u32] {
        &seq[..seq.len().min(self.cfg.max_len)]
    }

    /// Style logits `(B, |S|)` for token-id sequences.
    pub fn logits(&self, seqs: &[&[u32]]) -> Result<Tensor> {
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("cannot classify an empty text".into()));
        }
        let seqs: Vec<&[u32]> = seqs.iter().map(|s| self.truncate(s)).collect();
        let (ids, lens) = pad_ids(&seqs, self.vocab.pad())?;
        let (b, t) = ids.dims2()?;
        let x = self
            .net
            .tok_emb
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, t, self.cfg.d_model))?;
        self.pooled_logits(&x, &lens)
    }

    /// Style logits for soft inputs: `probs` `(B, T, V)` are mixed into
    /// expected token embeddings; `lens` marks the valid prefix of each row.
    pub fn logits_soft(&self, probs: &Tensor, lens: &[usize]) -> Result<Tensor> {
        let (b, t, v) = probs.dims3()?;
        let t_used = t.min(self.cfg.max_len);
        let probs = probs.narrow(1, 0, t_used)?;
        let lens: Vec<usize> = lens.iter().map(|&l| l.clamp(1, t_used)).collect();
        let x = probs
            .reshape((b * t_used, v))?
            .matmul(&self.net.tok_emb)?
            .reshape((b, t_used, self.cfg.d_model))?;
        self.pooled_logits(&x, &lens)
    }

    pub fn classify_ids(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        Ok(softmax_last(&self.logits(seqs)?)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?)
    }

    /// Distribution over styles for one tokenized text.
    pub fn classify_style(&self, tokens: &[String]) -> Result<Vec<f64>> {
        let ids = self.vocab.encode(tokens);
        Ok(self.classify_ids(&[&ids])?.remove(0))
    }

    /// Most likely style per text, batched. Empty texts get style 0, the
    /// first maximum of a uniform distribution.
    pub fn predict(&self, texts: &[Vec<String>]) -> Result<Vec<StyleId>> {
        let mut out = vec![StyleId(0); texts.len()];
        let filled: Vec<usize> = (0..texts.len()).filter(|&i| !texts[i].is_empty()).collect();
        for chunk in filled.chunks(64) {
            let ids: Vec<Vec<u32>> = chunk.iter().map(|&i| self.vocab.encode(&texts[i])).collect();
            let refs: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
            for (&i, p) in chunk.iter().zip(self.classify_ids(&refs)?) {
                let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
                out[i] = StyleId(best);
            }
        }
        Ok(out)
    }

    /// Fraction of texts whose predicted style equals their label.
    pub fn accuracy(&self, texts: &[Vec<String>], labels: &[StyleId]) -> Result<f64> {
        if texts.len() != labels.len() {
            return Err(Error::LengthMismatch(format!(
                "{} texts vs {} labels",
                texts.len(),
                labels.len()
            )));
        }
        if texts.is_empty() {
            return Err(Error::Empty("no texts to score".into()));
        }
        let pred = self.predict(texts)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / texts.len() as f64)
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta::new(self.cfg, &self.vocab, &self.styles, self.seed)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = serde_json::to_value(self.meta())?;
        meta["frozen"] = serde_json::Value::Bool(self.is_frozen());
        Ok(Checkpoint::new(CLASSIFIER_KIND, meta, self.params.export()?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CLASSIFIER_KIND)?;
        let meta: ModelMeta = serde_json::from_value(ckpt.meta.clone())?;
        let (vocab, styles) = meta.vocabularies()?;
        let mut clf = Self::new(meta.config, vocab, styles, meta.seed)?;
        clf.params.import(&ckpt.arrays_with_prefix(""))?;
        let frozen = ckpt.meta_field::<bool>("frozen").unwrap_or(false);
        clf.set_frozen(frozen)?;
        Ok(clf)
    }
}

/// Empty texts score uniformly instead of failing, so metrics over
/// generated outputs tolerate an immediate end-of-sequence.
impl StyleScorer for StyleClassifier {
    fn style_probs(&self, tokens: &[String]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            let n = self.styles.len();
            return Ok(vec![1.0 / n as f64; n]);
        }
        self.classify_style(tokens)
    }
}
