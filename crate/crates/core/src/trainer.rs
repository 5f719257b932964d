//! Training loops for the style classifier, the stage-one transfer model and
//! the stage-two filler, with checkpointing and a line-delimited metrics log.
//!
//! Batches are a pure function of `(seed, step)`, so a run resumed from a
//! checkpoint continues exactly where an uninterrupted run would be.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StyleTarget};
use crate::corpus::{insert_sentence_markers, shuffle_sentences, Story, StyleId};
use crate::error::{Error, Result};
use crate::keywords::{extract_and_mask, fill_masks, KeywordDictionary};
use crate::nn::{
    fill_conditioning, teacher_pairs, Checkpoint, FillModel, MarkedIds, NamedArray, ParamStore,
    StyleClassifier, TransferModel,
};
use crate::objectives::{
    loss_dis, loss_self, loss_sop, loss_stage2, loss_style, stage1_loss, LossParts, LossTerms,
    Stage1Config,
};
use crate::vocab::{Vocab, MASK};

/// Adam with decoupled weight decay. Moments are kept per parameter name so
/// they can be checkpointed alongside the model.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter of `params` that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = &g.detach();
            let theta = var.as_tensor().detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            let next = ((theta * (1.0 - self.lr * self.weight_decay))? - (update * self.lr)?)?;
            var.set(&next)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }

    fn export(&self) -> Result<Vec<NamedArray>> {
        let mut out = Vec::new();
        for (prefix, map) in [("opt.m.", &self.m), ("opt.v.", &self.v)] {
            for (k, t) in map {
                let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                out.push((format!("{prefix}{k}"), t.dims().to_vec(), data));
            }
        }
        Ok(out)
    }

    fn import(&mut self, ckpt: &Checkpoint, dtype: DType) -> Result<()> {
        self.step = ckpt.meta_field("opt_step")?;
        for (prefix, map) in [("opt.m.", &mut self.m), ("opt.v.", &mut self.v)] {
            map.clear();
            for (k, shape, data) in ckpt.arrays_with_prefix(prefix) {
                let t = Tensor::from_vec(data, shape, &ParamStore::device())?.to_dtype(dtype)?;
                map.insert(k, t);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping. `max_norm = 0` disables.
pub fn clip_grad_norm(params: &ParamStore, grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let mut total = 0.0f64;
    for (_, var) in params.vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = total.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for (_, var) in params.vars() {
            if let Some(g) = grads.remove(var.as_tensor()) {
                grads.insert(var.as_tensor(), (g.detach() * scale)?);
            }
        }
    }
    Ok(norm)
}

/// Knobs shared by every training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub log_path: Option<PathBuf>,
    pub log_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Periodic checkpoint interval; `0` writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Validation interval for best-checkpoint selection; `0` disables it.
    pub eval_every: usize,
    /// Continue from `checkpoint_path` if it exists.
    pub resume: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            log_path: None,
            log_every: 1,
            checkpoint_path: None,
            checkpoint_every: 0,
            eval_every: 0,
            resume: false,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn classifier(cfg: &RunConfig) -> Self {
        Self {
            steps: cfg.clf_steps,
            batch_size: cfg.clf_batch_size,
            learning_rate: cfg.clf_learning_rate,
            ..Self::shared(cfg)
        }
    }

    pub fn stage1(cfg: &RunConfig) -> Self {
        Self {
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            ..Self::shared(cfg)
        }
    }

    pub fn stage2(cfg: &RunConfig) -> Self {
        Self {
            steps: cfg.stage2_steps,
            batch_size: cfg.stage2_batch_size,
            learning_rate: cfg.stage2_learning_rate,
            ..Self::shared(cfg)
        }
    }

    fn shared(cfg: &RunConfig) -> Self {
        Self {
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            seed: cfg.seed,
            log_every: cfg.log_every,
            checkpoint_every: cfg.checkpoint_every,
            eval_every: cfg.eval_every,
            ..Self::default()
        }
    }
}

fn step_rng(seed: u64, step: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    rng.set_word_pos(step as u128 * 1024);
    rng
}

/// Indices of the batch used at `step`: a seeded draw without replacement.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = step_rng(seed, step, 1);
    sample(&mut rng, n, batch.min(n)).into_vec()
}

/// Line-delimited JSON metrics. On resume, lines at or after the resume
/// step are dropped first so the file matches an uninterrupted run.
struct MetricsLog {
    file: Option<fs::File>,
    every: usize,
}

impl MetricsLog {
    fn open(path: Option<&Path>, every: usize, start_step: usize) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self { file: None, every });
        };
        let mut kept = String::new();
        if start_step > 0 {
            if let Ok(text) = fs::read_to_string(path) {
                for line in text.lines() {
                    let step = serde_json::from_str::<serde_json::Value>(line)
                        .ok()
                        .and_then(|v| v.get("step").and_then(|s| s.as_u64()));
                    if matches!(step, Some(s) if (s as usize) < start_step) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(kept.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some(file),
            every: every.max(1),
        })
    }

    fn record<T: Serialize>(&mut self, step: usize, row: &T) -> Result<()> {
        if let Some(f) = &mut self.file {
            if step % self.every == 0 {
                let line = serde_json::to_string(row)?;
                writeln!(f, "{line}").map_err(|e| Error::io("metrics log", e))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub step: usize,
    pub l_self: f64,
    pub l_dis: f64,
    pub l_sop: f64,
    pub l_style: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// What a training loop reports back.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSummary {
    /// Step the loop started from (non-zero after a resume).
    pub start_step: usize,
    pub steps: usize,
    /// Total loss per executed step.
    pub losses: Vec<f64>,
    /// Component losses per executed step (stage one only).
    pub parts: Vec<LossParts>,
    /// Best validation loss, when validation ran.
    pub best_validation: Option<f64>,
}

fn checkpoint_with_optimizer(mut ckpt: Checkpoint, opt: &AdamW, step: usize) -> Result<Checkpoint> {
    ckpt.arrays.extend(opt.export()?);
    ckpt.meta["train_step"] = step.into();
    ckpt.meta["opt_step"] = opt.steps_taken().into();
    Ok(ckpt)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn best_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

// ---------------------------------------------------------------------------
// Classifier

/// Labelled texts for classifier training: every story as written, plus its
/// keyword-masked form when dictionaries are given, so the classifier also
/// judges masked stage-one outputs.
pub fn classifier_examples(
    stories: &[Story],
    dicts: Option<&BTreeMap<StyleId, KeywordDictionary>>,
) -> Vec<(Vec<String>, StyleId)> {
    let mut out = Vec::with_capacity(stories.len() * 2);
    for s in stories {
        out.push((s.tokens.clone(), s.style));
        if let Some(d) = dicts.and_then(|d| d.get(&s.style)) {
            let m = extract_and_mask(s, d);
            if !m.keywords.is_empty() {
                out.push((m.masked.tokens, s.style));
            }
        }
    }
    out
}

/// Splits off every `1/holdout`-th story (by position) for evaluation.
pub fn holdout_split(stories: &[Story], holdout: f64) -> (Vec<Story>, Vec<Story>) {
    if holdout <= 0.0 {
        return (stories.to_vec(), Vec::new());
    }
    let every = (1.0 / holdout).round().max(2.0) as usize;
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, s) in stories.iter().enumerate() {
        if i % every == every - 1 {
            held.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, held)
}

/// Cross-entropy training of `clf` on `train`; returns accuracy on
/// `held_out` (on `train` when `held_out` is empty) and leaves `clf` frozen.
pub fn train_classifier(
    clf: &mut StyleClassifier,
    train: &[(Vec<String>, StyleId)],
    held_out: &[(Vec<String>, StyleId)],
    opts: &TrainOptions,
) -> Result<f64> {
    opts.validate()?;
    let present: BTreeSet<usize> = train.iter().map(|(_, s)| s.0).collect();
    if present.len() < 2 {
        return Err(Error::Validation(format!(
            "classifier training needs at least two styles, found {}",
            present.len()
        )));
    }
    for id in clf.styles().ids() {
        if !present.contains(&id.0) {
            return Err(Error::Validation(format!(
                "style {} has no training examples",
                clf.styles().name(id)?
            )));
        }
    }
    if train.iter().any(|(t, _)| t.is_empty()) {
        return Err(Error::Empty("empty classifier example".into()));
    }
    clf.unfreeze()?;
    let encoded: Vec<Vec<u32>> = train.iter().map(|(t, _)| clf.vocab().encode(t)).collect();
    let mut opt = AdamW::new(opts.learning_rate, opts.weight_decay);
    let mut log = MetricsLog::open(opts.log_path.as_deref(), opts.log_every, 0)?;
    for step in 0..opts.steps {
        let idx = batch_indices(train.len(), opts.batch_size, opts.seed, step);
        let seqs: Vec<&[u32]> = idx.iter().map(|&i| encoded[i].as_slice()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train[i].1 .0).collect();
        let loss = loss_style(&clf.logits(&seqs)?, &labels)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("classifier loss {value}"),
            });
        }
        let mut grads = loss.backward()?;
        let grad_norm = clip_grad_norm(clf.params(), &mut grads, opts.clip_norm)?;
        opt.step(clf.params(), &grads)?;
        log.record(step, &LossRecord { step, loss: value, grad_norm })?;
    }
    clf.freeze()?;
    if let Some(path) = &opts.checkpoint_path {
        clf.to_checkpoint()?.save(path)?;
    }
    let eval = if held_out.is_empty() { train } else { held_out };
    let texts: Vec<Vec<String>> = eval.iter().map(|(t, _)| t.clone()).collect();
    let labels: Vec<StyleId> = eval.iter().map(|(_, s)| *s).collect();
    clf.accuracy(&texts, &labels)
}

// ---------------------------------------------------------------------------
// Stage one

/// One preprocessed stage-one training story.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Sample {
    /// The (masked) story whose sentences are shuffled for the order loss.
    pub story: Story,
    pub marked: MarkedIds,
    /// Decoder target: the (masked) story without markers.
    pub target: Vec<u32>,
    pub style: StyleId,
}

/// Masks each story with its own style's dictionary (or not at all when
/// `dicts` is `None`) and inserts sentence markers.
pub fn prepare_stage1(
    stories: &[Story],
    dicts: Option<&BTreeMap<StyleId, KeywordDictionary>>,
    vocab: &Vocab,
) -> Vec<Stage1Sample> {
    stories
        .iter()
        .map(|s| {
            let story = match dicts {
                Some(d) => crate::keywords::mask_with_dictionaries(s, d).masked,
                None => s.clone(),
            };
            let marked = MarkedIds::from_marked(&insert_sentence_markers(&story), vocab);
            Stage1Sample {
                target: vocab.encode(&story.tokens),
                marked,
                style: s.style,
                story,
            }
        })
        .collect()
}

/// Settings specific to stage-one training.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Options {
    pub train: TrainOptions,
    pub weights: Stage1Config,
    pub style_warmup: usize,
    pub temperature: f64,
    pub style_target: StyleTarget,
}

impl Stage1Options {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            train: TrainOptions::stage1(cfg),
            weights: cfg.stage1(),
            style_warmup: cfg.style_warmup,
            temperature: cfg.temperature,
            style_target: cfg.style_target,
        }
    }
}

/// The sentence-shuffled view of a batch for the order loss.
fn shuffled_inputs(
    batch: &[&Stage1Sample],
    vocab: &Vocab,
    seed: u64,
    step: usize,
) -> (Vec<MarkedIds>, Vec<Vec<usize>>) {
    let mut rng = step_rng(seed, step, 2);
    batch
        .iter()
        .map(|s| {
            let rec = shuffle_sentences(&s.story, rng.random());
            let marked = MarkedIds::from_marked(&insert_sentence_markers(&rec.shuffled), vocab);
            (marked, rec.target_positions())
        })
        .unzip()
}

fn rollout_styles(
    batch: &[&Stage1Sample],
    mode: StyleTarget,
    num_styles: usize,
    seed: u64,
    step: usize,
) -> Vec<StyleId> {
    let mut rng = step_rng(seed, step, 3);
    batch
        .iter()
        .map(|s| match mode {
            StyleTarget::Source => s.style,
            StyleTarget::Other if num_styles < 2 => s.style,
            StyleTarget::Other => {
                let k = rng.random_range(0..num_styles - 1);
                StyleId(if k >= s.style.0 { k + 1 } else { k })
            }
        })
        .collect()
}

/// Forward pass of one stage-one step; returns the four loss terms.
pub fn stage1_terms(
    model: &TransferModel,
    clf: &StyleClassifier,
    batch: &[&Stage1Sample],
    opts: &Stage1Options,
    step: usize,
) -> Result<LossTerms> {
    let w = &opts.weights;
    let seed = opts.train.seed;
    let marked: Vec<MarkedIds> = batch.iter().map(|s| s.marked.clone()).collect();
    let styles: Vec<StyleId> = batch.iter().map(|s| s.style).collect();
    let bundle = model.encode(&marked)?;
    let fused = model.fuse(&styles, &bundle)?;

    let targets: Vec<&[u32]> = batch.iter().map(|s| s.target.as_slice()).collect();
    let (inputs, outputs) = teacher_pairs(&targets, model.vocab());
    let in_refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
    let out_refs: Vec<&[u32]> = outputs.iter().map(Vec::as_slice).collect();
    let self_rec = loss_self(&model.decode(&fused, &in_refs)?, &out_refs)?;

    let mut dis = loss_dis(&bundle.mean_reps()?)?;
    if w.lambda1 == 0.0 {
        dis = dis.detach();
    }

    let zero = Tensor::zeros((), model.dtype(), &ParamStore::device())?;
    let style = if w.lambda3 > 0.0 && step >= opts.style_warmup {
        let targets = rollout_styles(batch, opts.style_target, model.styles().len(), seed, step);
        let cond = if targets == styles {
            fused.clone()
        } else {
            model.fuse(&targets, &bundle)?
        };
        let lens: Vec<usize> = out_refs.iter().map(|o| o.len().min(model.config().max_len)).collect();
        let steps = lens.iter().copied().max().unwrap_or(1);
        let probs = model.soft_decode(&cond, steps, opts.temperature)?;
        let labels: Vec<usize> = targets.iter().map(|s| s.0).collect();
        loss_style(&clf.logits_soft(&probs.to_dtype(model.dtype())?, &lens)?, &labels)?
    } else {
        zero
    };

    let (shuffled, gold) = shuffled_inputs(batch, model.vocab(), seed, step);
    let sb = model.encode(&shuffled)?;
    let sf = model.fuse(&styles, &sb)?;
    let mut sop = loss_sop(&model.pointer_scores(&sf)?, &gold, &sb.counts)?;
    if w.lambda2 == 0.0 {
        sop = sop.detach();
    }
    Ok(LossTerms {
        self_rec,
        dis,
        sop,
        style,
    })
}

/// Trains `model` with the composite stage-one objective against a frozen
/// classifier. Only transfer-model parameters are updated.
///
/// A non-finite loss stops training; the parameters from before that step
/// are written to the checkpoint path (if any) and the error is returned.
pub fn train_stage1(
    model: &mut TransferModel,
    clf: &StyleClassifier,
    data: &[Stage1Sample],
    valid: &[Stage1Sample],
    opts: &Stage1Options,
) -> Result<TrainSummary> {
    opts.train.validate()?;
    opts.weights.validate()?;
    if !clf.is_frozen() {
        return Err(Error::Validation("stage-one training needs a frozen classifier".into()));
    }
    if data.is_empty() {
        return Err(Error::Empty("no stage-one training samples".into()));
    }
    let t = &opts.train;
    let mut opt = AdamW::new(t.learning_rate, t.weight_decay);
    let mut start = 0;
    if t.resume {
        if let Some(path) = t.checkpoint_path.as_ref().filter(|p| p.exists()) {
            let ckpt = Checkpoint::load(path)?;
            *model = TransferModel::from_checkpoint(&ckpt)?;
            opt.import(&ckpt, model.dtype())?;
            start = ckpt.meta_field("train_step")?;
        }
    }
    let mut log = MetricsLog::open(t.log_path.as_deref(), t.log_every, start)?;
    let mut summary = TrainSummary {
        start_step: start,
        steps: t.steps,
        ..Default::default()
    };
    let save = |model: &TransferModel, opt: &AdamW, step: usize, path: &Path| -> Result<()> {
        checkpoint_with_optimizer(model.to_checkpoint()?, opt, step)?.save(path)
    };
    for step in start..t.steps {
        let idx = batch_indices(data.len(), t.batch_size, t.seed, step);
        let batch: Vec<&Stage1Sample> = idx.iter().map(|&i| &data[i]).collect();
        let terms = stage1_terms(model, clf, &batch, opts, step)?;
        let total = match stage1_loss(&terms, &opts.weights, step) {
            Ok(total) => total,
            Err(e) => {
                if let Some(path) = &t.checkpoint_path {
                    save(model, &opt, step, path)?;
                }
                return Err(e);
            }
        };
        let mut grads = total.backward()?;
        let grad_norm = clip_grad_norm(model.params(), &mut grads, t.clip_norm)?;
        if !grad_norm.is_finite() {
            if let Some(path) = &t.checkpoint_path {
                save(model, &opt, step, path)?;
            }
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        opt.step(model.params(), &grads)?;
        let parts = terms.values()?;
        let value = scalar(&total)?;
        log.record(
            step,
            &Stage1Record {
                step,
                l_self: parts.self_rec,
                l_dis: parts.dis,
                l_sop: parts.sop,
                l_style: parts.style,
                total: value,
                grad_norm,
            },
        )?;
        summary.losses.push(value);
        summary.parts.push(parts);
        let done = step + 1;
        if let Some(path) = &t.checkpoint_path {
            if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 && done < t.steps {
                save(model, &opt, done, path)?;
            }
            if t.eval_every > 0 && !valid.is_empty() && done % t.eval_every == 0 {
                let v = stage1_validation_loss(model, valid)?;
                if summary.best_validation.is_none_or(|b| v < b) {
                    summary.best_validation = Some(v);
                    model.to_checkpoint()?.save(&best_path(path))?;
                }
            }
        }
        if step % 50 == 0 {
            log::debug!("stage1 step {step}: total {value:.4} {parts:?}");
        }
    }
    if let Some(path) = &t.checkpoint_path {
        save(model, &opt, t.steps, path)?;
    }
    Ok(summary)
}

/// Mean reconstruction loss over `valid`, without gradients.
pub fn stage1_validation_loss(model: &TransferModel, valid: &[Stage1Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in valid.chunks(32) {
        let marked: Vec<MarkedIds> = chunk.iter().map(|s| s.marked.clone()).collect();
        let styles: Vec<StyleId> = chunk.iter().map(|s| s.style).collect();
        let fused = model.fuse(&styles, &model.encode(&marked)?)?;
        let targets: Vec<&[u32]> = chunk.iter().map(|s| s.target.as_slice()).collect();
        let (inputs, outputs) = teacher_pairs(&targets, model.vocab());
        let in_refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let out_refs: Vec<&[u32]> = outputs.iter().map(Vec::as_slice).collect();
        let l = scalar(&loss_self(&model.decode(&fused, &in_refs)?, &out_refs)?)?;
        total += l * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Stage two

/// One denoising example: conditioning ids and the original text ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FillSample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// Builds denoising examples from raw token sequences. Any word of
/// `keywords` is masked, whichever style it came from; no style label is
/// read.
pub fn prepare_stage2(texts: &[Vec<String>], keywords: &BTreeSet<String>, vocab: &Vocab) -> Vec<FillSample> {
    texts
        .iter()
        .map(|tokens| {
            let mut found = Vec::new();
            let masked: Vec<String> = tokens
                .iter()
                .map(|t| {
                    if keywords.contains(t) {
                        found.push(t.clone());
                        MASK.to_string()
                    } else {
                        t.clone()
                    }
                })
                .collect();
            debug_assert_eq!(fill_masks(&masked, &found, MASK), *tokens);
            FillSample {
                input: vocab.encode(&fill_conditioning(&found, &masked)),
                target: vocab.encode(tokens),
            }
        })
        .collect()
}

/// Extra denoising texts in which every distinct keyword of a text is
/// replaced, consistently, by a random word of `keywords`. Each text with at
/// least one keyword is copied with probability `rate`.
pub fn keyword_swaps(texts: &[Vec<String>], keywords: &BTreeSet<String>, rate: f64, seed: u64) -> Vec<Vec<String>> {
    let pool: Vec<&String> = keywords.iter().collect();
    if pool.is_empty() || rate <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5A4B);
    let mut out = Vec::new();
    for tokens in texts {
        if !tokens.iter().any(|t| keywords.contains(t)) || !rng.random_bool(rate.min(1.0)) {
            continue;
        }
        let mut map: BTreeMap<&String, &String> = BTreeMap::new();
        let swapped = tokens
            .iter()
            .map(|t| match keywords.contains(t) {
                true => (*map.entry(t).or_insert_with(|| pool[rng.random_range(0..pool.len())])).clone(),
                false => t.clone(),
            })
            .collect();
        out.push(swapped);
    }
    out
}

/// Teacher-forced denoising loss of `model` on a batch.
pub fn stage2_loss(model: &FillModel, batch: &[&FillSample]) -> Result<Tensor> {
    let inputs: Vec<&[u32]> = batch.iter().map(|s| s.input.as_slice()).collect();
    let targets: Vec<&[u32]> = batch.iter().map(|s| s.target.as_slice()).collect();
    let (dec_in, dec_out) = teacher_pairs(&targets, model.vocab());
    let in_refs: Vec<&[u32]> = dec_in.iter().map(Vec::as_slice).collect();
    let out_refs: Vec<&[u32]> = dec_out.iter().map(Vec::as_slice).collect();
    let enc = model.encode(&inputs)?;
    loss_stage2(&model.decode(&enc, &in_refs)?, &out_refs)
}

pub fn train_stage2(model: &mut FillModel, data: &[FillSample], opts: &TrainOptions) -> Result<TrainSummary> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("no stage-two training samples".into()));
    }
    let mut opt = AdamW::new(opts.learning_rate, opts.weight_decay);
    let mut start = 0;
    if opts.resume {
        if let Some(path) = opts.checkpoint_path.as_ref().filter(|p| p.exists()) {
            let ckpt = Checkpoint::load(path)?;
            *model = FillModel::from_checkpoint(&ckpt)?;
            opt.import(&ckpt, model.params().dtype())?;
            start = ckpt.meta_field("train_step")?;
        }
    }
    let mut log = MetricsLog::open(opts.log_path.as_deref(), opts.log_every, start)?;
    let mut summary = TrainSummary {
        start_step: start,
        steps: opts.steps,
        ..Default::default()
    };
    for step in start..opts.steps {
        let idx = batch_indices(data.len(), opts.batch_size, opts.seed, step);
        let batch: Vec<&FillSample> = idx.iter().map(|&i| &data[i]).collect();
        let loss = stage2_loss(model, &batch)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            if let Some(path) = &opts.checkpoint_path {
                checkpoint_with_optimizer(model.to_checkpoint()?, &opt, step)?.save(path)?;
            }
            return Err(Error::NonFinite {
                step,
                detail: format!("denoising loss {value}"),
            });
        }
        let mut grads = loss.backward()?;
        let grad_norm = clip_grad_norm(model.params(), &mut grads, opts.clip_norm)?;
        opt.step(model.params(), &grads)?;
        log.record(step, &LossRecord { step, loss: value, grad_norm })?;
        summary.losses.push(value);
        let done = step + 1;
        if let Some(path) = &opts.checkpoint_path {
            if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 && done < opts.steps {
                checkpoint_with_optimizer(model.to_checkpoint()?, &opt, done)?.save(path)?;
            }
        }
    }
    if let Some(path) = &opts.checkpoint_path {
        checkpoint_with_optimizer(model.to_checkpoint()?, &opt, opts.steps)?.save(path)?;
    }
    Ok(summary)
}

/// JSON manifest written next to a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub steps: usize,
    pub config_path: Option<PathBuf>,
    pub checkpoint_paths: Vec<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    pub results: serde_json::Value,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}
