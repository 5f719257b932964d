//! Training losses. Tensor versions carry gradients; plain `f64` versions on
//! small inputs serve as references.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{length_mask, log_softmax_last, softmax_last, ParamStore};

/// Floor applied to the gold-position probability before taking its log.
pub const SOP_EPSILON: f64 = 1e-9;

/// Weights and batch settings of the stage-one objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    /// Weight of the disentanglement term.
    pub lambda1: f64,
    /// Weight of the sentence-order term.
    pub lambda2: f64,
    /// Weight of the style-classifier term.
    pub lambda3: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            batch_size: 4,
            learning_rate: 5e-5,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Predicted ordering distributions and gold positions for one story.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderPrediction {
    /// Row `i` is a distribution over positions for input sentence `i`.
    pub predicted: Vec<Vec<f64>>,
    /// Gold position of input sentence `i`; the one-hot rows are implied.
    pub gold: Vec<usize>,
}

impl OrderPrediction {
    pub fn validate(&self) -> Result<()> {
        let n = self.predicted.len();
        if n == 0 {
            return Err(Error::Empty("order prediction over zero sentences".into()));
        }
        if self.gold.len() != n || self.predicted.iter().any(|r| r.len() != n) {
            return Err(Error::LengthMismatch(format!(
                "{n} prediction rows vs {} gold positions",
                self.gold.len()
            )));
        }
        if let Some(&g) = self.gold.iter().find(|&&g| g >= n) {
            return Err(Error::Validation(format!("gold position {g} out of range")));
        }
        Ok(())
    }
}

/// `−(1/n) Σ_i log max(p_i[gold_i], ε)`.
pub fn sop_loss_value(pred: &OrderPrediction) -> Result<f64> {
    pred.validate()?;
    let n = pred.gold.len() as f64;
    Ok(-pred
        .predicted
        .iter()
        .zip(&pred.gold)
        .map(|(row, &g)| row[g].max(SOP_EPSILON).ln())
        .sum::<f64>()
        / n)
}

/// `(1/2b) Σ_i Σ_j ‖r̄_i − r̄_j‖²` over plain vectors.
pub fn dis_loss_value(means: &[Vec<f64>]) -> f64 {
    let b = means.len() as f64;
    let mut total = 0.0;
    for a in means {
        for c in means {
            total += a.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
    }
    total / (2.0 * b)
}

/// Per-component values of one stage-one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub self_rec: f64,
    pub dis: f64,
    pub sop: f64,
    pub style: f64,
}

impl LossParts {
    /// `L_self + λ1·L_dis + λ2·L_sop + λ3·L_style`.
    pub fn combine(&self, cfg: &Stage1Config) -> f64 {
        self.self_rec + cfg.lambda1 * self.dis + cfg.lambda2 * self.sop + cfg.lambda3 * self.style
    }
}

/// Mean token negative log-likelihood of `targets` `(B, T)` under `logits`
/// `(B, T, V)`; positions at or beyond `lens[b]` are ignored.
pub fn token_nll(logits: &Tensor, targets: &[&[u32]]) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    if targets.len() != b {
        return Err(Error::LengthMismatch(format!(
            "{} target rows for {b} logit rows",
            targets.len()
        )));
    }
    if let Some(row) = targets.iter().find(|r| r.len() > t) {
        return Err(Error::LengthMismatch(format!(
            "target of {} tokens but logits cover {t}",
            row.len()
        )));
    }
    if let Some(&id) = targets.iter().flat_map(|r| r.iter()).find(|&&id| id as usize >= v) {
        return Err(Error::Validation(format!("target id {id} outside a vocabulary of {v}")));
    }
    let lens: Vec<usize> = targets.iter().map(|r| r.len()).collect();
    let total: usize = lens.iter().sum();
    if total == 0 {
        return Err(Error::Empty("no target tokens".into()));
    }
    let mut ids = Vec::with_capacity(b * t);
    for r in targets {
        ids.extend_from_slice(r);
        ids.extend(std::iter::repeat_n(0u32, t - r.len()));
    }
    let ids = Tensor::from_vec(ids, (b, t, 1), &ParamStore::device())?;
    let picked = log_softmax_last(logits)?.gather(&ids, 2)?.squeeze(2)?;
    let mask = length_mask(&lens, t, logits.dtype())?;
    Ok((picked.mul(&mask)?.sum_all()? * (-1.0 / total as f64))?)
}

/// Self-reconstruction loss on the masked story under teacher forcing.
pub fn loss_self(logits: &Tensor, targets: &[&[u32]]) -> Result<Tensor> {
    token_nll(logits, targets)
}

/// Denoising loss of the stage-two filler against the original story.
pub fn loss_stage2(logits: &Tensor, targets: &[&[u32]]) -> Result<Tensor> {
    token_nll(logits, targets)
}

/// Disentanglement loss over per-sample mean representations `(B, d)`,
/// summing all `i, j` pairs including `i = j`.
pub fn loss_dis(means: &Tensor) -> Result<Tensor> {
    let b = means.dim(0)?;
    let diff = means.unsqueeze(1)?.broadcast_sub(&means.unsqueeze(0)?)?;
    Ok((diff.sqr()?.sum_all()? / (2.0 * b as f64))?)
}

/// Sentence-order loss from masked pointer scores `(B, N, N)`.
///
/// Each sample contributes the mean over its `counts[b]` rows of
/// `−log max(p[gold], ε)`; samples are averaged.
pub fn loss_sop(scores: &Tensor, gold: &[Vec<usize>], counts: &[usize]) -> Result<Tensor> {
    let (b, n, n2) = scores.dims3()?;
    if n != n2 || gold.len() != b || counts.len() != b {
        return Err(Error::LengthMismatch(format!(
            "scores {:?} vs {} gold rows and {} counts",
            scores.dims(),
            gold.len(),
            counts.len()
        )));
    }
    let mut idx = Vec::with_capacity(b * n);
    let mut weights = Vec::with_capacity(b * n);
    for ((g, &c), _) in gold.iter().zip(counts).zip(0..b) {
        if g.len() != c || c == 0 || c > n || g.iter().any(|&p| p >= c) {
            return Err(Error::Validation(format!(
                "gold order {g:?} does not fit {c} sentences"
            )));
        }
        for i in 0..n {
            if i < c {
                idx.push(g[i] as u32);
                weights.push(1.0 / (c as f64 * b as f64));
            } else {
                idx.push(0);
                weights.push(0.0);
            }
        }
    }
    let idx = Tensor::from_vec(idx, (b, n, 1), &ParamStore::device())?;
    let weights = Tensor::from_vec(weights, (b, n), &ParamStore::device())?.to_dtype(scores.dtype())?;
    let p = softmax_last(scores)?.gather(&idx, 2)?.squeeze(2)?;
    let logp = p.clamp(SOP_EPSILON, 1.0)?.log()?;
    Ok((logp.mul(&weights)?.sum_all()? * -1.0)?)
}

/// Mean `−log P_C(label | x)` from classifier logits `(B, |S|)`.
pub fn loss_style(clf_logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, s) = clf_logits.dims2()?;
    if labels.len() != b {
        return Err(Error::LengthMismatch(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= s) {
        return Err(Error::StyleOutOfRange(l));
    }
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), &ParamStore::device())?;
    let picked = log_softmax_last(clf_logits)?.gather(&idx, D::Minus1)?;
    Ok((picked.sum_all()? * (-1.0 / b as f64))?)
}

/// The four stage-one terms as scalar tensors.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub self_rec: Tensor,
    pub dis: Tensor,
    pub sop: Tensor,
    pub style: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<LossParts> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossParts {
            self_rec: v(&self.self_rec)?,
            dis: v(&self.dis)?,
            sop: v(&self.sop)?,
            style: v(&self.style)?,
        })
    }
}

/// Weighted stage-one objective; any non-finite component is an error that
/// names the offending terms.
pub fn stage1_loss(terms: &LossTerms, cfg: &Stage1Config, step: usize) -> Result<Tensor> {
    let parts = terms.values()?;
    let named = [
        ("self", parts.self_rec),
        ("dis", parts.dis),
        ("sop", parts.sop),
        ("style", parts.style),
    ];
    let bad: Vec<String> = named
        .iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(n, v)| format!("{n}={v}"))
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite {
            step,
            detail: bad.join(", "),
        });
    }
    let total = (&terms.self_rec
        + (&terms.dis * cfg.lambda1)?
        + (&terms.sop * cfg.lambda2)?
        + (&terms.style * cfg.lambda3)?)?;
    Ok(total)
}
