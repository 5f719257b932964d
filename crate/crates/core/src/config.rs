//! Run configuration: named presets, a flat `key = value` file format and
//! per-key overrides.
//!
//! Resolution order is preset, then file, then individual overrides. Every
//! key of [`RunConfig::KEYS`] may appear in a file; anything else is an error.
//! Lines starting with `#` and blank lines are ignored.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keywords::{FrequencyReference, KeywordConfig};
use crate::nn::ModelConfig;
use crate::objectives::Stage1Config;

/// Which style the soft rollout of the style loss is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StyleTarget {
    /// The sample's own style.
    #[default]
    Source,
    /// A different style drawn uniformly per sample.
    Other,
}

impl fmt::Display for StyleTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StyleTarget::Source => "source",
            StyleTarget::Other => "other",
        })
    }
}

impl FromStr for StyleTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(StyleTarget::Source),
            "other" => Ok(StyleTarget::Other),
            _ => Err(Error::Config(format!("style_target must be source or other, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub deterministic: bool,

    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub fusion_layers: usize,
    pub pointer_layers: usize,
    pub max_len: usize,
    pub max_sentences: usize,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub steps: usize,
    /// Steps trained before the style loss is switched on.
    pub style_warmup: usize,
    pub temperature: f64,
    pub style_target: StyleTarget,
    /// Train and run stage one on unmasked text and skip the filler.
    pub skip_stage2: bool,

    pub clf_steps: usize,
    pub clf_learning_rate: f64,
    pub clf_batch_size: usize,
    /// Fraction of stories held out to measure classifier accuracy.
    pub clf_holdout: f64,

    pub stage2_steps: usize,
    pub stage2_learning_rate: f64,
    pub stage2_batch_size: usize,
    /// Probability that a stage-two example with keywords also appears with
    /// each distinct keyword replaced by a random dictionary word.
    pub stage2_keyword_swap: f64,

    pub keyword_top_k: usize,
    pub keyword_threshold: f64,
    pub keyword_reference: FrequencyReference,

    pub log_every: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

impl RunConfig {
    pub const PROFILES: [&'static str; 3] = ["zh-paper", "en-paper", "toy"];

    pub const KEYS: [&'static str; 39] = [
        "profile",
        "seed",
        "deterministic",
        "d_model",
        "heads",
        "ff_dim",
        "encoder_layers",
        "decoder_layers",
        "fusion_layers",
        "pointer_layers",
        "max_len",
        "max_sentences",
        "lambda1",
        "lambda2",
        "lambda3",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "clip_norm",
        "steps",
        "style_warmup",
        "temperature",
        "style_target",
        "skip_stage2",
        "clf_steps",
        "clf_learning_rate",
        "clf_batch_size",
        "clf_holdout",
        "stage2_steps",
        "stage2_learning_rate",
        "stage2_batch_size",
        "stage2_keyword_swap",
        "keyword_top_k",
        "keyword_threshold",
        "keyword_reference",
        "log_every",
        "checkpoint_every",
        "eval_every",
        "version",
    ];

    /// Settings for real corpora at desk scale: the learning rate, batch
    /// size and loss weights of the Chinese setting.
    fn zh_paper() -> Self {
        Self {
            profile: "zh-paper".into(),
            seed: 42,
            deterministic: true,
            d_model: 128,
            heads: 4,
            ff_dim: 512,
            encoder_layers: 2,
            decoder_layers: 2,
            fusion_layers: 2,
            pointer_layers: 1,
            max_len: 512,
            max_sentences: 32,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            batch_size: 4,
            learning_rate: 5e-5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            steps: 20_000,
            style_warmup: 0,
            temperature: 1.0,
            style_target: StyleTarget::Source,
            skip_stage2: false,
            clf_steps: 2_000,
            clf_learning_rate: 5e-5,
            clf_batch_size: 16,
            clf_holdout: 0.1,
            stage2_steps: 20_000,
            stage2_learning_rate: 5e-5,
            stage2_batch_size: 4,
            stage2_keyword_swap: 0.0,
            keyword_top_k: 10,
            keyword_threshold: 0.10,
            keyword_reference: FrequencyReference::Union,
            log_every: 1,
            checkpoint_every: 1_000,
            eval_every: 1_000,
        }
    }

    /// The English setting: halved loss weights and learning rate.
    fn en_paper() -> Self {
        Self {
            profile: "en-paper".into(),
            lambda1: 0.5,
            lambda2: 0.5,
            lambda3: 0.5,
            learning_rate: 2.5e-5,
            clf_learning_rate: 2.5e-5,
            stage2_learning_rate: 2.5e-5,
            ..Self::zh_paper()
        }
    }

    /// Small, fast settings for the synthetic corpus.
    fn toy() -> Self {
        Self {
            profile: "toy".into(),
            d_model: 64,
            heads: 4,
            ff_dim: 128,
            max_len: 64,
            max_sentences: 8,
            lambda1: 0.001,
            batch_size: 16,
            learning_rate: 1e-3,
            steps: 1_600,
            style_target: StyleTarget::Other,
            clf_steps: 150,
            clf_learning_rate: 1e-3,
            clf_batch_size: 32,
            stage2_steps: 800,
            stage2_learning_rate: 1e-3,
            stage2_batch_size: 16,
            stage2_keyword_swap: 0.5,
            checkpoint_every: 0,
            eval_every: 0,
            ..Self::zh_paper()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "zh-paper" => Ok(Self::zh_paper()),
            "en-paper" => Ok(Self::en_paper()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!(
                "unknown profile `{name}` (expected one of {})",
                Self::PROFILES.join(", ")
            ))),
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
        }
        let v = value.trim();
        match key {
            "profile" => {
                let seed = self.seed;
                *self = Self::profile(v)?;
                self.seed = seed;
            }
            "version" => {
                if v != "1" {
                    return Err(Error::Config(format!("unsupported config version {v}")));
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "deterministic" => self.deterministic = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ff_dim" => self.ff_dim = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "decoder_layers" => self.decoder_layers = parse(key, v)?,
            "fusion_layers" => self.fusion_layers = parse(key, v)?,
            "pointer_layers" => self.pointer_layers = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "max_sentences" => self.max_sentences = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "lambda3" => self.lambda3 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "style_warmup" => self.style_warmup = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "style_target" => self.style_target = v.parse()?,
            "skip_stage2" => self.skip_stage2 = parse(key, v)?,
            "clf_steps" => self.clf_steps = parse(key, v)?,
            "clf_learning_rate" => self.clf_learning_rate = parse(key, v)?,
            "clf_batch_size" => self.clf_batch_size = parse(key, v)?,
            "clf_holdout" => self.clf_holdout = parse(key, v)?,
            "stage2_steps" => self.stage2_steps = parse(key, v)?,
            "stage2_learning_rate" => self.stage2_learning_rate = parse(key, v)?,
            "stage2_batch_size" => self.stage2_batch_size = parse(key, v)?,
            "stage2_keyword_swap" => self.stage2_keyword_swap = parse(key, v)?,
            "keyword_top_k" => self.keyword_top_k = parse(key, v)?,
            "keyword_threshold" => self.keyword_threshold = parse(key, v)?,
            "keyword_reference" => {
                self.keyword_reference = match v {
                    "union" => FrequencyReference::Union,
                    "every" => FrequencyReference::EveryCorpus,
                    _ => {
                        return Err(Error::Config(format!(
                            "keyword_reference must be union or every, got `{v}`"
                        )))
                    }
                }
            }
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. A `profile` line resets
    /// all earlier values, so it should come first.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Every key in a fixed order; reading it back yields an equal config.
    pub fn to_text(&self) -> String {
        let reference = match self.keyword_reference {
            FrequencyReference::Union => "union",
            FrequencyReference::EveryCorpus => "every",
        };
        let lines = [
            ("version", "1".to_string()),
            ("profile", self.profile.clone()),
            ("seed", self.seed.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("fusion_layers", self.fusion_layers.to_string()),
            ("pointer_layers", self.pointer_layers.to_string()),
            ("max_len", self.max_len.to_string()),
            ("max_sentences", self.max_sentences.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("lambda3", self.lambda3.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("steps", self.steps.to_string()),
            ("style_warmup", self.style_warmup.to_string()),
            ("temperature", self.temperature.to_string()),
            ("style_target", self.style_target.to_string()),
            ("skip_stage2", self.skip_stage2.to_string()),
            ("clf_steps", self.clf_steps.to_string()),
            ("clf_learning_rate", self.clf_learning_rate.to_string()),
            ("clf_batch_size", self.clf_batch_size.to_string()),
            ("clf_holdout", self.clf_holdout.to_string()),
            ("stage2_steps", self.stage2_steps.to_string()),
            ("stage2_learning_rate", self.stage2_learning_rate.to_string()),
            ("stage2_batch_size", self.stage2_batch_size.to_string()),
            ("stage2_keyword_swap", self.stage2_keyword_swap.to_string()),
            ("keyword_top_k", self.keyword_top_k.to_string()),
            ("keyword_threshold", self.keyword_threshold.to_string()),
            ("keyword_reference", reference.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ];
        let mut out = String::from("# resolved run configuration\n");
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1().validate()?;
        self.keyword_config().validate()?;
        self.model_config(1, 1).validate()?;
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.stage2_keyword_swap) {
            return Err(Error::Config("stage2_keyword_swap must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.clf_holdout) {
            return Err(Error::Config("clf_holdout must be in [0, 1)".into()));
        }
        for (name, v) in [
            ("clf_learning_rate", self.clf_learning_rate),
            ("stage2_learning_rate", self.stage2_learning_rate),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.clf_batch_size == 0 || self.stage2_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.clip_norm >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("clip_norm and weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, num_styles: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            ff_dim: self.ff_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            fusion_layers: self.fusion_layers,
            pointer_layers: self.pointer_layers,
            max_len: self.max_len,
            max_sentences: self.max_sentences,
            num_styles,
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }

    pub fn keyword_config(&self) -> KeywordConfig {
        KeywordConfig {
            top_k: self.keyword_top_k,
            threshold: self.keyword_threshold,
            reference: self.keyword_reference,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::zh_paper()
    }
}
