//! End-to-end orchestration: dictionaries, classifier, both stages and a
//! transfer evaluation, driven by one [`RunConfig`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{group_by_style, insert_sentence_markers, shuffle_sentences, Story, StyleId, StyleVocabulary};
use crate::error::Result;
use crate::eval::{corpus_bleu, a_acc};
use crate::keywords::{build_dictionary, CapitalizationTagger, KeywordDictionary, PosTagger};
use crate::nn::{FillModel, MarkedIds, StyleClassifier, TransferModel};
use crate::pipeline::{keyword_survival, token_accuracy, Pipeline, TransferResult};
use crate::trainer::{
    classifier_examples, holdout_split, keyword_swaps, prepare_stage1, prepare_stage2, train_classifier,
    train_stage1, train_stage2, Stage1Options, TrainOptions, TrainSummary,
};
use crate::vocab::Vocab;

/// Vocabulary over every token of `stories`, specials first.
pub fn build_vocab(stories: &[Story]) -> Vocab {
    Vocab::build(stories.iter().flat_map(|s| s.tokens.iter()))
}

/// Stories whose marked form and decoder target fit the model limits.
pub fn trainable(stories: &[Story], cfg: &RunConfig) -> Vec<Story> {
    stories
        .iter()
        .filter(|s| s.len() + s.sentence_count() <= cfg.max_len && s.sentence_count() <= cfg.max_sentences)
        .cloned()
        .collect()
}

/// Every dictionary word of every style.
pub fn all_keywords(dicts: &BTreeMap<StyleId, KeywordDictionary>) -> BTreeSet<String> {
    dicts.values().flat_map(|d| d.words.iter().cloned()).collect()
}

/// A fully trained two-stage system.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub vocab: Vocab,
    pub styles: StyleVocabulary,
    pub dicts: BTreeMap<StyleId, KeywordDictionary>,
    pub classifier: StyleClassifier,
    pub classifier_accuracy: f64,
    pub stage1: TransferModel,
    pub stage1_summary: TrainSummary,
    /// Absent when the configuration skips stage two.
    pub stage2: Option<FillModel>,
    pub timings: StageTimings,
}

/// Wall-clock seconds spent in each training phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub classifier: f64,
    pub stage1: f64,
    pub stage2: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.classifier + self.stage1 + self.stage2
    }
}

impl TrainedSystem {
    pub fn pipeline(&self) -> Pipeline<'_> {
        Pipeline::new(&self.stage1, self.stage2.as_ref(), &self.dicts)
    }
}

/// Where training writes logs and checkpoints; all optional.
#[derive(Debug, Clone, Default)]
pub struct RunPaths {
    pub dir: Option<PathBuf>,
}

impl RunPaths {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    fn file(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

/// Trains classifier, stage one and (unless skipped) stage two on
/// `stories`.
pub fn train_system(
    stories: &[Story],
    styles: &StyleVocabulary,
    cfg: &RunConfig,
    tagger: &dyn PosTagger,
    paths: &RunPaths,
) -> Result<TrainedSystem> {
    cfg.validate()?;
    let mut clock = Instant::now();
    let mut lap = || {
        let t = clock.elapsed().as_secs_f64();
        clock = Instant::now();
        t
    };
    let vocab = build_vocab(stories);
    let stories = &trainable(stories, cfg);
    let dicts = build_dictionary(&group_by_style(stories, styles), &cfg.keyword_config(), tagger)?;
    let mcfg = cfg.model_config(vocab.len(), styles.len());
    let masking = (!cfg.skip_stage2).then_some(&dicts);

    let mut classifier = StyleClassifier::new(mcfg, vocab.clone(), styles.clone(), cfg.seed)?;
    let (clf_train, clf_held) = holdout_split(stories, cfg.clf_holdout);
    let opts = TrainOptions {
        log_path: paths.file("classifier.metrics.jsonl"),
        checkpoint_path: paths.file("classifier.ckpt"),
        ..TrainOptions::classifier(cfg)
    };
    let classifier_accuracy = train_classifier(
        &mut classifier,
        &classifier_examples(&clf_train, masking),
        &classifier_examples(&clf_held, masking),
        &opts,
    )?;
    log::info!("classifier held-out accuracy {classifier_accuracy:.3}");
    let mut timings = StageTimings {
        classifier: lap(),
        ..Default::default()
    };

    let mut stage1 = TransferModel::new(mcfg, vocab.clone(), styles.clone(), cfg.seed)?;
    let data = prepare_stage1(stories, masking, &vocab);
    let mut s1 = Stage1Options::from_config(cfg);
    s1.train.log_path = paths.file("stage1.metrics.jsonl");
    s1.train.checkpoint_path = paths.file("stage1.ckpt");
    let stage1_summary = train_stage1(&mut stage1, &classifier, &data, &[], &s1)?;
    timings.stage1 = lap();

    let stage2 = if cfg.skip_stage2 {
        None
    } else {
        let mut filler = FillModel::new(mcfg, vocab.clone(), cfg.seed)?;
        let mut texts: Vec<Vec<String>> = stories.iter().map(|s| s.tokens.clone()).collect();
        let keywords = all_keywords(&dicts);
        texts.extend(keyword_swaps(&texts, &keywords, cfg.stage2_keyword_swap, cfg.seed));
        let data = prepare_stage2(&texts, &keywords, &vocab);
        let opts = TrainOptions {
            log_path: paths.file("stage2.metrics.jsonl"),
            checkpoint_path: paths.file("stage2.ckpt"),
            ..TrainOptions::stage2(cfg)
        };
        train_stage2(&mut filler, &data, &opts)?;
        timings.stage2 = lap();
        Some(filler)
    };
    Ok(TrainedSystem {
        vocab,
        styles: styles.clone(),
        dicts,
        classifier,
        classifier_accuracy,
        stage1,
        stage1_summary,
        stage2,
        timings,
    })
}

/// Summary of transferring a set of stories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferScores {
    /// Percent of outputs classified as their target style.
    pub a_acc: f64,
    /// Corpus BLEU-1 of outputs against their sources, in percent.
    pub bleu1: f64,
    pub keyword_survival: f64,
    pub count: usize,
}

/// Transfers every story into every other style and scores the outputs.
pub fn score_transfer(system: &TrainedSystem, stories: &[Story]) -> Result<(TransferScores, Vec<TransferResult>)> {
    let n_styles = system.styles.len();
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for s in stories {
        for t in system.styles.ids().filter(|t| *t != s.style) {
            sources.push(s.clone());
            targets.push(t);
        }
    }
    let results = system.pipeline().transfer_batch(&sources, &targets)?;
    let mut hits = 0.0;
    for t in (0..n_styles).map(StyleId) {
        let outs: Vec<Vec<String>> = results
            .iter()
            .filter(|r| r.target_style == t)
            .map(|r| r.final_text.clone())
            .collect();
        if !outs.is_empty() {
            hits += a_acc(&outs, t, &system.classifier)? * outs.len() as f64 / 100.0;
        }
    }
    let outputs: Vec<Vec<String>> = results.iter().map(|r| r.final_text.clone()).collect();
    let refs: Vec<Vec<String>> = sources.iter().map(|s| s.tokens.clone()).collect();
    let scores = TransferScores {
        a_acc: 100.0 * hits / results.len().max(1) as f64,
        bleu1: corpus_bleu(&outputs, &refs, 1)?,
        keyword_survival: keyword_survival(&results),
        count: results.len(),
    };
    Ok((scores, results))
}

/// Mean stage-one token accuracy when each masked story is transferred
/// into its own style.
pub fn reconstruction_accuracy(system: &TrainedSystem, stories: &[Story]) -> Result<f64> {
    let masked: Vec<Story> = stories
        .iter()
        .map(|s| match system.stage2 {
            Some(_) => crate::keywords::mask_with_dictionaries(s, &system.dicts).masked,
            None => s.clone(),
        })
        .collect();
    let targets: Vec<StyleId> = stories.iter().map(|s| s.style).collect();
    let mut total = 0.0;
    for (chunk, tchunk) in masked.chunks(32).zip(targets.chunks(32)) {
        let outs = crate::pipeline::transfer_stage1_batch(&system.stage1, chunk, tchunk)?;
        for (o, s) in outs.iter().zip(chunk) {
            total += token_accuracy(o, &s.tokens);
        }
    }
    Ok(total / stories.len().max(1) as f64)
}

/// Mean stage-two token accuracy when each story is masked with its own
/// dictionary and filled back from its true keywords.
pub fn fill_accuracy(filler: &FillModel, dicts: &BTreeMap<StyleId, KeywordDictionary>, stories: &[Story]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in stories.chunks(32) {
        let masked: Vec<_> = chunk.iter().map(|s| crate::keywords::mask_with_dictionaries(s, dicts)).collect();
        let texts: Vec<Vec<String>> = masked.iter().map(|m| m.masked.tokens.clone()).collect();
        let keywords: Vec<Vec<String>> = masked.iter().map(|m| m.keywords.clone()).collect();
        for (o, s) in crate::pipeline::fill_stage2_batch(filler, &texts, &keywords)?.iter().zip(chunk) {
            total += token_accuracy(o, &s.tokens);
        }
    }
    Ok(total / stories.len().max(1) as f64)
}

/// Exact-position accuracy of the pointer network: each story is shuffled
/// with a seed derived from `seed` and its index, and every sentence whose
/// most probable position is its original one counts as correct.
pub fn pointer_accuracy(model: &TransferModel, stories: &[Story], masked: Option<&BTreeMap<StyleId, KeywordDictionary>>, seed: u64) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (c, chunk) in stories.chunks(32).enumerate() {
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut gold = Vec::with_capacity(chunk.len());
        for (i, s) in chunk.iter().enumerate() {
            let story = match masked {
                Some(d) => crate::keywords::mask_with_dictionaries(s, d).masked,
                None => s.clone(),
            };
            let rec = shuffle_sentences(&story, seed.wrapping_add((c * 32 + i) as u64));
            inputs.push(MarkedIds::from_marked(&insert_sentence_markers(&rec.shuffled), model.vocab()));
            gold.push(rec.target_positions());
        }
        let styles: Vec<StyleId> = chunk.iter().map(|s| s.style).collect();
        let fused = model.fuse(&styles, &model.encode(&inputs)?)?;
        for (probs, g) in model.pointer_predict(&fused)?.iter().zip(&gold) {
            for (row, &target) in probs.iter().zip(g) {
                let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                hits += usize::from(best == target);
                total += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// The default tagger for whitespace-tokenized Latin-script corpora.
pub fn default_tagger() -> &'static dyn PosTagger {
    &CapitalizationTagger
}
