//! Two-stage inference: mask keywords, restyle the masked story, then fill
//! the keywords back in.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{insert_sentence_markers, Story, StyleId, StyleVocabulary};
use crate::error::{Error, Result};
use crate::keywords::{mask_with_dictionaries, KeywordDictionary};
use crate::nn::{fill_conditioning, FillModel, MarkedIds, TransferModel};

/// Decoding budget for a source of `len` tokens: 1.2 times its length.
pub fn max_new_tokens(len: usize) -> usize {
    (len * 6).div_ceil(5).max(1)
}

/// Everything produced while transferring one story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferResult {
    /// Stage-one output, masks included.
    pub stage1_text: Vec<String>,
    pub final_text: Vec<String>,
    /// Keywords extracted from the source, in occurrence order.
    pub keywords_used: Vec<String>,
    pub source_style: StyleId,
    pub target_style: StyleId,
}

/// Stage-one transfer of already masked stories, batched.
pub fn transfer_stage1_batch(model: &TransferModel, masked: &[Story], targets: &[StyleId]) -> Result<Vec<Vec<String>>> {
    if masked.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} stories for {} target styles",
            masked.len(),
            targets.len()
        )));
    }
    if masked.is_empty() {
        return Ok(Vec::new());
    }
    let inputs: Vec<MarkedIds> = masked
        .iter()
        .map(|s| MarkedIds::from_marked(&insert_sentence_markers(s), model.vocab()))
        .collect();
    let limits: Vec<usize> = masked.iter().map(|s| max_new_tokens(s.len())).collect();
    let ids = model.generate(&inputs, targets, &limits)?;
    Ok(ids.iter().map(|i| model.vocab().decode(i)).collect())
}

/// Greedy stage-one transfer of one masked story into `target`.
pub fn transfer_stage1(model: &TransferModel, masked: &Story, target: StyleId) -> Result<Vec<String>> {
    Ok(transfer_stage1_batch(model, std::slice::from_ref(masked), &[target])?.remove(0))
}

/// Fills masks of stage-one outputs from their keywords, batched. No style
/// information is involved.
pub fn fill_stage2_batch(model: &FillModel, texts: &[Vec<String>], keywords: &[Vec<String>]) -> Result<Vec<Vec<String>>> {
    if texts.len() != keywords.len() {
        return Err(Error::LengthMismatch(format!(
            "{} texts for {} keyword lists",
            texts.len(),
            keywords.len()
        )));
    }
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let max_len = model.config().max_len;
    let inputs: Vec<Vec<u32>> = texts
        .iter()
        .zip(keywords)
        .map(|(t, k)| {
            let mut ids = model.vocab().encode(&fill_conditioning(k, t));
            ids.truncate(max_len);
            ids
        })
        .collect();
    let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
    let limits: Vec<usize> = texts.iter().map(|t| max_new_tokens(t.len())).collect();
    let ids = model.greedy(&refs, &limits)?;
    Ok(ids.iter().map(|i| model.vocab().decode(i)).collect())
}

pub fn fill_stage2(model: &FillModel, text: &[String], keywords: &[String]) -> Result<Vec<String>> {
    Ok(fill_stage2_batch(model, &[text.to_vec()], &[keywords.to_vec()])?.remove(0))
}

/// Trained models plus keyword dictionaries. Without a filler, stories are
/// transferred unmasked by stage one alone.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub stage1: &'a TransferModel,
    pub stage2: Option<&'a FillModel>,
    pub dicts: &'a BTreeMap<StyleId, KeywordDictionary>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        stage1: &'a TransferModel,
        stage2: Option<&'a FillModel>,
        dicts: &'a BTreeMap<StyleId, KeywordDictionary>,
    ) -> Self {
        Self { stage1, stage2, dicts }
    }

    pub fn styles(&self) -> &StyleVocabulary {
        self.stage1.styles()
    }

    pub fn transfer(&self, story: &Story, target: StyleId) -> Result<TransferResult> {
        Ok(self.transfer_batch(std::slice::from_ref(story), &[target])?.remove(0))
    }

    /// Transfers stories in chunks; results keep input order.
    pub fn transfer_batch(&self, stories: &[Story], targets: &[StyleId]) -> Result<Vec<TransferResult>> {
        if stories.len() != targets.len() {
            return Err(Error::LengthMismatch(format!(
                "{} stories for {} target styles",
                stories.len(),
                targets.len()
            )));
        }
        for t in targets {
            if !self.styles().contains(*t) {
                return Err(Error::StyleOutOfRange(t.0));
            }
        }
        let mut out = Vec::with_capacity(stories.len());
        for (chunk, tchunk) in stories.chunks(32).zip(targets.chunks(32)) {
            let masked: Vec<_> = chunk.iter().map(|s| mask_with_dictionaries(s, self.dicts)).collect();
            let stage1_in: Vec<Story> = match self.stage2 {
                Some(_) => masked.iter().map(|m| m.masked.clone()).collect(),
                None => chunk.to_vec(),
            };
            let stage1 = transfer_stage1_batch(self.stage1, &stage1_in, tchunk)?;
            let keywords: Vec<Vec<String>> = masked.iter().map(|m| m.keywords.clone()).collect();
            let finals = match self.stage2 {
                Some(filler) => fill_stage2_batch(filler, &stage1, &keywords)?,
                None => stage1.clone(),
            };
            for (((s, t), (s1, f)), k) in chunk.iter().zip(tchunk).zip(stage1.into_iter().zip(finals)).zip(keywords) {
                out.push(TransferResult {
                    stage1_text: s1,
                    final_text: f,
                    keywords_used: k,
                    source_style: s.style,
                    target_style: *t,
                });
            }
        }
        Ok(out)
    }
}

/// Position-wise agreement divided by the longer length; two empty
/// sequences agree fully.
pub fn token_accuracy(output: &[String], reference: &[String]) -> f64 {
    let n = output.len().max(reference.len());
    if n == 0 {
        return 1.0;
    }
    let hits = output.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / n as f64
}

/// Fraction of distinct source keywords (pooled over results) that appear
/// in the corresponding final text. With no keywords at all this is 1.
pub fn keyword_survival(results: &[TransferResult]) -> f64 {
    let (mut kept, mut total) = (0usize, 0usize);
    for r in results {
        let distinct: BTreeSet<&String> = r.keywords_used.iter().collect();
        total += distinct.len();
        kept += distinct.iter().filter(|k| r.final_text.contains(k)).count();
    }
    if total == 0 {
        1.0
    } else {
        kept as f64 / total as f64
    }
}

/// One line of a batch-transfer request file. `target_style` overrides the
/// target given on the command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub source: String,
    pub style: String,
    #[serde(default)]
    pub target_style: Option<String>,
}

/// One line of a batch-transfer output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub source: String,
    pub style: String,
    pub target_style: String,
    pub stage1: String,
    pub output: String,
    pub keywords: Vec<String>,
}

impl TransferRecord {
    pub fn new(source: &str, result: &TransferResult, styles: &StyleVocabulary) -> Result<Self> {
        Ok(Self {
            source: source.to_string(),
            style: styles.name(result.source_style)?.to_string(),
            target_style: styles.name(result.target_style)?.to_string(),
            stage1: result.stage1_text.join(" "),
            output: result.final_text.join(" "),
            keywords: result.keywords_used.clone(),
        })
    }
}

pub fn parse_requests(text: &str) -> Result<Vec<TransferRequest>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn records_to_jsonl(records: &[TransferRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
