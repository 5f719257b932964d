//! Story datasets: loading, segmentation, filtering, sentence markers and
//! sentence shuffling.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{segment_sentences, LanguageRules, Tokenizer};
use crate::vocab::SENTENCE_MARKER;

/// Dense style identifier, `0..|S|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StyleId(pub usize);

impl fmt::Display for StyleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ordered set of author styles with human-readable names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleVocabulary {
    names: Vec<String>,
}

impl StyleVocabulary {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Validation("empty style name".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::Validation(format!("duplicate style name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<StyleId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(StyleId)
            .ok_or_else(|| Error::UnknownStyle(name.to_string()))
    }

    pub fn name(&self, id: StyleId) -> Result<&str> {
        self.names
            .get(id.0)
            .map(String::as_str)
            .ok_or(Error::StyleOutOfRange(id.0))
    }

    pub fn contains(&self, id: StyleId) -> bool {
        id.0 < self.names.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = StyleId> {
        (0..self.names.len()).map(StyleId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// A tokenized multi-sentence story with its author style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub tokens: Vec<String>,
    pub style: StyleId,
    /// Contiguous, in-order sentence spans over `tokens`.
    pub sentences: Vec<Range<usize>>,
}

impl Story {
    /// Segments and tokenizes raw text.
    pub fn from_text(
        text: &str,
        style: StyleId,
        tokenizer: &dyn Tokenizer,
        rules: &LanguageRules,
    ) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut sentences = Vec::new();
        for sent in segment_sentences(text, rules) {
            let start = tokens.len();
            tokens.extend(tokenizer.tokenize(&sent));
            if tokens.len() > start {
                sentences.push(start..tokens.len());
            }
        }
        Self::from_parts(tokens, style, sentences)
    }

    /// Builds a story from sentences that are already tokenized.
    pub fn from_sentences(sentences: Vec<Vec<String>>, style: StyleId) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        for s in sentences {
            let start = tokens.len();
            tokens.extend(s);
            spans.push(start..tokens.len());
        }
        Self::from_parts(tokens, style, spans)
    }

    pub fn from_parts(
        tokens: Vec<String>,
        style: StyleId,
        sentences: Vec<Range<usize>>,
    ) -> Result<Self> {
        let story = Self {
            tokens,
            style,
            sentences,
        };
        story.validate()?;
        Ok(story)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences.is_empty() {
            return Err(Error::Validation("story has no sentences".into()));
        }
        let mut next = 0;
        for span in &self.sentences {
            if span.start != next || span.end <= span.start {
                return Err(Error::Validation(format!(
                    "sentence span {span:?} is empty or not contiguous"
                )));
            }
            next = span.end;
        }
        if next != self.tokens.len() {
            return Err(Error::Validation(
                "sentence spans do not cover the token sequence".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sentence_count(&self) -> usize {
        self.sentences.len()
    }

    pub fn sentence(&self, i: usize) -> &[String] {
        &self.tokens[self.sentences[i].clone()]
    }

    pub fn sentence_tokens(&self) -> Vec<Vec<String>> {
        (0..self.sentence_count())
            .map(|i| self.sentence(i).to_vec())
            .collect()
    }

    /// Same segmentation and style, different tokens (same length per sentence).
    pub fn with_tokens(&self, tokens: Vec<String>) -> Result<Self> {
        Self::from_parts(tokens, self.style, self.sentences.clone())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct Record {
    text: String,
    style: String,
}

/// Reads a JSONL file of `{"text", "style"}` records, preserving file order.
pub fn load_corpus(
    path: &Path,
    vocab: &StyleVocabulary,
    tokenizer: &dyn Tokenizer,
    rules: &LanguageRules,
) -> Result<Vec<Story>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut stories = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let style = vocab.id(&rec.style)?;
        if rec.text.trim().is_empty() {
            return Err(Error::Validation(format!("line {line_no}: empty text")));
        }
        stories.push(Story::from_text(&rec.text, style, tokenizer, rules)?);
    }
    Ok(stories)
}

/// Writes stories as JSONL records (tokens joined by the tokenizer).
pub fn write_corpus(
    path: &Path,
    stories: &[Story],
    vocab: &StyleVocabulary,
    tokenizer: &dyn Tokenizer,
) -> Result<()> {
    let mut out = String::new();
    for s in stories {
        let rec = Record {
            text: tokenizer.detokenize(&s.tokens),
            style: vocab.name(s.style)?.to_string(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Write to a sibling temp file, then rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Keeps stories with at most `max_tokens` tokens and at least
/// `min_sentences` sentences. Limits apply before marker insertion.
pub fn filter_dataset(stories: &[Story], max_tokens: usize, min_sentences: usize) -> Vec<Story> {
    stories
        .iter()
        .filter(|s| s.len() <= max_tokens && s.sentence_count() >= min_sentences)
        .cloned()
        .collect()
}

/// Token sequence with a sentence marker after every sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedText {
    pub tokens: Vec<String>,
    pub marker_positions: Vec<usize>,
}

impl MarkedText {
    /// Drops the markers again.
    pub fn strip(&self) -> Vec<String> {
        self.tokens
            .iter()
            .filter(|t| t.as_str() != SENTENCE_MARKER)
            .cloned()
            .collect()
    }
}

pub fn insert_sentence_markers(story: &Story) -> MarkedText {
    let mut tokens = Vec::with_capacity(story.len() + story.sentence_count());
    let mut marker_positions = Vec::with_capacity(story.sentence_count());
    for span in &story.sentences {
        tokens.extend_from_slice(&story.tokens[span.clone()]);
        marker_positions.push(tokens.len());
        tokens.push(SENTENCE_MARKER.to_string());
    }
    MarkedText {
        tokens,
        marker_positions,
    }
}

/// A sentence-shuffled story and the order that restores the original.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffleRecord {
    pub shuffled: Story,
    /// `original[k] = shuffled[gold_order[k]]`.
    pub gold_order: Vec<usize>,
}

impl ShuffleRecord {
    /// Original position of each shuffled sentence (the pointer targets).
    pub fn target_positions(&self) -> Vec<usize> {
        invert_permutation(&self.gold_order)
    }
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Shuffles sentences with a seeded RNG. For two or more sentences the
/// identity permutation is never produced.
pub fn shuffle_sentences(story: &Story, seed: u64) -> ShuffleRecord {
    let n = story.sentence_count();
    let mut perm: Vec<usize> = (0..n).collect();
    if n >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            perm.rotate_left(1);
        }
    }
    // shuffled[i] = original[perm[i]]
    let sents = story.sentence_tokens();
    let shuffled_sents: Vec<Vec<String>> = perm.iter().map(|&p| sents[p].clone()).collect();
    let shuffled = Story::from_sentences(shuffled_sents, story.style)
        .expect("permuting valid sentences keeps a valid story");
    ShuffleRecord {
        shuffled,
        gold_order: invert_permutation(&perm),
    }
}

/// Applies `gold_order` to the sentences of `shuffled`.
pub fn reorder(shuffled: &Story, gold_order: &[usize]) -> Result<Story> {
    if gold_order.len() != shuffled.sentence_count() {
        return Err(Error::LengthMismatch(format!(
            "order has {} entries for {} sentences",
            gold_order.len(),
            shuffled.sentence_count()
        )));
    }
    let sents = shuffled.sentence_tokens();
    Story::from_sentences(
        gold_order.iter().map(|&i| sents[i].clone()).collect(),
        shuffled.style,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub size: usize,
    /// Rounded mean token count per story.
    pub avg_len: u64,
}

pub fn dataset_stats(stories: &[Story]) -> DatasetStats {
    if stories.is_empty() {
        return DatasetStats { size: 0, avg_len: 0 };
    }
    let total: usize = stories.iter().map(Story::len).sum();
    DatasetStats {
        size: stories.len(),
        avg_len: (total as f64 / stories.len() as f64).round() as u64,
    }
}

/// Per-style statistics keyed by style name.
pub fn stats_by_style(
    stories: &[Story],
    vocab: &StyleVocabulary,
) -> Result<BTreeMap<String, DatasetStats>> {
    let mut out = BTreeMap::new();
    for id in vocab.ids() {
        let subset: Vec<Story> = stories.iter().filter(|s| s.style == id).cloned().collect();
        out.insert(vocab.name(id)?.to_string(), dataset_stats(&subset));
    }
    Ok(out)
}

/// Groups stories by style, keeping every vocabulary entry.
pub fn group_by_style(stories: &[Story], vocab: &StyleVocabulary) -> BTreeMap<StyleId, Vec<Story>> {
    let mut out: BTreeMap<StyleId, Vec<Story>> = vocab.ids().map(|id| (id, Vec::new())).collect();
    for s in stories {
        out.entry(s.style).or_default().push(s.clone());
    }
    out
}
