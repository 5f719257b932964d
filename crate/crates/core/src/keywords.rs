//! Style-specific keyword dictionaries and keyword masking.
//!
//! A style's dictionary is built in three passes: per-document TF-IDF salience
//! (top-k per document, unioned over the style corpus), a part-of-speech filter
//! keeping names, places and proper nouns, and a document-frequency filter that
//! drops words common across all styles.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{write_atomic, Story, StyleId, StyleVocabulary};
use crate::error::{Error, Result};
use crate::vocab::MASK;

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_FREQUENCY_THRESHOLD: f64 = 0.10;

/// Per-document TF-IDF scores: raw term count × ln((1+N)/(1+df)).
///
/// A token present in every document scores exactly zero.
pub fn tfidf_scores(corpus: &[Story]) -> Vec<BTreeMap<String, f64>> {
    let n = corpus.len() as f64;
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        let distinct: BTreeSet<&str> = doc.tokens.iter().map(String::as_str).collect();
        for t in distinct {
            *df.entry(t).or_default() += 1;
        }
    }
    corpus
        .iter()
        .map(|doc| {
            let mut tf: BTreeMap<String, f64> = BTreeMap::new();
            for t in &doc.tokens {
                *tf.entry(t.clone()).or_default() += 1.0;
            }
            for (t, v) in tf.iter_mut() {
                let idf = ((1.0 + n) / (1.0 + df[t.as_str()] as f64)).ln();
                *v *= idf;
            }
            tf
        })
        .collect()
}

/// Union over documents of each document's `top_k` tokens by TF-IDF.
/// Ties are broken by ascending lexicographic order.
pub fn tfidf_salient(corpus: &[Story], top_k: usize) -> Result<BTreeSet<String>> {
    if corpus.is_empty() {
        return Err(Error::Empty("tf-idf needs at least one document".into()));
    }
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let mut out = BTreeSet::new();
    for scores in tfidf_scores(corpus) {
        let mut ranked: Vec<(String, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out.extend(ranked.into_iter().take(top_k).map(|(t, _)| t));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosTag {
    Person,
    Place,
    ProperNoun,
    Other,
}

impl PosTag {
    pub fn is_named(self) -> bool {
        !matches!(self, PosTag::Other)
    }
}

/// Part-of-speech oracle used by [`pos_filter`].
pub trait PosTagger {
    fn tag(&self, token: &str) -> PosTag;
}

/// Explicit word → tag table; anything unlisted falls back to the
/// capitalization rule (see [`CapitalizationTagger`]) unless `strict`.
#[derive(Debug, Clone, Default)]
pub struct LexiconTagger {
    pub entries: HashMap<String, PosTag>,
    pub strict: bool,
}

impl LexiconTagger {
    pub fn new<I: IntoIterator<Item = (String, PosTag)>>(entries: I) -> Self {
        Self {
            entries: entries.into_iter().collect(),
            strict: false,
        }
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, token: &str) -> PosTag {
        match self.entries.get(token) {
            Some(t) => *t,
            None if self.strict => PosTag::Other,
            None => CapitalizationTagger.tag(token),
        }
    }
}

/// Tags capitalized alphabetic tokens as proper nouns.
#[derive(Debug, Clone, Copy, Default)]
pub struct CapitalizationTagger;

impl PosTagger for CapitalizationTagger {
    fn tag(&self, token: &str) -> PosTag {
        let mut cs = token.chars();
        match cs.next() {
            Some(c) if c.is_uppercase() && cs.all(|c| c.is_alphabetic() || c == '-') => {
                PosTag::ProperNoun
            }
            _ => PosTag::Other,
        }
    }
}

/// Keeps only person names, place names and proper nouns.
pub fn pos_filter(tokens: &BTreeSet<String>, tagger: &dyn PosTagger) -> BTreeSet<String> {
    tokens
        .iter()
        .filter(|t| tagger.tag(t).is_named())
        .cloned()
        .collect()
}

/// Which corpus decides whether a word is "high frequency".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FrequencyReference {
    /// Document frequency over the union of all style corpora.
    #[default]
    Union,
    /// High frequency only if at or above threshold in every style corpus.
    EveryCorpus,
}

fn document_fraction(token: &str, docs: &[&Story]) -> f64 {
    if docs.is_empty() {
        return 0.0;
    }
    let df = docs
        .iter()
        .filter(|d| d.tokens.iter().any(|t| t == token))
        .count();
    df as f64 / docs.len() as f64
}

fn at_or_above(fraction: f64, threshold: f64) -> bool {
    fraction >= threshold - 1e-12
}

/// Removes every token whose document frequency over the union of
/// `all_corpora` is at least `threshold`.
pub fn frequency_filter(
    tokens: &BTreeSet<String>,
    all_corpora: &[Story],
    threshold: f64,
) -> BTreeSet<String> {
    let docs: Vec<&Story> = all_corpora.iter().collect();
    tokens
        .iter()
        .filter(|t| !at_or_above(document_fraction(t, &docs), threshold))
        .cloned()
        .collect()
}

fn frequency_filter_every_corpus(
    tokens: &BTreeSet<String>,
    by_style: &BTreeMap<StyleId, Vec<Story>>,
    threshold: f64,
) -> BTreeSet<String> {
    tokens
        .iter()
        .filter(|t| {
            !by_style.values().all(|docs| {
                let refs: Vec<&Story> = docs.iter().collect();
                at_or_above(document_fraction(t, &refs), threshold)
            })
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeywordConfig {
    pub top_k: usize,
    pub threshold: f64,
    pub reference: FrequencyReference,
}

impl Default for KeywordConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            threshold: DEFAULT_FREQUENCY_THRESHOLD,
            reference: FrequencyReference::Union,
        }
    }
}

impl KeywordConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("keyword top_k must be ≥ 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "keyword threshold {} not in (0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordDictionary {
    pub style: StyleId,
    pub words: BTreeSet<String>,
}

impl KeywordDictionary {
    pub fn empty(style: StyleId) -> Self {
        Self {
            style,
            words: BTreeSet::new(),
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }
}

/// Dictionaries for every style in `corpus_by_style`.
pub fn build_dictionary(
    corpus_by_style: &BTreeMap<StyleId, Vec<Story>>,
    cfg: &KeywordConfig,
    tagger: &dyn PosTagger,
) -> Result<BTreeMap<StyleId, KeywordDictionary>> {
    cfg.validate()?;
    let union: Vec<Story> = corpus_by_style.values().flatten().cloned().collect();
    let mut out = BTreeMap::new();
    for (&style, docs) in corpus_by_style {
        if docs.is_empty() {
            return Err(Error::Empty(format!("style {style} has no documents")));
        }
        let salient = tfidf_salient(docs, cfg.top_k)?;
        let named = pos_filter(&salient, tagger);
        let words = match cfg.reference {
            FrequencyReference::Union => frequency_filter(&named, &union, cfg.threshold),
            FrequencyReference::EveryCorpus => {
                frequency_filter_every_corpus(&named, corpus_by_style, cfg.threshold)
            }
        };
        out.insert(style, KeywordDictionary { style, words });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct DictionaryFile {
    style: String,
    words: Vec<String>,
}

/// Writes one JSON object per line: `{"style": name, "words": [...]}`.
pub fn save_dictionaries(
    path: &Path,
    dicts: &BTreeMap<StyleId, KeywordDictionary>,
    styles: &StyleVocabulary,
) -> Result<()> {
    let mut out = String::new();
    for d in dicts.values() {
        let rec = DictionaryFile {
            style: styles.name(d.style)?.to_string(),
            words: d.words.iter().cloned().collect(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_dictionaries(
    path: &Path,
    styles: &StyleVocabulary,
) -> Result<BTreeMap<StyleId, KeywordDictionary>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DictionaryFile = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let style = styles.id(&rec.style)?;
        out.insert(
            style,
            KeywordDictionary {
                style,
                words: rec.words.into_iter().collect(),
            },
        );
    }
    Ok(out)
}

/// A story with its style-specific keywords replaced by mask tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedStory {
    /// Same segmentation as the origin, keywords replaced by the mask token.
    pub masked: Story,
    /// Replaced words in occurrence order.
    pub keywords: Vec<String>,
    pub origin: Story,
}

impl MaskedStory {
    pub fn mask_count(&self, mask_token: &str) -> usize {
        self.masked.tokens.iter().filter(|t| *t == mask_token).count()
    }

    /// Replaces the i-th mask with the i-th keyword.
    pub fn unmask(&self, mask_token: &str) -> Vec<String> {
        fill_masks(&self.masked.tokens, &self.keywords, mask_token)
    }
}

/// Sequentially fills mask tokens with keywords; surplus masks stay masked.
pub fn fill_masks(tokens: &[String], keywords: &[String], mask_token: &str) -> Vec<String> {
    let mut kw = keywords.iter();
    tokens
        .iter()
        .map(|t| {
            if t == mask_token {
                kw.next().cloned().unwrap_or_else(|| t.clone())
            } else {
                t.clone()
            }
        })
        .collect()
}

/// Masks every occurrence of a dictionary word.
pub fn extract_and_mask(story: &Story, dict: &KeywordDictionary) -> MaskedStory {
    extract_and_mask_with(story, dict, MASK)
}

pub fn extract_and_mask_with(story: &Story, dict: &KeywordDictionary, mask_token: &str) -> MaskedStory {
    let mut keywords = Vec::new();
    let tokens = story
        .tokens
        .iter()
        .map(|t| {
            if dict.contains(t) {
                keywords.push(t.clone());
                mask_token.to_string()
            } else {
                t.clone()
            }
        })
        .collect();
    MaskedStory {
        masked: story
            .with_tokens(tokens)
            .expect("token-for-token replacement keeps spans valid"),
        keywords,
        origin: story.clone(),
    }
}

/// Masks with the dictionary for the story's own style; a missing dictionary
/// masks nothing.
pub fn mask_with_dictionaries(
    story: &Story,
    dicts: &BTreeMap<StyleId, KeywordDictionary>,
) -> MaskedStory {
    match dicts.get(&story.style) {
        Some(d) => extract_and_mask(story, d),
        None => extract_and_mask(story, &KeywordDictionary::empty(story.style)),
    }
}
