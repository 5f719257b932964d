//! Token vocabulary shared by the generators and the style classifier.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: &str = "⟨pad⟩";
pub const BOS: &str = "⟨bos⟩";
pub const EOS: &str = "⟨eos⟩";
pub const UNK: &str = "⟨unk⟩";
pub const SENTENCE_MARKER: &str = "⟨Sen⟩";
pub const MASK: &str = "⟨mask⟩";
pub const KEY_SEPARATOR: &str = "⟨Key⟩";

pub const SPECIALS: [&str; 7] = [PAD, BOS, EOS, UNK, SENTENCE_MARKER, MASK, KEY_SEPARATOR];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials first (fixed ids), then the given words in sorted order.
    pub fn build<'a, I>(words: I) -> Self
    where
        I: IntoIterator<Item = &'a String>,
    {
        let specials: BTreeSet<&str> = SPECIALS.iter().copied().collect();
        let rest: BTreeSet<&String> = words
            .into_iter()
            .filter(|w| !specials.contains(w.as_str()))
            .collect();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(rest.into_iter().cloned())
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.index[UNK])
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> u32 {
        self.id(PAD)
    }
    pub fn bos(&self) -> u32 {
        self.id(BOS)
    }
    pub fn eos(&self) -> u32 {
        self.id(EOS)
    }
    pub fn marker(&self) -> u32 {
        self.id(SENTENCE_MARKER)
    }
    pub fn mask(&self) -> u32 {
        self.id(MASK)
    }
    pub fn key_separator(&self) -> u32 {
        self.id(KEY_SEPARATOR)
    }

    /// Ids a generator must never emit, given which specials are allowed.
    pub fn banned_ids(&self, allow_mask: bool) -> Vec<u32> {
        let mut out = vec![
            self.pad(),
            self.bos(),
            self.id(UNK),
            self.marker(),
            self.key_separator(),
        ];
        if !allow_mask {
            out.push(self.mask());
        }
        out
    }
}
