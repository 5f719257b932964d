//! Tokenization and sentence segmentation.
//!
//! The default tokenizer splits on whitespace and emits every punctuation
//! character as its own token. CJK ideographs are emitted one per token.
//! Special tokens written as `⟨name⟩` survive a detokenize/tokenize round trip.

/// Splits raw text into tokens.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;

    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTokenizer;

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0xF900..=0xFAFF)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() && !is_cjk(c)
}

impl Tokenizer for SimpleTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let chars: Vec<char> = chunk.chars().collect();
            let mut i = 0;
            let mut word = String::new();
            while i < chars.len() {
                let c = chars[i];
                if c == '⟨' {
                    if let Some(end) = chars[i..].iter().position(|&x| x == '⟩') {
                        if !word.is_empty() {
                            out.push(std::mem::take(&mut word));
                        }
                        out.push(chars[i..=i + end].iter().collect());
                        i += end + 1;
                        continue;
                    }
                }
                // apostrophes and hyphens stay inside words: "don't", "well-known"
                let joiner = (c == '\'' || c == '-')
                    && !word.is_empty()
                    && chars.get(i + 1).is_some_and(|&n| is_word_char(n));
                if is_word_char(c) || joiner {
                    word.push(c);
                } else {
                    if !word.is_empty() {
                        out.push(std::mem::take(&mut word));
                    }
                    out.push(c.to_string());
                }
                i += 1;
            }
            if !word.is_empty() {
                out.push(word);
            }
        }
        out
    }
}

/// Language-specific sentence boundary rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageRules {
    pub terminals: Vec<char>,
    /// Closing quotes/brackets that attach to the preceding terminal mark.
    pub trailing: Vec<char>,
}

impl Default for LanguageRules {
    fn default() -> Self {
        Self {
            terminals: vec!['.', '!', '?', '。', '！', '？'],
            trailing: vec!['"', '\'', '”', '’', '」', '』', ')', '）'],
        }
    }
}

impl LanguageRules {
    pub fn is_terminal(&self, c: char) -> bool {
        self.terminals.contains(&c)
    }

    pub fn is_trailing(&self, c: char) -> bool {
        self.trailing.contains(&c)
    }

    /// Token-level terminal test used when segmenting already tokenized text.
    pub fn is_terminal_token(&self, tok: &str) -> bool {
        let mut cs = tok.chars();
        matches!((cs.next(), cs.next()), (Some(c), None) if self.is_terminal(c))
    }

    pub fn is_trailing_token(&self, tok: &str) -> bool {
        let mut cs = tok.chars();
        matches!((cs.next(), cs.next()), (Some(c), None) if self.is_trailing(c))
    }
}

/// Splits text into sentences. Runs of terminal marks and any trailing closing
/// quotes stay with the sentence they end; text after the last terminal mark
/// forms a final sentence. Sentences are whitespace-trimmed.
pub fn segment_sentences(text: &str, rules: &LanguageRules) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if rules.is_terminal(chars[i]) {
            let mut end = i + 1;
            while end < chars.len() && rules.is_terminal(chars[end]) {
                end += 1;
            }
            while end < chars.len() && rules.is_trailing(chars[end]) {
                end += 1;
            }
            push_trimmed(&mut sentences, &chars[start..end]);
            start = end;
            i = end;
        } else {
            i += 1;
        }
    }
    push_trimmed(&mut sentences, &chars[start..]);
    sentences
}

fn push_trimmed(out: &mut Vec<String>, chars: &[char]) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

/// Returns sentence spans over an already tokenized sequence using the same
/// boundary rule as [`segment_sentences`].
pub fn segment_tokens(tokens: &[String], rules: &LanguageRules) -> Vec<std::ops::Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < tokens.len() {
        if rules.is_terminal_token(&tokens[i]) {
            let mut end = i + 1;
            while end < tokens.len() && rules.is_terminal_token(&tokens[end]) {
                end += 1;
            }
            while end < tokens.len() && rules.is_trailing_token(&tokens[end]) {
                end += 1;
            }
            spans.push(start..end);
            start = end;
            i = end;
        } else {
            i += 1;
        }
    }
    if start < tokens.len() {
        spans.push(start..tokens.len());
    }
    spans
}
