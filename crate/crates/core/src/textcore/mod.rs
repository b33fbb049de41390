//! Tokenization, sentence splitting and the word-level vocabulary.

mod stopwords;

use std::collections::HashMap;
use std::path::Path;

pub use stopwords::{is_stopword, STOPWORDS};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const BOS: u32 = 4;
pub const EOS: u32 = 5;
/// Id of `[ZA_0]`; bucket `b` is `ZA_BASE + b`.
pub const ZA_BASE: u32 = 6;
/// Number of grounding-rate buckets.
pub const ALPHA_BUCKETS: usize = 10;
pub const NUM_RESERVED: usize = 6 + ALPHA_BUCKETS;

pub const DEFAULT_VOCAB_SIZE: usize = 16_384;

fn reserved_tokens() -> Vec<String> {
    let mut v: Vec<String> = ["[PAD]", "[CLS]", "[SEP]", "[UNK]", "[BOS]", "[EOS]"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend((0..ALPHA_BUCKETS).map(|b| format!("[ZA_{b}]")));
    v
}

/// Uniform bucket of a grounding rate: `floor(alpha * B)`, with 1.0 in the top bucket.
pub fn alpha_bucket(alpha: f64) -> usize {
    let a = alpha.clamp(0.0, 1.0);
    ((a * ALPHA_BUCKETS as f64).floor() as usize).min(ALPHA_BUCKETS - 1)
}

pub fn alpha_token(bucket: usize) -> u32 {
    ZA_BASE + bucket as u32
}

pub fn is_alpha_token(id: u32) -> bool {
    (ZA_BASE..ZA_BASE + ALPHA_BUCKETS as u32).contains(&id)
}

/// Lowercases, splits on whitespace, and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.extend(std::iter::once(ch.to_lowercase().collect::<String>()));
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn is_punctuation(token: &str) -> bool {
    token.chars().all(|c| !c.is_alphanumeric())
}

const NO_SPACE_BEFORE: &[&str] = &[".", ",", "!", "?", ";", ":", "'", ")", "]", "%"];
const NO_SPACE_AFTER: &[&str] = &["'", "(", "[", "$"];

/// Joins tokens into readable text; `tokenize` of the result gives the tokens back.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for t in tokens {
        let t = t.as_ref();
        if let Some(p) = prev {
            if !NO_SPACE_BEFORE.contains(&t) && !NO_SPACE_AFTER.contains(&p) {
                out.push(' ');
            }
        }
        out.push_str(t);
        prev = Some(t);
    }
    out
}

const ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "prof", "st", "jr", "sr", "vs", "mt", "gen", "col", "lt", "sgt",
    "capt", "rev", "hon", "e.g", "i.e", "approx", "no", "fig", "inc", "ltd", "co", "jan", "feb",
    "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec",
];

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

/// Rule-based sentence splitter: a sentence ends at `.`, `?` or `!` (plus any
/// closing quotes or brackets) followed by whitespace or end of text, unless
/// the word before a single `.` is a known abbreviation.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (_, c) = chars[i];
        if matches!(c, '.' | '?' | '!') {
            let mut j = i;
            while j + 1 < chars.len() && matches!(chars[j + 1].1, '.' | '?' | '!') {
                j += 1;
            }
            while j + 1 < chars.len() && is_closer(chars[j + 1].1) {
                j += 1;
            }
            let at_boundary = j + 1 == chars.len() || chars[j + 1].1.is_whitespace();
            let single_period = c == '.' && j == i;
            if at_boundary && !(single_period && ends_with_abbreviation(text, chars[i].0)) {
                let end = if j + 1 < chars.len() {
                    chars[j + 1].0
                } else {
                    text.len()
                };
                push_trimmed(&mut out, &text[start..end]);
                start = end;
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let t = s.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

fn ends_with_abbreviation(text: &str, period_at: usize) -> bool {
    let before = &text[..period_at];
    let word: String = before
        .chars()
        .rev()
        .take_while(|c| c.is_alphanumeric() || *c == '.')
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    if word.is_empty() {
        return false;
    }
    ABBREVIATIONS.contains(&word.to_lowercase().as_str())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }

    /// Frequency-ranked vocabulary (ties broken lexicographically) capped at
    /// `max_size` entries including the reserved prefix.
    pub fn build<'a, I>(texts: I, max_size: usize, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size <= NUM_RESERVED {
            return Err(Error::config(format!(
                "vocabulary size {max_size} must exceed the {NUM_RESERVED} reserved tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for t in tokenize(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let reserved = reserved_tokens();
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !reserved.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = reserved;
        tokens.extend(ranked.into_iter().take(max_size - NUM_RESERVED).map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("[UNK]")
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        self.encode(&tokenize(text))
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Decodes to text, dropping reserved tokens.
    pub fn decode_text(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i as usize >= NUM_RESERVED)
            .map(|&i| self.token(i))
            .collect();
        detokenize(&words)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let reserved = reserved_tokens();
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != reserved[..] {
            return Err(Error::Parse {
                line: 1,
                message: "vocabulary must start with the reserved tokens".into(),
            });
        }
        let v = Self::from_tokens(tokens);
        if v.ids.len() != v.tokens.len() {
            return Err(Error::Parse {
                line: 1,
                message: "duplicate token in vocabulary".into(),
            });
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic_str(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&crate::io::read_to_string(path)?)
    }
}

/// Token ids with optional segment and position ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub segments: Option<Vec<u8>>,
    pub positions: Option<Vec<usize>>,
}

impl TokenSeq {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&i| i as usize >= vocab_size) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        if let Some(seg) = &self.segments {
            if seg.len() != self.ids.len() || seg.iter().any(|&s| s > 2) {
                return Err(Error::contract("segment ids must align with tokens and lie in {0,1,2}"));
            }
        }
        if let Some(pos) = &self.positions {
            if pos.len() != self.ids.len() {
                return Err(Error::contract("position ids must align with tokens"));
            }
        }
        Ok(())
    }
}
