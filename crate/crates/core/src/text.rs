//! Word-level tokenization, caption types and stop words.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A normalized word: lowercase, no whitespace, no leading or trailing
/// ASCII punctuation, never empty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(String);

impl Token {
    /// Normalizes one whitespace-free piece. Returns `None` when nothing
    /// survives punctuation trimming.
    pub fn normalize(piece: &str) -> Option<Token> {
        let lower = piece.to_lowercase();
        let trimmed = lower.trim_matches(|c: char| c.is_ascii_punctuation());
        if trimmed.is_empty() || trimmed.chars().any(char::is_whitespace) {
            None
        } else {
            Some(Token(trimmed.to_owned()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Raw caption text together with its token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub raw: String,
    pub tokens: Vec<Token>,
}

/// A model output. Same shape as a retrieved caption.
pub type GeneratedCaption = Caption;

impl Caption {
    pub fn new(raw: impl Into<String>) -> Caption {
        let raw = raw.into();
        let tokens = tokenize_str(&raw);
        Caption { raw, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Distinct tokens of the caption.
    pub fn token_set(&self) -> BTreeSet<&str> {
        self.tokens.iter().map(Token::as_str).collect()
    }

    /// Tokens joined by single spaces.
    pub fn normalized(&self) -> String {
        let words: Vec<&str> = self.tokens.iter().map(Token::as_str).collect();
        words.join(" ")
    }
}

/// Lowercases, splits on whitespace, strips leading/trailing ASCII
/// punctuation from every piece and drops pieces that become empty.
pub fn tokenize(raw: &str) -> Caption {
    Caption::new(raw)
}

fn tokenize_str(raw: &str) -> Vec<Token> {
    raw.split_whitespace().filter_map(Token::normalize).collect()
}

const DEFAULT_STOPWORDS: [&str; 32] = [
    "out", "some", "of", "is", "while", "are", "with", "down", "has", "over", "the", "next", "up",
    "near", "several", "other", "at", "top", "from", "in", "on", "a", "there", "an", "to", "and",
    "her", "front", "by", "for", "his", "it",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopWordList {
    words: BTreeSet<Token>,
}

/// The 32-word stop list filtered from the most frequent COCO tokens.
pub fn default_stopwords() -> StopWordList {
    StopWordList {
        words: DEFAULT_STOPWORDS
            .iter()
            .filter_map(|w| Token::normalize(w))
            .collect(),
    }
}

impl Default for StopWordList {
    fn default() -> Self {
        default_stopwords()
    }
}

impl StopWordList {
    pub fn empty() -> StopWordList {
        StopWordList {
            words: BTreeSet::new(),
        }
    }

    pub fn from_words<I, S>(words: I) -> StopWordList
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        StopWordList {
            words: words
                .into_iter()
                .filter_map(|w| Token::normalize(w.as_ref().trim()))
                .collect(),
        }
    }

    /// Parses the one-word-per-line format; blank lines and lines starting
    /// with `#` are skipped.
    pub fn parse(text: &str) -> StopWordList {
        StopWordList::from_words(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: &Path) -> Result<StopWordList> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(StopWordList::parse(&text))
    }

    /// Case-insensitive membership after normalization.
    pub fn contains(&self, word: &str) -> bool {
        match Token::normalize(word) {
            Some(t) => self.words.contains(&t),
            None => false,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(Token::as_str)
    }
}
