//! Whitespace tokenization and the token vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const SLOT: &str = "<slot>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SLOT_ID: usize = 2;

/// Splits on whitespace and detaches ASCII punctuation into its own tokens,
/// so `"(positive,"` becomes `["(", "positive", ","]`.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() && ch != '_' && ch != '-' && ch != '\'' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    if lowercase {
        for t in &mut out {
            *t = t.to_lowercase();
        }
    }
    out
}

/// Injective token/id map with `<pad>`, `<unk>` and `<slot>` fixed at 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocab", into = "RawVocab")]
pub struct Vocabulary {
    tokens: Vec<String>,
    lowercase: bool,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawVocab {
    lowercase: bool,
    tokens: Vec<String>,
}

impl TryFrom<RawVocab> for Vocabulary {
    type Error = Error;
    fn try_from(raw: RawVocab) -> Result<Self> {
        if raw.tokens.get(..3) != Some(&[PAD.to_string(), UNK.to_string(), SLOT.to_string()][..]) {
            return Err(Error::Checkpoint("vocabulary must start with <pad>, <unk>, <slot>".into()));
        }
        let mut index = HashMap::with_capacity(raw.tokens.len());
        for (i, t) in raw.tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary {
            tokens: raw.tokens,
            lowercase: raw.lowercase,
            index,
        })
    }
}

impl From<Vocabulary> for RawVocab {
    fn from(v: Vocabulary) -> Self {
        RawVocab {
            lowercase: v.lowercase,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Counts tokens across `corpus` and keeps those seen at least
    /// `min_count` times, ordered by descending frequency then
    /// lexicographically. Tokens in `always_keep` are added regardless of
    /// count (instruction text, for instance).
    pub fn build<'a, I, S>(corpus: I, min_count: usize, lowercase: bool, always_keep: &[String]) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let min_count = min_count.max(1);
        let norm = |t: &str| if lowercase { t.to_lowercase() } else { t.to_string() };
        let mut counts: HashMap<String, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence.as_ref() {
                *counts.entry(norm(tok)).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        for t in always_keep {
            let t = norm(t);
            if !kept.iter().any(|(k, _)| *k == t) {
                kept.push((t, 0));
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![PAD.to_string(), UNK.to_string(), SLOT.to_string()];
        tokens.extend(
            kept.into_iter()
                .map(|(t, _)| t)
                .filter(|t| t != PAD && t != UNK && t != SLOT),
        );
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            lowercase,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> usize {
        let found = if self.lowercase {
            self.index.get(&token.to_lowercase())
        } else {
            self.index.get(token)
        };
        found.copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id(token) != UNK_ID || token == UNK
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}
