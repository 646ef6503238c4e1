use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{CoolError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

/// Whitespace tokenizer over an explicit vocabulary.
///
/// Text is split on whitespace, leading and trailing punctuation is peeled off
/// into separate tokens, and words are lowercased. `[MASK]` is recognized
/// verbatim. Out-of-vocabulary words map to `[UNK]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
    mask: usize,
}

fn is_edge_punct(c: char) -> bool {
    c.is_ascii_punctuation() && c != '[' && c != ']'
}

/// Splits `text` into surface words without vocabulary lookup.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if chunk == MASK {
            out.push(MASK.to_string());
            continue;
        }
        let chars: Vec<char> = chunk.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        let mut lead = Vec::new();
        while lo < hi && is_edge_punct(chars[lo]) {
            lead.push(chars[lo].to_string());
            lo += 1;
        }
        let mut trail = Vec::new();
        while hi > lo && is_edge_punct(chars[hi - 1]) {
            trail.push(chars[hi - 1].to_string());
            hi -= 1;
        }
        trail.reverse();
        out.extend(lead);
        let core: String = chars[lo..hi].iter().collect();
        if core == MASK {
            out.push(core);
        } else if !core.is_empty() {
            out.push(core.to_lowercase());
        }
        out.extend(trail);
    }
    out
}

impl Tokenizer {
    /// Builds a vocabulary; special tokens are added first when absent.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab: Vec<String> = vec![PAD.into(), UNK.into(), MASK.into()];
        for t in tokens {
            let t = t.as_ref().trim();
            if !t.is_empty() && !vocab.iter().any(|v| v == t) {
                vocab.push(t.to_string());
            }
        }
        Self::from_vocab(vocab).expect("specials present")
    }

    /// Uses `vocab` as-is; it must contain `[UNK]` and `[MASK]`.
    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CoolError::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let unk = *index
            .get(UNK)
            .ok_or_else(|| CoolError::Format("vocabulary lacks [UNK]".into()))?;
        let mask = *index
            .get(MASK)
            .ok_or_else(|| CoolError::Format("vocabulary lacks [MASK]".into()))?;
        Ok(Self {
            vocab,
            index,
            unk,
            mask,
        })
    }

    /// Reads a vocabulary file, one token per line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_vocab(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut s = self.vocab.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn mask_id(&self) -> usize {
        self.mask
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| self.index.get(w.as_str()).copied().unwrap_or(self.unk))
            .collect()
    }
}
