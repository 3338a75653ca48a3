//! Frozen vocabulary table: one token per line, line number = id.

use crate::error::{Error, Result};
use crate::numerics::rng::fnv1a64;
use std::collections::HashMap;
use std::path::Path;

/// The versioned table shipped with the repository.
const BUILTIN: &str = include_str!("../../data/vocab.txt");

pub const PAD_ID: u16 = 0;
pub const BOS_ID: u16 = 1;
pub const EOS_ID: u16 = 2;

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u16>,
    hash: u64,
}

impl Vocab {
    /// The frozen table shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("builtin vocab is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if words.len() < 3 || words[0] != "<pad>" || words[1] != "<bos>" || words[2] != "<eos>" {
            return Err(Error::Vocab(
                "vocab must start with <pad>, <bos>, <eos>".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::Vocab(format!("empty token at line {}", i + 1)));
            }
            if index.insert(w.clone(), i as u16).is_some() {
                return Err(Error::Vocab(format!("duplicate token {w:?}")));
            }
        }
        let hash = fnv1a64(text.as_bytes());
        Ok(Vocab { words, index, hash })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// FNV-1a of the raw table text; embedded in dataset headers.
    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn id(&self, word: &str) -> Result<u16> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("unknown word {word:?}")))
    }

    pub fn word(&self, id: u16) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Vocab(format!("id {id} out of range ({} tokens)", self.len())))
    }
}

/// Caption → padded token ids: whitespace split, lookup, BOS/EOS wrapping,
/// pad (or truncate) to `max_len`.
pub fn tokenize(caption: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<u16>> {
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS_ID);
    for word in caption.split_whitespace() {
        ids.push(vocab.id(word)?);
    }
    // truncate keeps BOS and makes room for EOS
    if ids.len() > max_len - 1 {
        ids.truncate(max_len - 1);
    }
    ids.push(EOS_ID);
    while ids.len() < max_len {
        ids.push(PAD_ID);
    }
    Ok(ids)
}

/// Inverse of [`tokenize`] for captions that fit within the length budget.
pub fn detokenize(ids: &[u16], vocab: &Vocab) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        if id == BOS_ID || id == PAD_ID {
            continue;
        }
        if id == EOS_ID {
            break;
        }
        words.push(vocab.word(id)?.to_string());
    }
    Ok(words.join(" "))
}
