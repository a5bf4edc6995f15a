//! Closed-vocabulary whitespace tokenizer.
//!
//! Synthetic corpora are generated over a closed vocabulary, so tokenization
//! is exact word lookup with an UNK fallback for anything foreign. Special
//! tokens occupy the fixed lowest ids; the masking sentinels `MASK_0..` are
//! reserved for span corruption.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SEP: u32 = 4;
/// Number of masking sentinels `MASK_0..MASK_{N-1}`.
pub const NUM_MASK_SENTINELS: usize = 10;
pub const FIRST_MASK: u32 = 5;
pub const NUM_SPECIALS: usize = 5 + NUM_MASK_SENTINELS;

pub fn mask_sentinel(i: usize) -> u32 {
    assert!(i < NUM_MASK_SENTINELS, "mask sentinel index out of range");
    FIRST_MASK + i as u32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocabulary {
    /// Build a vocabulary from the words of a corpus. Words are deduplicated
    /// and sorted so the mapping is independent of discovery order.
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = (0..NUM_SPECIALS).map(special_surface).collect();
        let mut seen: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !w.is_empty())
            .collect();
        seen.sort();
        seen.dedup();
        seen.retain(|w| !tokens.contains(w));
        tokens.extend(seen);
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, ids }
    }

    /// Restore the id map after deserialization.
    pub fn rebuild_ids(&mut self) {
        self.ids = self
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
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.surface(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Content hash used to pair model checkpoints with the vocabulary they
    /// were trained over.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex_string(&h.finalize())
    }
}

fn special_surface(i: usize) -> String {
    match i {
        0 => "PAD".to_string(),
        1 => "UNK".to_string(),
        2 => "BOS".to_string(),
        3 => "EOS".to_string(),
        4 => "SEP".to_string(),
        _ => format!("MASK_{}", i - 5),
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
