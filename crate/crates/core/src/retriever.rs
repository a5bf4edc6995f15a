//! Dense bi-encoder retriever.
//!
//! Queries and documents go through the same tower: mean-pool token
//! embeddings, project through a square matrix, L2-normalize. The projection
//! starts near identity so that, before any training, score is essentially
//! lexical-overlap cosine — enough signal to bootstrap retrieval on a corpus
//! the reader has never seen.

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, VarId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverModel {
    pub embed_dim: usize,
    pub vocab_size: usize,
    /// Flat layout: token embeddings (V x d) then the projection (d x d).
    pub params: Vec<f64>,
}

impl RetrieverModel {
    pub fn new(embed_dim: usize, vocab_size: usize, seed: u64) -> Self {
        let mut r = rng::stream(rng::mix(&[seed, 0x20]));
        let mut params = Vec::with_capacity(vocab_size * embed_dim + embed_dim * embed_dim);
        for _ in 0..vocab_size * embed_dim {
            params.push(r.gen_range(-0.5..0.5));
        }
        for i in 0..embed_dim {
            for j in 0..embed_dim {
                let eye = if i == j { 1.0 } else { 0.0 };
                params.push(eye + r.gen_range(-0.01..0.01));
            }
        }
        RetrieverModel {
            embed_dim,
            vocab_size,
            params,
        }
    }

    /// Lexical bootstrap: width equals the vocabulary size and the token
    /// embeddings start at (noisy) identity, so an untrained encoder scores
    /// documents by token-overlap cosine. Training can then reshape the
    /// space from a sensible starting point.
    pub fn new_lexical(vocab_size: usize, seed: u64) -> Self {
        Self::lexical_with_weights(vocab_size, &vec![1.0; vocab_size], seed)
    }

    /// Lexical bootstrap with inverse-document-frequency weighting computed
    /// from a reference corpus. Rare tokens dominate the overlap score, so a
    /// long document matching the query's content words outranks a short one
    /// that only shares function words. Tokens absent from the corpus get
    /// the maximum weight.
    pub fn new_lexical_idf<'a, I>(vocab_size: usize, docs: I, seed: u64) -> Self
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        let mut df = vec![0usize; vocab_size];
        let mut n_docs = 0usize;
        for doc in docs {
            n_docs += 1;
            let mut seen = vec![false; vocab_size];
            for &t in doc {
                let t = t as usize;
                if t < vocab_size && !seen[t] {
                    seen[t] = true;
                    df[t] += 1;
                }
            }
        }
        let weights: Vec<f64> = df
            .iter()
            .map(|&c| ((n_docs as f64 + 1.0) / (c as f64 + 1.0)).ln() + 0.05)
            .collect();
        Self::lexical_with_weights(vocab_size, &weights, seed)
    }

    fn lexical_with_weights(vocab_size: usize, weights: &[f64], seed: u64) -> Self {
        let mut r = rng::stream(rng::mix(&[seed, 0x21]));
        let d = vocab_size;
        let mut params = Vec::with_capacity(2 * d * d);
        for i in 0..d {
            for j in 0..d {
                let eye = if i == j { weights[i] } else { 0.0 };
                params.push(eye + r.gen_range(-0.005..0.005));
            }
        }
        for i in 0..d {
            for j in 0..d {
                let eye = if i == j { 1.0 } else { 0.0 };
                params.push(eye + r.gen_range(-0.005..0.005));
            }
        }
        RetrieverModel {
            embed_dim: d,
            vocab_size,
            params,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn proj_offset(&self) -> usize {
        self.vocab_size * self.embed_dim
    }

    /// Query tower: mean-pool token embeddings, project, L2-normalize.
    pub fn encode_query_on_tape(&self, tape: &mut Tape, tokens: &[u32]) -> Result<VarId> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        let d = self.embed_dim;
        let rows = tokens.iter().map(|&t| t as usize).collect();
        let pooled = tape.param_rows_mean(0, d, rows);
        let w = tape.param_slice(self.proj_offset(), d * d);
        let proj = tape.matvec(w, pooled, d, d);
        Ok(tape.l2_normalize(proj))
    }

    /// Document tower: sum-pool the embeddings of the *distinct* tokens,
    /// project, no normalization. Deduplication stops repeated mentions from
    /// inflating the score, and skipping the L2 norm means a long document
    /// is not penalized for containing extra off-query content — the
    /// query-document dot product reduces to weighted query coverage.
    pub fn encode_document_on_tape(&self, tape: &mut Tape, tokens: &[u32]) -> Result<VarId> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        let d = self.embed_dim;
        let mut unique: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        unique.sort_unstable();
        unique.dedup();
        let n = unique.len() as f64;
        let pooled = tape.param_rows_mean(0, d, unique);
        let summed = tape.affine(pooled, n, 0.0);
        let w = tape.param_slice(self.proj_offset(), d * d);
        Ok(tape.matvec(w, summed, d, d))
    }

    pub fn encode_query(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let node = self.encode_query_on_tape(&mut tape, tokens)?;
        Ok(tape.value(node).to_vec())
    }

    pub fn encode_document(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let node = self.encode_document_on_tape(&mut tape, tokens)?;
        Ok(tape.value(node).to_vec())
    }

    /// Hash of the exact parameter bits, used to tie a persisted index to
    /// the model that produced it.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.embed_dim.to_le_bytes());
        hasher.update(self.vocab_size.to_le_bytes());
        for p in &self.params {
            hasher.update(p.to_bits().to_le_bytes());
        }
        crate::text::hex_string(&hasher.finalize())
    }
}
