//! Exact inner-product retrieval index over one corpus version.
//!
//! The index stores every document embedding and scores queries against all
//! of them — exact search, no approximation — so retrieval results are a
//! pure function of (retriever parameters, corpus, query). Ties in score
//! break toward the lower document id.

use crate::error::{Error, Result};
use crate::kb::VersionedCorpus;
use crate::retriever::RetrieverModel;
use crate::text::Vocabulary;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub family_id: String,
    pub version: u32,
    /// Hash of the retriever that produced the embeddings.
    pub model_hash: String,
    pub dim: usize,
    pub doc_ids: Vec<u64>,
    /// Row-major, one row of `dim` values per document.
    pub embeddings: Vec<f64>,
}

/// Top-K retrieval outcome, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub doc_ids: Vec<u64>,
    pub scores: Vec<f64>,
    /// Softmax of `scores / tau` over the returned K; sums to 1.
    pub distribution: Vec<f64>,
}

impl RetrievalIndex {
    pub fn build(
        retriever: &RetrieverModel,
        corpus: &VersionedCorpus,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if corpus.documents.is_empty() {
            return Err(Error::invalid("cannot index an empty corpus"));
        }
        let dim = retriever.embed_dim;
        let mut doc_ids = Vec::with_capacity(corpus.documents.len());
        let mut embeddings = Vec::with_capacity(corpus.documents.len() * dim);
        for doc in &corpus.documents {
            let emb = retriever.encode_document(&vocab.tokenize(&doc.text))?;
            doc_ids.push(doc.doc_id);
            embeddings.extend(emb);
        }
        Ok(RetrievalIndex {
            family_id: corpus.family_id.clone(),
            version: corpus.version,
            model_hash: retriever.content_hash(),
            dim,
            doc_ids,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    /// Inner-product scores of a query embedding against every document,
    /// in index order.
    pub fn score_all(&self, query: &[f64]) -> Vec<f64> {
        self.embeddings
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(query).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Exact top-K by inner product; `tau` is the softmax temperature for
    /// the returned distribution.
    pub fn retrieve(&self, query: &[f64], k: usize, tau: f64) -> Result<RetrievalResult> {
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!(
                "k must be in 1..={} (got {k})",
                self.len()
            )));
        }
        if query.len() != self.dim {
            return Err(Error::invalid(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dim
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::invalid("softmax temperature must be positive"));
        }
        let scores = self.score_all(query);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then(self.doc_ids[a].cmp(&self.doc_ids[b]))
        });
        order.truncate(k);
        let top_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let max = top_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = top_scores.iter().map(|s| ((s - max) / tau).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(RetrievalResult {
            doc_ids: order.iter().map(|&i| self.doc_ids[i]).collect(),
            scores: top_scores,
            distribution: exps.iter().map(|e| e / z).collect(),
        })
    }

    /// Encode the query text and retrieve in one step.
    pub fn retrieve_text(
        &self,
        retriever: &RetrieverModel,
        vocab: &Vocabulary,
        query: &str,
        k: usize,
        tau: f64,
    ) -> Result<RetrievalResult> {
        let emb = retriever.encode_query(&vocab.tokenize(query))?;
        self.retrieve(&emb, k, tau)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let index: RetrievalIndex = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if index.embeddings.len() != index.doc_ids.len() * index.dim {
            return Err(Error::Validation(format!(
                "index embedding payload has {} values, header implies {}",
                index.embeddings.len(),
                index.doc_ids.len() * index.dim
            )));
        }
        Ok(index)
    }

    /// Check that a persisted index was built by this retriever.
    pub fn validate_model(&self, retriever: &RetrieverModel) -> Result<()> {
        if self.model_hash != retriever.content_hash() {
            return Err(Error::Validation(
                "index was built by a different retriever (model hash mismatch)".to_string(),
            ));
        }
        Ok(())
    }
}

/// Distillation targets for retriever training: a distribution over the
/// candidate documents proportional to how well each one alone lets the
/// reader explain the gold answer, `target_i ∝ exp(log_prob_i / tau_d)`.
pub fn retriever_training_targets(
    reader: &crate::reader::ReaderModel,
    question: &[u32],
    answer: &[u32],
    candidates: &[(u64, Vec<u32>)],
    tau_d: f64,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::invalid("distillation targets need >= 1 candidate"));
    }
    if !(tau_d > 0.0) {
        return Err(Error::invalid("softmax temperature must be positive"));
    }
    let logits: Vec<f64> = candidates
        .iter()
        .map(|(doc_id, tokens)| {
            let input = crate::reader::ReaderInput {
                question: question.to_vec(),
                contexts: vec![(*doc_id, tokens.clone())],
            };
            reader.log_prob(&input, answer).value / tau_d
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / z).collect())
}

/// Fraction of queries whose gold set intersects the top-K. Each query is a
/// (retrieved top-K ids, gold ids) pair.
pub fn recall_at_k(cases: &[(Vec<u64>, Vec<u64>)], k: usize) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::UndefinedMetric(
            "recall over zero queries".to_string(),
        ));
    }
    let mut hits = 0usize;
    for (retrieved, gold) in cases {
        if k > retrieved.len() {
            return Err(Error::invalid(format!(
                "recall@{k} requested but only {} results retrieved",
                retrieved.len()
            )));
        }
        if retrieved[..k].iter().any(|id| gold.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{generate_corpus_family, FamilyParams};

    fn setup() -> (RetrieverModel, RetrievalIndex, Vocabulary, VersionedCorpus) {
        let fam = generate_corpus_family(&FamilyParams {
            seed: 11,
            n_facts: 40,
            n_entities: 30,
            n_relations: 4,
            ..Default::default()
        })
        .unwrap();
        let vocab = Vocabulary::build(fam.word_inventory(None));
        let retriever = RetrieverModel::new(16, vocab.len(), 5);
        let corpus = fam.corpus(1).unwrap().clone();
        let index = RetrievalIndex::build(&retriever, &corpus, &vocab).unwrap();
        (retriever, index, vocab, corpus)
    }

    #[test]
    fn retrieve_matches_brute_force() {
        let (retriever, index, vocab, corpus) = setup();
        let q = retriever
            .encode_query(&vocab.tokenize(&corpus.documents[3].text))
            .unwrap();
        let result = index.retrieve(&q, 5, 1.0).unwrap();

        // brute force: score every doc, sort by (score desc, id asc)
        let mut scored: Vec<(f64, u64)> = corpus
            .documents
            .iter()
            .map(|d| {
                let e = retriever.encode_document(&vocab.tokenize(&d.text)).unwrap();
                (q.iter().zip(&e).map(|(a, b)| a * b).sum(), d.doc_id)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expect: Vec<u64> = scored.iter().take(5).map(|s| s.1).collect();
        assert_eq!(result.doc_ids, expect);
    }

    #[test]
    fn lexical_model_retrieves_own_document_first() {
        let (_, _, vocab, corpus) = setup();
        let retriever = RetrieverModel::new_lexical(vocab.len(), 5);
        let index = RetrievalIndex::build(&retriever, &corpus, &vocab).unwrap();
        let q = retriever
            .encode_query(&vocab.tokenize(&corpus.documents[3].text))
            .unwrap();
        let result = index.retrieve(&q, 5, 1.0).unwrap();
        // the query is a document's own text: full token coverage wins
        assert_eq!(result.doc_ids[0], corpus.documents[3].doc_id);
    }

    #[test]
    fn distribution_sums_to_one_and_orders_with_scores() {
        let (retriever, index, vocab, corpus) = setup();
        let q = retriever
            .encode_query(&vocab.tokenize(&corpus.documents[0].text))
            .unwrap();
        let r = index.retrieve(&q, 4, 0.1).unwrap();
        let sum: f64 = r.distribution.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for w in r.distribution.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn k_out_of_range_errors() {
        let (retriever, index, vocab, corpus) = setup();
        let q = retriever
            .encode_query(&vocab.tokenize(&corpus.documents[0].text))
            .unwrap();
        assert!(index.retrieve(&q, 0, 1.0).is_err());
        assert!(index.retrieve(&q, index.len() + 1, 1.0).is_err());
        assert!(index.retrieve(&q, index.len(), 1.0).is_ok());
    }

    #[test]
    fn ties_break_toward_lower_doc_id() {
        let index = RetrievalIndex {
            family_id: "t".to_string(),
            version: 1,
            model_hash: String::new(),
            dim: 1,
            doc_ids: vec![9, 2, 5],
            embeddings: vec![1.0, 1.0, 1.0],
        };
        let r = index.retrieve(&[1.0], 3, 1.0).unwrap();
        assert_eq!(r.doc_ids, vec![2, 5, 9]);
    }

    #[test]
    fn persistence_round_trip_and_model_validation() {
        let (retriever, index, _, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        index.save(&path).unwrap();
        let loaded = RetrievalIndex::load(&path).unwrap();
        assert_eq!(loaded, index);
        loaded.validate_model(&retriever).unwrap();

        let other = RetrieverModel::new(16, retriever.vocab_size, 99);
        assert!(loaded.validate_model(&other).is_err());
    }

    #[test]
    fn distillation_targets_follow_reader_likelihood() {
        use crate::reader::{ReaderArch, ReaderModel};
        let vocab = Vocabulary::build(["paris", "france", "capital", "berlin", "is", "the", "of"]);
        let reader = ReaderModel::new(ReaderArch::default(), vocab.len(), 4);
        let q = vocab.tokenize("capital of france");
        let a = vocab.tokenize("paris");
        let doc1 = vocab.tokenize("the capital of france is paris");
        let doc2 = vocab.tokenize("berlin berlin berlin");

        // single candidate => probability 1
        let t = retriever_training_targets(&reader, &q, &a, &[(1, doc1.clone())], 1.0).unwrap();
        assert_eq!(t, vec![1.0]);

        // identical candidates score identical log-probs => (0.5, 0.5)
        let t = retriever_training_targets(
            &reader,
            &q,
            &a,
            &[(1, doc1.clone()), (2, doc1.clone())],
            1.0,
        )
        .unwrap();
        assert!((t[0] - 0.5).abs() < 1e-12 && (t[1] - 0.5).abs() < 1e-12);

        // large temperature flattens toward uniform
        let t = retriever_training_targets(
            &reader,
            &q,
            &a,
            &[(1, doc1.clone()), (2, doc2.clone())],
            1e6,
        )
        .unwrap();
        assert!(t.iter().all(|p| (p - 0.5).abs() < 1e-3));

        // sums to 1 and ranks by reader likelihood at tau = 1
        let t = retriever_training_targets(&reader, &q, &a, &[(1, doc1), (2, doc2)], 1.0).unwrap();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(retriever_training_targets(&reader, &q, &a, &[], 1.0).is_err());
    }

    #[test]
    fn recall_at_k_counts_gold_hits() {
        let cases = vec![
            (vec![1, 2, 3], vec![3]),
            (vec![4, 5, 6], vec![9]),
            (vec![7, 8, 9], vec![7]),
            (vec![1, 2, 3], vec![2, 3]),
        ];
        assert_eq!(recall_at_k(&cases, 1).unwrap(), 0.25);
        assert_eq!(recall_at_k(&cases, 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&cases, 3).unwrap(), 0.75);
        assert!(recall_at_k(&cases, 4).is_err());
        assert!(recall_at_k(&[], 1).is_err());
    }
}
