//! Deterministic synthetic versioned knowledge corpora and QA datasets.
//!
//! A corpus family is a set of subject-relation-object facts rendered into
//! documents through fixed templates. Versions of one family share document
//! ids and differ only in the objects of a controlled fraction of facts,
//! which models a knowledge corpus being updated over time. Domains are
//! families with (partially) disjoint entity vocabularies and fresh relation
//! sets, which proxies a shift to a new knowledge domain.

mod gen;
pub(crate) mod io;

pub use gen::{generate_corpus_family, generate_domain, generate_qa, FamilyParams};
pub use io::{load_external_dataset, save_corpus, save_dataset};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One knowledge fact. The object is the answer surface form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub fact_id: u64,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub domain_tag: String,
}

/// One rendered passage. Text is a pure function of its facts and the
/// generation seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u64,
    pub text: String,
    pub source_fact_ids: Vec<u64>,
    pub version: u32,
}

/// One version of a corpus family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedCorpus {
    pub family_id: String,
    pub version: u32,
    pub documents: Vec<Document>,
    /// Fraction of facts whose object changed relative to version 1.
    pub update_fraction: f64,
}

impl VersionedCorpus {
    pub fn doc(&self, doc_id: u64) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }
}

/// A question with per-version acceptable answers and gold documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    /// version -> acceptable answer strings (the object of the gold fact in
    /// that version).
    pub answers_per_version: BTreeMap<u32, Vec<String>>,
    pub gold_fact_id: u64,
    pub gold_doc_ids_per_version: BTreeMap<u32, Vec<u64>>,
}

impl QAPair {
    pub fn answers(&self, version: u32) -> Result<&[String]> {
        self.answers_per_version
            .get(&version)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Lookup(format!("no answers for corpus version {version}")))
    }

    pub fn gold_docs(&self, version: u32) -> Result<&[u64]> {
        self.gold_doc_ids_per_version
            .get(&version)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Lookup(format!("no gold docs for corpus version {version}")))
    }
}

/// Train/test QA split over one corpus family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub family_id: String,
    pub train: Vec<QAPair>,
    pub test: Vec<QAPair>,
}

/// Entity and relation vocabulary of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_tag: String,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
}

/// A corpus family: facts per version plus the rendered corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFamily {
    pub family_id: String,
    pub domain: DomainSpec,
    /// facts[v - 1] are the facts of version v, aligned by fact_id.
    pub facts: Vec<Vec<Fact>>,
    pub corpora: Vec<VersionedCorpus>,
}

impl CorpusFamily {
    pub fn n_versions(&self) -> u32 {
        self.corpora.len() as u32
    }

    pub fn corpus(&self, version: u32) -> Result<&VersionedCorpus> {
        self.corpora
            .get(version.checked_sub(1).ok_or_else(|| Error::invalid("version must be >= 1"))? as usize)
            .ok_or_else(|| {
                Error::Lookup(format!(
                    "family {} has no version {version}",
                    self.family_id
                ))
            })
    }

    /// Every word appearing in documents or questions of this family, used
    /// to build the closed tokenizer vocabulary.
    pub fn word_inventory(&self, dataset: Option<&Dataset>) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        for corpus in &self.corpora {
            for doc in &corpus.documents {
                words.extend(doc.text.split_whitespace().map(str::to_string));
            }
        }
        if let Some(ds) = dataset {
            for qa in ds.train.iter().chain(ds.test.iter()) {
                words.extend(qa.question.split_whitespace().map(str::to_string));
                for answers in qa.answers_per_version.values() {
                    words.extend(answers.iter().cloned());
                }
            }
        }
        words.sort();
        words.dedup();
        words
    }

    /// The closed-class template words of this family: every inventory word
    /// that is not an entity or relation surface form. These words carry no
    /// fact content — they come from the document and question templates —
    /// and readers exclude them when pooling an associative-memory key.
    pub fn function_words(&self, dataset: Option<&Dataset>) -> Vec<String> {
        let content: std::collections::BTreeSet<&str> = self
            .domain
            .entities
            .iter()
            .chain(self.domain.relations.iter())
            .map(String::as_str)
            .collect();
        self.word_inventory(dataset)
            .into_iter()
            .filter(|w| !content.contains(w.as_str()))
            .collect()
    }
}

/// Registry of generated families so callers can refer to them by id.
#[derive(Debug, Default, Clone)]
pub struct FamilyStore {
    families: BTreeMap<String, CorpusFamily>,
}

impl FamilyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, family: CorpusFamily) {
        self.families.insert(family.family_id.clone(), family);
    }

    pub fn get(&self, family_id: &str) -> Result<&CorpusFamily> {
        self.families
            .get(family_id)
            .ok_or_else(|| Error::Lookup(format!("unknown corpus family '{family_id}'")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.families.keys().map(String::as_str)
    }
}
