//! Line-delimited on-disk format for corpora and QA datasets.
//!
//! `corpus.jsonl` holds one document record per line, `qa.jsonl` one QA
//! record per line, and `meta.json` carries the family-level fields that have
//! no per-record home (family id, update fraction). The loader validates the
//! structural invariants so external data can be attached behind the same
//! interface as the synthetic generator.

use super::{Dataset, Document, QAPair, VersionedCorpus};
use crate::error::{Error, Result};
use crate::metrics::normalize_answer;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct DocRecord {
    doc_id: u64,
    version: u32,
    text: String,
    source_fact_ids: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QaRecord {
    question: String,
    answers: BTreeMap<u32, Vec<String>>,
    gold_fact_id: u64,
    gold_doc_ids_per_version: BTreeMap<u32, Vec<u64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    family_id: String,
    update_fraction: f64,
}

pub fn save_corpus(dir: &Path, corpora: &[VersionedCorpus]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = fs::File::create(dir.join("corpus.jsonl"))?;
    for corpus in corpora {
        for doc in &corpus.documents {
            let rec = DocRecord {
                doc_id: doc.doc_id,
                version: doc.version,
                text: doc.text.clone(),
                source_fact_ids: doc.source_fact_ids.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    if let Some(first) = corpora.first() {
        let meta = Meta {
            family_id: first.family_id.clone(),
            update_fraction: first.update_fraction,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(())
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, pairs) in [("qa_train.jsonl", &dataset.train), ("qa_test.jsonl", &dataset.test)] {
        let mut out = fs::File::create(dir.join(name))?;
        for qa in pairs {
            let rec = QaRecord {
                question: qa.question.clone(),
                answers: qa.answers_per_version.clone(),
                gold_fact_id: qa.gold_fact_id,
                gold_doc_ids_per_version: qa.gold_doc_ids_per_version.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(())
}

fn parse_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

fn load_qa_file(path: &Path) -> Result<Vec<QAPair>> {
    Ok(parse_lines::<QaRecord>(path)?
        .into_iter()
        .map(|r| QAPair {
            question: r.question,
            answers_per_version: r.answers,
            gold_fact_id: r.gold_fact_id,
            gold_doc_ids_per_version: r.gold_doc_ids_per_version,
        })
        .collect())
}

/// Load a corpus family directory written by [`save_corpus`]/[`save_dataset`]
/// (or by an external producer honoring the same format). All structural
/// invariants are checked; violations name the invariant.
pub fn load_external_dataset(dir: &Path) -> Result<(Vec<VersionedCorpus>, Dataset)> {
    let records: Vec<DocRecord> = parse_lines(&dir.join("corpus.jsonl"))?;
    if records.is_empty() {
        return Err(Error::Validation("corpus has no documents".to_string()));
    }

    let meta: Meta = match fs::read_to_string(dir.join("meta.json")) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => Meta {
            family_id: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "external".to_string()),
            update_fraction: 0.0,
        },
    };

    let mut by_version: BTreeMap<u32, Vec<Document>> = BTreeMap::new();
    for r in records {
        by_version.entry(r.version).or_default().push(Document {
            doc_id: r.doc_id,
            text: r.text,
            source_fact_ids: r.source_fact_ids,
            version: r.version,
        });
    }
    let mut corpora: Vec<VersionedCorpus> = Vec::new();
    for (version, mut docs) in by_version {
        docs.sort_by_key(|d| d.doc_id);
        corpora.push(VersionedCorpus {
            family_id: meta.family_id.clone(),
            version,
            documents: docs,
            update_fraction: meta.update_fraction,
        });
    }

    // invariant: version stability (same doc id multiset across versions)
    let first_ids: Vec<u64> = corpora[0].documents.iter().map(|d| d.doc_id).collect();
    for c in &corpora[1..] {
        let ids: Vec<u64> = c.documents.iter().map(|d| d.doc_id).collect();
        if ids != first_ids {
            return Err(Error::Validation(
                "version stability violated: document ids differ across versions".to_string(),
            ));
        }
    }

    let dataset = Dataset {
        family_id: meta.family_id.clone(),
        train: load_qa_file(&dir.join("qa_train.jsonl"))?,
        test: load_qa_file(&dir.join("qa_test.jsonl"))?,
    };

    // invariant: answer reachability (each gold doc set contains an
    // acceptable answer for its version, after normalization)
    for qa in dataset.train.iter().chain(&dataset.test) {
        for (&version, answers) in &qa.answers_per_version {
            let corpus = corpora
                .iter()
                .find(|c| c.version == version)
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "answer reachability violated: QA references missing corpus version {version}"
                    ))
                })?;
            let gold = qa
                .gold_doc_ids_per_version
                .get(&version)
                .cloned()
                .unwrap_or_default();
            let reachable = gold.iter().any(|&id| {
                corpus.doc(id).is_some_and(|d| {
                    let norm = normalize_answer(&d.text);
                    let doc_tokens: Vec<&str> = norm.split_whitespace().collect();
                    answers.iter().any(|a| {
                        let na = normalize_answer(a);
                        contains_subsequence(&doc_tokens, &na)
                    })
                })
            });
            if !reachable {
                return Err(Error::Validation(format!(
                    "answer reachability violated for question {:?} at version {version}",
                    qa.question
                )));
            }
        }
    }

    Ok((corpora, dataset))
}

pub(crate) fn contains_subsequence(doc_tokens: &[&str], needle: &str) -> bool {
    let needle: Vec<&str> = needle.split_whitespace().collect();
    if needle.is_empty() {
        return false;
    }
    doc_tokens.windows(needle.len()).any(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_corpus_family, generate_qa, FamilyParams};
    use super::*;

    fn family() -> (Vec<VersionedCorpus>, Dataset) {
        let fam = generate_corpus_family(&FamilyParams {
            seed: 7,
            n_facts: 60,
            n_entities: 40,
            n_relations: 5,
            ..Default::default()
        })
        .unwrap();
        let ds = generate_qa(&fam, 3, 40, 20).unwrap();
        (fam.corpora, ds)
    }

    #[test]
    fn round_trip_preserves_structures() {
        let (corpora, ds) = family();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &corpora).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let (loaded_corpora, loaded_ds) = load_external_dataset(dir.path()).unwrap();
        assert_eq!(loaded_corpora, corpora);
        assert_eq!(loaded_ds, ds);
    }

    #[test]
    fn empty_corpus_file_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("corpus.jsonl"), "").unwrap();
        let err = load_external_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("corpus has no documents"));
    }

    #[test]
    fn missing_answers_field_is_a_parse_error_with_line() {
        let (corpora, ds) = family();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &corpora).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        fs::write(
            dir.path().join("qa_train.jsonl"),
            "{\"question\":\"q\",\"gold_fact_id\":0,\"gold_doc_ids_per_version\":{}}\n",
        )
        .unwrap();
        match load_external_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unreachable_answer_is_a_validation_error() {
        let (corpora, mut ds) = family();
        let dir = tempfile::tempdir().unwrap();
        ds.train[0]
            .answers_per_version
            .insert(1, vec!["nonexistentanswer".to_string()]);
        save_corpus(dir.path(), &corpora).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let err = load_external_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("answer reachability"));
    }
}
