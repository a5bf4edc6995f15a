//! Persisted experiment reports.
//!
//! A report captures everything one scenario run produced: the scenario,
//! the exact config (verbatim, for provenance), per-query metrics, the
//! per-step training logs, and the post-training passage-likelihood drift.
//! Reports contain no timestamps or hostnames, so rerunning the same cell
//! yields a byte-identical file; the filename is a content hash, which makes
//! identical reruns idempotent on disk.

use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::reader::ReaderArch;
use crate::scenario::Scenario;
use crate::text::hex_string;
use crate::train::{StepRecord, TrainingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub family_id: String,
    pub train_version: u32,
    pub eval_version: u32,
    pub arch: ReaderArch,
    pub config: TrainingConfig,
    pub metrics: MetricsReport,
    /// One per-step log per training phase, in phase order.
    pub phase_logs: Vec<Vec<StepRecord>>,
    /// Mean |Δ log-likelihood| over the final training corpus after the run.
    pub mean_abs_drift: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hash of the serialized report content.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex_string(&Sha256::digest(self.to_json()?.as_bytes())))
    }

    /// The filename this report persists under.
    pub fn file_name(&self) -> Result<String> {
        Ok(format!(
            "report-{}-{}-seed{}-{}.json",
            self.scenario.name(),
            self.family_id,
            self.config.seed,
            &self.content_hash()?[..12]
        ))
    }

    /// Write the report into `dir` under its content-hash name, atomically
    /// (write to a temp file in the same directory, then rename).
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(self.file_name()?);
        let tmp = dir.join(format!(".{}.tmp", self.content_hash()?));
        fs::write(&tmp, self.to_json()?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Append-only line-delimited serialization, one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for line in fs::read_to_string(path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(line)?);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::QueryRecord;

    fn sample() -> ExperimentReport {
        let record = QueryRecord {
            question: "q".into(),
            prediction: "p".into(),
            answers: vec!["p".into()],
            em: 1.0,
            f1: 1.0,
            gold_in_top: Default::default(),
            covered_at: Default::default(),
            overlap_old_corpus: None,
        };
        ExperimentReport {
            scenario: Scenario::Original,
            family_id: "fam".into(),
            train_version: 1,
            eval_version: 1,
            arch: ReaderArch::default(),
            config: TrainingConfig::default(),
            metrics: MetricsReport::from_records(vec![record]).unwrap(),
            phase_logs: vec![vec![StepRecord {
                step: 0,
                qa_loss: 1.0,
                cit_loss: 0.5,
                total: 1.1,
                retriever_loss: 0.2,
                lr: 0.01,
            }]],
            mean_abs_drift: 0.25,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let report = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = report.save(dir.path()).unwrap();
        assert_eq!(ExperimentReport::load(&path).unwrap(), report);
        // idempotent: saving again lands on the same file
        assert_eq!(report.save(dir.path()).unwrap(), path);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn filename_tracks_content() {
        let a = sample();
        let mut b = sample();
        b.mean_abs_drift = 0.5;
        assert_ne!(a.file_name().unwrap(), b.file_name().unwrap());
        assert!(a.file_name().unwrap().starts_with("report-original-fam-seed0-"));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let items: Vec<StepRecord> = sample().phase_logs.remove(0);
        write_jsonl(&path, &items).unwrap();
        let back: Vec<StepRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, items);
    }
}
