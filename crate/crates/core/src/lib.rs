//! Desk-scale laboratory for retrieval-augmented question answering with
//! corpus-invariant tuning (CIT).
//!
//! The crate bundles everything needed to study how a retrieval-augmented
//! reader over-memorizes its background corpus and how a likelihood-drift
//! regularizer mitigates it:
//!
//! - [`kb`] — deterministic synthetic versioned knowledge corpora and QA sets
//! - [`text`] — closed-vocabulary whitespace tokenizer with sentinel specials
//! - [`tape`] — reverse-mode autodiff over flat parameter vectors
//! - [`reader`] — pointer-generator reader with order-free context fusion
//! - [`retriever`] — bi-encoder dense retriever
//! - [`index`] — exact top-K retrieval index plus recall accounting
//! - [`loss`] — QA loss, CIT regularizer, retriever distillation
//! - [`train`] — deterministic training phases with parameter snapshots
//! - [`scenario`] — closed-book / original / transfer experiment protocols
//! - [`metrics`] — EM, F1, overlap rate, coverage, CRP heatmaps
//! - [`report`] — persisted experiment reports with content-hash names

pub mod error;
pub mod index;
pub mod kb;
pub mod loss;
pub mod metrics;
pub mod reader;
pub mod report;
pub mod retriever;
pub mod rng;
pub mod scenario;
pub mod tape;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use index::{RetrievalIndex, RetrievalResult};
pub use kb::{CorpusFamily, Dataset, Document, Fact, QAPair, VersionedCorpus};
pub use metrics::{CrpMatrix, MetricsReport};
pub use reader::{ParameterSnapshot, ReaderArch, ReaderKind, ReaderModel};
pub use report::ExperimentReport;
pub use retriever::RetrieverModel;
pub use scenario::Scenario;
pub use text::Vocabulary;
pub use train::{CitVariant, TrainingConfig};
