//! Deterministic training phases.
//!
//! One phase owns a reader and a retriever, snapshots the reader at phase
//! start (the anchor for the drift penalty), and then runs `max_steps` of:
//! sample a QA batch → retrieve contexts → reader gradient step on
//! `qa + α·drift` → retriever gradient step on the distillation loss. All
//! randomness flows through the phase seed, so the same config produces
//! bit-identical parameters.

use crate::error::{Error, Result};
use crate::index::{retriever_training_targets, RetrievalIndex};
use crate::kb::{QAPair, VersionedCorpus};
use crate::loss::{self, CitSettings};
use crate::reader::{ParameterSnapshot, ReaderInput, ReaderModel};
use crate::retriever::RetrieverModel;
use crate::rng;
use crate::tape;
use crate::text::{Vocabulary, EOS};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::loss::CitVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Drift-penalty strength (α in the total loss).
    pub alpha: f64,
    pub cit_variant: CitVariant,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Steps of linear learning-rate warmup before the constant rate.
    pub warmup_steps: usize,
    /// Decoupled weight decay applied with the step.
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub mean_span_len: usize,
    /// Length-normalize passage log-likelihoods inside the drift penalty.
    pub length_normalize: bool,
    /// Reuse one mask pattern per document for the whole run instead of
    /// resampling each step.
    pub fixed_mask: bool,
    /// Retrieved contexts per question.
    pub k: usize,
    /// Retrieval softmax temperature.
    pub tau_r: f64,
    /// Distillation softmax temperature.
    pub tau_d: f64,
    /// Retriever learning rate as a fraction of the reader rate.
    pub retriever_lr_scale: f64,
    /// Gate learning rate as a fraction of the reader rate. The
    /// generation/copy gate is a scalar bottleneck; at the full rate it
    /// locks onto whichever pathway is stronger at initialization before
    /// the other pathway has had a chance to learn.
    pub gate_lr_scale: f64,
    /// Steps before retriever updates begin; early reader likelihoods are
    /// noise and distilling them erases the lexical bootstrap.
    pub retriever_start: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
    /// Rebuild the document index every this many steps.
    pub refresh_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: 0.2,
            cit_variant: CitVariant::Msp,
            learning_rate: 0.08,
            batch_size: 8,
            max_steps: 300,
            warmup_steps: 50,
            weight_decay: 1e-4,
            mask_ratio: 0.15,
            mean_span_len: 3,
            length_normalize: false,
            fixed_mask: false,
            k: 5,
            tau_r: 1.0,
            tau_d: 1.0,
            retriever_lr_scale: 0.1,
            gate_lr_scale: 0.05,
            retriever_start: 100,
            clip_norm: 5.0,
            seed: 0,
            refresh_every: 50,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config("mask_ratio must be in (0, 1)".into()));
        }
        if self.mean_span_len == 0 {
            return Err(Error::Config("mean_span_len must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.tau_r > 0.0 && self.tau_d > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.refresh_every == 0 {
            return Err(Error::Config("refresh_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cit_settings(&self) -> CitSettings {
        CitSettings {
            variant: self.cit_variant,
            mask_ratio: self.mask_ratio,
            mean_span_len: self.mean_span_len,
            length_normalize: self.length_normalize,
        }
    }
}

/// One line of the append-only run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub qa_loss: f64,
    pub cit_loss: f64,
    pub total: f64,
    pub retriever_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<StepRecord>,
    /// The phase-start reader snapshot the drift penalty anchored to.
    pub anchor: ParameterSnapshot,
    /// Index over the phase corpus as of the last refresh (absent for
    /// closed-book phases).
    pub index: Option<RetrievalIndex>,
}

/// Stable salt derived from the phase id so distinct phases of one run draw
/// distinct random streams.
fn phase_salt(phase_id: &str) -> u64 {
    let digest = Sha256::digest(phase_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Mask seed for one (document, step) drift evaluation.
pub fn mask_seed(global_seed: u64, doc_id: u64, step: u64) -> u64 {
    rng::mix(&[global_seed, doc_id, step])
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
}

fn apply_step(params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g + lr * weight_decay * *p;
    }
}

/// Run one training phase over `corpus`. `use_contexts = false` gives the
/// closed-book regime: no retrieval, no drift penalty, no retriever updates.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    reader: &mut ReaderModel,
    retriever: &mut RetrieverModel,
    corpus: &VersionedCorpus,
    train_set: &[QAPair],
    vocab: &Vocabulary,
    config: &TrainingConfig,
    phase_id: &str,
    use_contexts: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("cannot train on an empty QA set"));
    }
    let anchor = reader.snapshot(phase_id);
    let settings = config.cit_settings();
    let salt = phase_salt(phase_id);
    let mut log = Vec::with_capacity(config.max_steps);
    let mut index: Option<RetrievalIndex> = None;
    let mut last_finite: Option<StepRecord> = None;

    for step in 0..config.max_steps {
        if use_contexts && (index.is_none() || step % config.refresh_every == 0) {
            index = Some(RetrievalIndex::build(retriever, corpus, vocab)?);
        }

        let lr = if step < config.warmup_steps {
            config.learning_rate * (step + 1) as f64 / config.warmup_steps as f64
        } else {
            config.learning_rate
        };

        // sample the batch
        let mut r = rng::stream(rng::mix(&[config.seed, salt, 0xB0, step as u64]));
        let batch_qa: Vec<&QAPair> = (0..config.batch_size)
            .map(|_| &train_set[r.gen_range(0..train_set.len())])
            .collect();

        // retrieve contexts and collect the drift document set
        let mut batch: Vec<(ReaderInput, Vec<u32>)> = Vec::with_capacity(batch_qa.len());
        let mut drift_docs: Vec<(Vec<u32>, u64)> = Vec::new();
        let mut seen_docs: Vec<u64> = Vec::new();
        let mut distill: Vec<(Vec<u32>, Vec<Vec<u32>>, Vec<f64>)> = Vec::new();
        for qa in &batch_qa {
            let question = vocab.tokenize(&qa.question);
            let answer = qa.answers(corpus.version)?[0].clone();
            let mut target = vocab.tokenize(&answer);
            target.push(EOS);

            let contexts = if let Some(index) = &index {
                let k = config.k.min(index.len());
                let result = index.retrieve_text(retriever, vocab, &qa.question, k, config.tau_r)?;
                let mut ctxs = Vec::with_capacity(result.doc_ids.len());
                for &doc_id in &result.doc_ids {
                    let doc = corpus.doc(doc_id).ok_or_else(|| {
                        Error::Lookup(format!("indexed document {doc_id} missing from corpus"))
                    })?;
                    let tokens = vocab.tokenize(&doc.text);
                    if !seen_docs.contains(&doc_id) {
                        seen_docs.push(doc_id);
                        let step_part = if config.fixed_mask { 0 } else { step as u64 };
                        drift_docs.push((tokens.clone(), mask_seed(config.seed, doc_id, step_part)));
                    }
                    ctxs.push((doc_id, tokens));
                }
                // distillation targets from the reader's per-candidate likelihoods
                let cands: Vec<(u64, Vec<u32>)> = ctxs.clone();
                let targets =
                    retriever_training_targets(reader, &question, &target, &cands, config.tau_d)?;
                distill.push((
                    question.clone(),
                    cands.into_iter().map(|(_, t)| t).collect(),
                    targets,
                ));
                ctxs
            } else {
                Vec::new()
            };
            batch.push((ReaderInput { question, contexts }, target));
        }

        let apply_drift = use_contexts && config.alpha > 0.0 && settings.variant != CitVariant::Off;
        if apply_drift && settings.variant == CitVariant::Msp {
            if let Some((tokens, _)) = drift_docs.iter().find(|(t, _)| t.len() < 4) {
                return Err(Error::invalid(format!(
                    "retrieved document with {} tokens is too short for span masking (minimum 4)",
                    tokens.len()
                )));
            }
        }

        // reader step on qa + alpha * drift
        let mut qa_val = 0.0;
        let mut cit_val = 0.0;
        let reader_grad = tape::gradient(&reader.params.clone(), "reader total loss", |t| {
            let qa = loss::qa_loss_on_tape(reader, t, &batch).expect("non-empty batch");
            qa_val = t.scalar(qa);
            if apply_drift {
                let cit = loss::cit_loss_on_tape(reader, t, &anchor, &drift_docs, &settings)
                    .expect("non-empty drift set");
                cit_val = t.scalar(cit);
                let scaled = t.affine(cit, config.alpha, 0.0);
                t.add(qa, scaled)
            } else {
                qa
            }
        });
        let (total, mut reader_grad) = match reader_grad {
            Ok(v) => v,
            Err(e) => {
                return Err(Error::Diverged {
                    step,
                    detail: diverge_detail(&e, &last_finite),
                })
            }
        };
        clip(&mut reader_grad, config.clip_norm);
        for g in &mut reader_grad[reader.gate_param_range()] {
            *g *= config.gate_lr_scale;
        }
        apply_step(&mut reader.params, &reader_grad, lr, config.weight_decay);

        // retriever step on the mean distillation loss
        let mut retriever_loss = 0.0;
        if !distill.is_empty() && step >= config.retriever_start {
            let result = tape::gradient(&retriever.params.clone(), "distillation loss", |t| {
                let terms: Vec<_> = distill
                    .iter()
                    .map(|(q, cands, targets)| {
                        loss::distillation_loss_on_tape(retriever, t, q, cands, targets, config.tau_r)
                            .expect("non-empty candidates")
                    })
                    .collect();
                let stacked = t.stack_scalars(terms);
                t.mean(stacked)
            });
            let (val, mut grad) = match result {
                Ok(v) => v,
                Err(e) => {
                    return Err(Error::Diverged {
                        step,
                        detail: diverge_detail(&e, &last_finite),
                    })
                }
            };
            retriever_loss = val;
            clip(&mut grad, config.clip_norm);
            apply_step(
                &mut retriever.params,
                &grad,
                lr * config.retriever_lr_scale,
                config.weight_decay,
            );
        }

        let record = StepRecord {
            step,
            qa_loss: qa_val,
            cit_loss: cit_val,
            total,
            retriever_loss,
            lr,
        };
        last_finite = Some(record.clone());
        log.push(record);
    }

    Ok(TrainOutcome { log, anchor, index })
}

fn diverge_detail(err: &Error, last: &Option<StepRecord>) -> String {
    match last {
        Some(r) => format!(
            "{err}; last finite losses at step {}: qa {:.6}, drift {:.6}, total {:.6}",
            r.step, r.qa_loss, r.cit_loss, r.total
        ),
        None => format!("{err}; no finite step completed"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{generate_corpus_family, generate_qa, FamilyParams};
    use crate::reader::ReaderArch;

    struct World {
        corpus: VersionedCorpus,
        train: Vec<QAPair>,
        vocab: Vocabulary,
    }

    fn world() -> World {
        let fam = generate_corpus_family(&FamilyParams {
            seed: 21,
            n_facts: 30,
            n_entities: 24,
            n_relations: 4,
            ..Default::default()
        })
        .unwrap();
        let ds = generate_qa(&fam, 1, 20, 10).unwrap();
        let vocab = Vocabulary::build(fam.word_inventory(Some(&ds)));
        World {
            corpus: fam.corpus(1).unwrap().clone(),
            train: ds.train,
            vocab,
        }
    }

    fn models(w: &World, seed: u64) -> (ReaderModel, RetrieverModel) {
        (
            ReaderModel::new(ReaderArch::default(), w.vocab.len(), seed),
            RetrieverModel::new(16, w.vocab.len(), seed),
        )
    }

    fn tiny_config(steps: usize) -> TrainingConfig {
        TrainingConfig {
            max_steps: steps,
            batch_size: 2,
            k: 2,
            warmup_steps: 2,
            refresh_every: 4,
            retriever_start: 0,
            seed: 5,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let w = world();
        let (mut reader, mut retriever) = models(&w, 1);
        let before = (reader.params.clone(), retriever.params.clone());
        let out = train_phase(
            &mut reader,
            &mut retriever,
            &w.corpus,
            &w.train,
            &w.vocab,
            &tiny_config(0),
            "p0",
            true,
        )
        .unwrap();
        assert!(out.log.is_empty());
        assert_eq!(reader.params, before.0);
        assert_eq!(retriever.params, before.1);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let w = world();
        let run = || {
            let (mut reader, mut retriever) = models(&w, 2);
            let out = train_phase(
                &mut reader,
                &mut retriever,
                &w.corpus,
                &w.train,
                &w.vocab,
                &tiny_config(4),
                "p1",
                true,
            )
            .unwrap();
            (reader.params, retriever.params, out.log)
        };
        let (r1, t1, l1) = run();
        let (r2, t2, l2) = run();
        assert!(r1.iter().zip(&r2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(t1.iter().zip(&t2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(l1, l2);
    }

    #[test]
    fn training_reduces_qa_loss() {
        let w = world();
        let (mut reader, mut retriever) = models(&w, 3);
        let cfg = TrainingConfig {
            max_steps: 40,
            alpha: 0.0,
            ..tiny_config(40)
        };
        let out = train_phase(
            &mut reader,
            &mut retriever,
            &w.corpus,
            &w.train,
            &w.vocab,
            &cfg,
            "p2",
            true,
        )
        .unwrap();
        let first = out.log.first().unwrap().qa_loss;
        let last = out.log.last().unwrap().qa_loss;
        assert!(last < first, "qa loss should fall: {first} -> {last}");
    }

    #[test]
    fn log_has_all_components_and_warmup_ramps() {
        let w = world();
        let (mut reader, mut retriever) = models(&w, 4);
        let cfg = tiny_config(4);
        let out = train_phase(
            &mut reader,
            &mut retriever,
            &w.corpus,
            &w.train,
            &w.vocab,
            &cfg,
            "p3",
            true,
        )
        .unwrap();
        assert_eq!(out.log.len(), 4);
        assert!((out.log[0].lr - cfg.learning_rate / 2.0).abs() < 1e-12);
        assert!((out.log[1].lr - cfg.learning_rate).abs() < 1e-12);
        for r in &out.log {
            assert!(r.qa_loss.is_finite() && r.cit_loss >= 0.0 && r.retriever_loss.is_finite());
            assert!((r.total - (r.qa_loss + cfg.alpha * r.cit_loss)).abs() < 1e-9);
        }
    }

    #[test]
    fn anchor_is_phase_start_and_never_mutated() {
        let w = world();
        let (mut reader, mut retriever) = models(&w, 5);
        let start = reader.params.clone();
        let out = train_phase(
            &mut reader,
            &mut retriever,
            &w.corpus,
            &w.train,
            &w.vocab,
            &tiny_config(3),
            "p4",
            true,
        )
        .unwrap();
        assert_eq!(out.anchor.values(), &start[..]);
        assert_ne!(reader.params, start);
    }

    #[test]
    fn nan_parameter_aborts_with_step_and_last_losses() {
        let w = world();
        let (mut reader, mut retriever) = models(&w, 6);
        reader.params.iter_mut().for_each(|p| *p = f64::NAN);
        let err = train_phase(
            &mut reader,
            &mut retriever,
            &w.corpus,
            &w.train,
            &w.vocab,
            &tiny_config(3),
            "p5",
            true,
        )
        .unwrap_err();
        match err {
            Error::Diverged { step, detail } => {
                assert_eq!(step, 0);
                assert!(detail.contains("no finite step completed"));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn closed_book_ignores_retriever_and_contexts() {
        let w = world();
        let (mut reader, mut retriever) = models(&w, 7);
        let before = retriever.params.clone();
        let out = train_phase(
            &mut reader,
            &mut retriever,
            &w.corpus,
            &w.train,
            &w.vocab,
            &tiny_config(3),
            "p6",
            false,
        )
        .unwrap();
        assert_eq!(retriever.params, before);
        assert!(out.index.is_none());
        assert!(out.log.iter().all(|r| r.cit_loss == 0.0 && r.retriever_loss == 0.0));
    }

    #[test]
    fn large_alpha_suppresses_likelihood_drift() {
        // paired-run oracle: same seed, alpha 0 vs alpha 100; the mean
        // absolute passage-likelihood drift after training must be smaller
        // under the strong penalty
        let w = world();
        let drift_after = |alpha: f64| {
            let (mut reader, mut retriever) = models(&w, 8);
            let anchor = reader.snapshot("start");
            let cfg = TrainingConfig {
                alpha,
                max_steps: 25,
                ..tiny_config(25)
            };
            train_phase(
                &mut reader,
                &mut retriever,
                &w.corpus,
                &w.train,
                &w.vocab,
                &cfg,
                "p7",
                true,
            )
            .unwrap();
            let mut total = 0.0;
            for doc in &w.corpus.documents {
                let tokens = w.vocab.tokenize(&doc.text);
                let seed = mask_seed(77, doc.doc_id, 0);
                let cur = reader.msp_log_likelihood(&tokens, seed, 0.15, 3).unwrap();
                let old = reader
                    .msp_log_likelihood_with_params(anchor.values(), &tokens, seed, 0.15, 3)
                    .unwrap();
                total += (cur - old).abs();
            }
            total / w.corpus.documents.len() as f64
        };
        let free = drift_after(0.0);
        let pinned = drift_after(100.0);
        assert!(
            pinned < free,
            "drift with alpha=100 ({pinned}) should be below alpha=0 ({free})"
        );
    }

    #[test]
    fn invalid_config_is_rejected() {
        let w = world();
        let (mut reader, mut retriever) = models(&w, 9);
        for bad in [
            TrainingConfig { alpha: -1.0, ..TrainingConfig::default() },
            TrainingConfig { batch_size: 0, ..TrainingConfig::default() },
            TrainingConfig { mask_ratio: 1.5, ..TrainingConfig::default() },
            TrainingConfig { refresh_every: 0, ..TrainingConfig::default() },
        ] {
            assert!(train_phase(
                &mut reader,
                &mut retriever,
                &w.corpus,
                &w.train,
                &w.vocab,
                &bad,
                "p8",
                true,
            )
            .is_err());
        }
    }
}
