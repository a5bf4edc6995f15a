//! Training objectives.
//!
//! Three reader-side terms — QA negative log-likelihood, the corpus-drift
//! regularizer, and their α-weighted total — plus the KL distillation loss
//! that trains the retriever from reader likelihoods. The drift regularizer
//! penalizes the squared change in passage log-likelihood relative to a
//! phase-start snapshot:
//!
//! ```text
//! L_drift = (1/|C|) Σ_{c in C} (log p_φ(c) − log p_φ0(c))²
//! ```
//!
//! Both likelihoods use the *same* mask seed per document, so the penalty
//! measures parameter drift, not mask luck.

use crate::error::{Error, Result};
use crate::reader::{ParameterSnapshot, ReaderInput, ReaderModel};
use crate::retriever::RetrieverModel;
use crate::tape::{Tape, VarId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CitVariant {
    /// Masked-span passage likelihood (encoder-fusion readers).
    Msp,
    /// Full autoregressive passage likelihood (decoder-only readers).
    Lm,
    /// Regularizer disabled; α is ignored.
    Off,
}

/// Settings for one drift-penalty evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CitSettings {
    pub variant: CitVariant,
    pub mask_ratio: f64,
    pub mean_span_len: usize,
    /// Divide each passage log-likelihood by its token count before the
    /// squared difference.
    pub length_normalize: bool,
}

impl Default for CitSettings {
    fn default() -> Self {
        CitSettings {
            variant: CitVariant::Msp,
            mask_ratio: 0.15,
            mean_span_len: 3,
            length_normalize: false,
        }
    }
}

/// Mean negative log-likelihood of the gold answers over a batch, as a tape
/// node.
pub fn qa_loss_on_tape(
    reader: &ReaderModel,
    tape: &mut Tape,
    batch: &[(ReaderInput, Vec<u32>)],
) -> Result<VarId> {
    if batch.is_empty() {
        return Err(Error::invalid("qa loss over an empty batch"));
    }
    let mut per_example = Vec::with_capacity(batch.len());
    for (input, target) in batch {
        per_example.push(reader.log_prob_on_tape(tape, input, target));
    }
    let stacked = tape.stack_scalars(per_example);
    let mean = tape.mean(stacked);
    Ok(tape.affine(mean, -1.0, 0.0))
}

pub fn qa_loss(reader: &ReaderModel, batch: &[(ReaderInput, Vec<u32>)]) -> Result<f64> {
    let mut tape = Tape::new(&reader.params);
    let node = qa_loss_on_tape(reader, &mut tape, batch)?;
    Ok(tape.scalar(node))
}

/// Drift penalty over retrieved documents `docs` (token sequences paired
/// with their per-document mask seeds), as a tape node. The snapshot side is
/// evaluated off-tape: no gradient reaches φ0.
pub fn cit_loss_on_tape(
    reader: &ReaderModel,
    tape: &mut Tape,
    snapshot: &ParameterSnapshot,
    docs: &[(Vec<u32>, u64)],
    settings: &CitSettings,
) -> Result<VarId> {
    if settings.variant == CitVariant::Off {
        return Ok(tape.scalar_const(0.0));
    }
    if docs.is_empty() {
        return Err(Error::invalid("drift penalty over an empty document set"));
    }
    if snapshot.values().len() != reader.n_params() {
        return Err(Error::Config(format!(
            "snapshot '{}' is incompatible with the reader ({} vs {} parameters)",
            snapshot.tag(),
            snapshot.values().len(),
            reader.n_params()
        )));
    }
    // The penalized element set C is the retrieved sentences (for the
    // masked-span variant) or whole passages (autoregressive variant): each
    // element is pinned by its own squared log-likelihood change, so drifts
    // of opposite sign cannot cancel within a document.
    let mut terms = Vec::with_capacity(docs.len());
    for (tokens, seed) in docs {
        match settings.variant {
            CitVariant::Msp => {
                let current = reader.msp_unit_log_likelihoods_on_tape(
                    tape,
                    tokens,
                    *seed,
                    settings.mask_ratio,
                    settings.mean_span_len,
                )?;
                let anchor = reader.msp_unit_log_likelihoods_with_params(
                    snapshot.values(),
                    tokens,
                    *seed,
                    settings.mask_ratio,
                    settings.mean_span_len,
                )?;
                for ((cur, len), (old, _)) in current.into_iter().zip(anchor) {
                    let scale = if settings.length_normalize {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let diff = tape.affine(cur, scale, -scale * old);
                    terms.push(tape.mul(diff, diff));
                }
            }
            CitVariant::Lm => {
                let current = reader.lm_log_likelihood_on_tape(tape, tokens)?;
                let anchor = reader.lm_log_likelihood_with_params(snapshot.values(), tokens)?;
                let scale = if settings.length_normalize {
                    1.0 / tokens.len() as f64
                } else {
                    1.0
                };
                let diff = tape.affine(current, scale, -scale * anchor);
                terms.push(tape.mul(diff, diff));
            }
            CitVariant::Off => unreachable!(),
        }
    }
    let stacked = tape.stack_scalars(terms);
    Ok(tape.mean(stacked))
}

pub fn cit_loss(
    reader: &ReaderModel,
    snapshot: &ParameterSnapshot,
    docs: &[(Vec<u32>, u64)],
    settings: &CitSettings,
) -> Result<f64> {
    let mut tape = Tape::new(&reader.params);
    let node = cit_loss_on_tape(reader, &mut tape, snapshot, docs, settings)?;
    Ok(tape.scalar(node))
}

/// `qa + alpha * cit`; rejects non-finite inputs.
pub fn total_loss(qa: f64, cit: f64, alpha: f64) -> Result<f64> {
    if !qa.is_finite() || !cit.is_finite() {
        return Err(Error::NonFinite("total_loss inputs".to_string()));
    }
    if alpha < 0.0 {
        return Err(Error::invalid("alpha must be nonnegative"));
    }
    Ok(qa + alpha * cit)
}

/// KL(retriever distribution ‖ targets) over one query's candidates, as a
/// tape node over the retriever parameters. `targets` must be a probability
/// vector (e.g. from reader-likelihood distillation targets).
pub fn distillation_loss_on_tape(
    retriever: &RetrieverModel,
    tape: &mut Tape,
    query: &[u32],
    candidates: &[Vec<u32>],
    targets: &[f64],
    tau_r: f64,
) -> Result<VarId> {
    if candidates.is_empty() {
        return Err(Error::invalid("distillation over zero candidates"));
    }
    if candidates.len() != targets.len() {
        return Err(Error::invalid("targets misaligned with candidates"));
    }
    if !(tau_r > 0.0) {
        return Err(Error::invalid("softmax temperature must be positive"));
    }
    let q = retriever.encode_query_on_tape(tape, query)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let e = retriever.encode_document_on_tape(tape, cand)?;
        scores.push(tape.dot(q, e));
    }
    let stacked = tape.stack_scalars(scores);
    let scaled = tape.affine(stacked, 1.0 / tau_r, 0.0);
    let p = tape.softmax(scaled);
    let ln_p = tape.ln(p);
    // KL(p ‖ t) = Σ p·ln p − Σ p·ln t
    let self_entropy = tape.dot(p, ln_p);
    let ln_t = tape.constant(targets.iter().map(|t| t.max(1e-300).ln()).collect());
    let cross = tape.dot(p, ln_t);
    Ok(tape.sub(self_entropy, cross))
}

pub fn distillation_loss(
    retriever: &RetrieverModel,
    query: &[u32],
    candidates: &[Vec<u32>],
    targets: &[f64],
    tau_r: f64,
) -> Result<f64> {
    let mut tape = Tape::new(&retriever.params);
    let node = distillation_loss_on_tape(retriever, &mut tape, query, candidates, targets, tau_r)?;
    Ok(tape.scalar(node))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reader::ReaderArch;
    use crate::text::Vocabulary;

    fn vocab() -> Vocabulary {
        Vocabulary::build([
            "paris", "france", "capital", "what", "is", "the", "of", "berlin", "germany", ".",
        ])
    }

    fn reader(seed: u64) -> (ReaderModel, Vocabulary) {
        let v = vocab();
        (ReaderModel::new(ReaderArch::default(), v.len(), seed), v)
    }

    fn batch(v: &Vocabulary) -> Vec<(ReaderInput, Vec<u32>)> {
        vec![
            (
                ReaderInput {
                    question: v.tokenize("what is the capital of france"),
                    contexts: vec![(1, v.tokenize("the capital of france is paris ."))],
                },
                v.tokenize("paris"),
            ),
            (
                ReaderInput {
                    question: v.tokenize("what is the capital of germany"),
                    contexts: vec![(2, v.tokenize("the capital of germany is berlin ."))],
                },
                v.tokenize("berlin"),
            ),
        ]
    }

    #[test]
    fn qa_loss_uniform_reader_is_log_vocab() {
        let (mut m, v) = reader(1);
        m.params.iter_mut().for_each(|p| *p = 0.0);
        let batch = vec![(ReaderInput::default(), v.tokenize("paris"))];
        let loss = qa_loss(&m, &batch).unwrap();
        assert!((loss - (v.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn qa_loss_is_mean_of_per_example_losses() {
        let (m, v) = reader(2);
        let b = batch(&v);
        let whole = qa_loss(&m, &b).unwrap();
        let per: f64 = b
            .iter()
            .map(|(i, t)| qa_loss(&m, std::slice::from_ref(&(i.clone(), t.clone()))).unwrap())
            .sum::<f64>()
            / b.len() as f64;
        assert!((whole - per).abs() < 1e-12);
        assert!(whole >= 0.0);
        assert!(qa_loss(&m, &[]).is_err());
    }

    fn drift_docs(v: &Vocabulary) -> Vec<(Vec<u32>, u64)> {
        vec![
            (v.tokenize("the capital of france is paris ."), 101),
            (v.tokenize("the capital of germany is berlin ."), 202),
        ]
    }

    #[test]
    fn drift_at_snapshot_is_exactly_zero() {
        let (m, v) = reader(3);
        let snap = m.snapshot("start");
        for variant in [CitVariant::Msp, CitVariant::Lm] {
            let settings = CitSettings {
                variant,
                ..CitSettings::default()
            };
            let loss = cit_loss(&m, &snap, &drift_docs(&v), &settings).unwrap();
            assert_eq!(loss, 0.0, "{variant:?}");
        }
    }

    #[test]
    fn drift_matches_recomputed_likelihood_deltas() {
        // independent recomputation oracle: evaluate both likelihoods
        // directly and apply (1/|C|) Σ Δ² by hand
        let (mut m, v) = reader(4);
        let snap = m.snapshot("start");
        m.params.iter_mut().for_each(|p| *p += 0.03);
        let docs = drift_docs(&v);
        let settings = CitSettings::default();
        let loss = cit_loss(&m, &snap, &docs, &settings).unwrap();

        let mut expect = 0.0;
        for (tokens, seed) in &docs {
            let cur = m
                .msp_log_likelihood(tokens, *seed, settings.mask_ratio, settings.mean_span_len)
                .unwrap();
            let old = m
                .msp_log_likelihood_with_params(
                    snap.values(),
                    tokens,
                    *seed,
                    settings.mask_ratio,
                    settings.mean_span_len,
                )
                .unwrap();
            expect += (cur - old) * (cur - old);
        }
        expect /= docs.len() as f64;
        assert!((loss - expect).abs() < 1e-12);
        assert!(loss > 0.0);
    }

    #[test]
    fn drift_single_doc_is_squared_delta() {
        let (mut m, v) = reader(5);
        let snap = m.snapshot("start");
        m.params.iter_mut().for_each(|p| *p -= 0.02);
        let docs = vec![(v.tokenize("the capital of france is paris ."), 7u64)];
        let settings = CitSettings {
            variant: CitVariant::Lm,
            ..CitSettings::default()
        };
        let cur = m.lm_log_likelihood(&docs[0].0).unwrap();
        let old = m.lm_log_likelihood_with_params(snap.values(), &docs[0].0).unwrap();
        let loss = cit_loss(&m, &snap, &docs, &settings).unwrap();
        assert!((loss - (cur - old) * (cur - old)).abs() < 1e-12);
    }

    #[test]
    fn drift_rejects_incompatible_snapshot_and_empty_docs() {
        let (m, v) = reader(6);
        let bad = ParameterSnapshot::new("bad", vec![0.0; 3]);
        let settings = CitSettings::default();
        assert!(matches!(
            cit_loss(&m, &bad, &drift_docs(&v), &settings),
            Err(Error::Config(_))
        ));
        let snap = m.snapshot("start");
        assert!(cit_loss(&m, &snap, &[], &settings).is_err());
    }

    #[test]
    fn drift_off_variant_is_zero() {
        let (m, v) = reader(7);
        let snap = m.snapshot("start");
        let settings = CitSettings {
            variant: CitVariant::Off,
            ..CitSettings::default()
        };
        assert_eq!(cit_loss(&m, &snap, &drift_docs(&v), &settings).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_arithmetic_and_linearity() {
        assert!((total_loss(2.5, 4.0, 0.2).unwrap() - 3.3).abs() < 1e-12);
        assert_eq!(total_loss(1.7, 9.9, 0.0).unwrap(), 1.7);
        let (a1, a2) = (0.1, 0.7);
        let diff = total_loss(2.0, 5.0, a2).unwrap() - total_loss(2.0, 5.0, a1).unwrap();
        assert!((diff - (a2 - a1) * 5.0).abs() < 1e-12);
        assert!(total_loss(f64::NAN, 1.0, 0.2).is_err());
        assert!(total_loss(1.0, f64::INFINITY, 0.2).is_err());
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn distillation_is_zero_at_matching_distribution() {
        let v = vocab();
        let r = RetrieverModel::new(8, v.len(), 1);
        let query = v.tokenize("capital of france");
        let cands = vec![
            v.tokenize("the capital of france is paris ."),
            v.tokenize("the capital of germany is berlin ."),
        ];
        // targets equal to the retriever's own distribution => KL = 0
        let q = r.encode_query(&query).unwrap();
        let scores: Vec<f64> = cands
            .iter()
            .map(|c| {
                let e = r.encode_document(c).unwrap();
                q.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let own: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = distillation_loss(&r, &query, &cands, &own, 1.0).unwrap();
        assert!(loss.abs() < 1e-12);

        // any other target distribution gives positive KL
        let skew = vec![0.9, 0.1];
        assert!(distillation_loss(&r, &query, &cands, &skew, 1.0).unwrap() > 0.0);
    }
}
