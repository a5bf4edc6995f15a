//! Quantitative instruments: EM, F1, overlap rate, answer coverage, and the
//! cross-domain relative performance (CRP) matrices.
//!
//! Aggregates are always reconstructable from per-query records; nothing is
//! reported that cannot be recomputed.

use crate::error::{Error, Result};
use crate::kb::io::contains_subsequence;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Standard reading-comprehension answer normalization: lowercase, strip
/// punctuation, drop English articles, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1.0 iff the normalized prediction equals any normalized answer.
pub fn exact_match(prediction: &str, answers: &[String]) -> Result<f64> {
    if answers.is_empty() {
        return Err(Error::invalid("exact_match needs a non-empty answer list"));
    }
    let p = normalize_answer(prediction);
    Ok(answers.iter().any(|a| normalize_answer(a) == p) as u8 as f64)
}

/// Token-level F1, maximized over the acceptable answers.
pub fn f1(prediction: &str, answers: &[String]) -> Result<f64> {
    if answers.is_empty() {
        return Err(Error::invalid("f1 needs a non-empty answer list"));
    }
    let pred = normalize_answer(prediction);
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    let mut best = 0.0f64;
    for answer in answers {
        let gold = normalize_answer(answer);
        let gold_tokens: Vec<&str> = gold.split_whitespace().collect();
        best = best.max(token_f1(&pred_tokens, &gold_tokens));
    }
    Ok(best)
}

fn token_f1(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return (pred == gold) as u8 as f64;
    }
    let mut gold_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in gold {
        *gold_counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = gold_counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Fraction (percent) of wrong predictions whose normalized text occurs as a
/// token subsequence in any of the old-corpus documents retrieved for that
/// query. `None` when there are no wrong predictions (the metric is
/// undefined, not zero).
pub fn overlap_rate(wrong_predictions: &[String], old_docs_per_query: &[Vec<String>]) -> Option<f64> {
    assert_eq!(
        wrong_predictions.len(),
        old_docs_per_query.len(),
        "retrieval lists must be aligned to predictions"
    );
    if wrong_predictions.is_empty() {
        return None;
    }
    let hits = wrong_predictions
        .iter()
        .zip(old_docs_per_query)
        .filter(|(pred, docs)| prediction_in_docs(pred, docs))
        .count();
    Some(100.0 * hits as f64 / wrong_predictions.len() as f64)
}

/// Whether the normalized prediction occurs as a token subsequence in any of
/// the given document texts.
pub fn prediction_in_docs(prediction: &str, docs: &[String]) -> bool {
    let norm = normalize_answer(prediction);
    if norm.is_empty() {
        return false;
    }
    docs.iter().any(|d| {
        let doc_norm = normalize_answer(d);
        let tokens: Vec<&str> = doc_norm.split_whitespace().collect();
        contains_subsequence(&tokens, &norm)
    })
}

/// Fraction (percent) of queries whose normalized prediction occurs in the
/// top-K retrieved document texts.
pub fn coverage(predictions: &[String], retrieved_per_query: &[Vec<String>], k: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::UndefinedMetric("coverage over empty query set".into()));
    }
    if retrieved_per_query.iter().any(|docs| k > docs.len()) {
        return Err(Error::invalid("coverage K exceeds retrieval depth"));
    }
    let hits = predictions
        .iter()
        .zip(retrieved_per_query)
        .filter(|(pred, docs)| prediction_in_docs(pred, &docs[..k]))
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// Square score matrix over an ordered domain list, plus its CRP form
/// `crp(s,t) = score(s,t) / score(t,t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrpMatrix {
    pub domains: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    pub crp: Vec<Vec<f64>>,
}

pub fn crp(domains: &[String], scores: &[Vec<f64>]) -> Result<CrpMatrix> {
    let n = domains.len();
    if scores.len() != n || scores.iter().any(|row| row.len() != n) {
        return Err(Error::invalid("CRP needs a square score matrix"));
    }
    for (t, domain) in domains.iter().enumerate() {
        if scores[t][t] <= 0.0 {
            return Err(Error::invalid(format!(
                "intra-domain score for domain '{domain}' is zero; CRP undefined"
            )));
        }
    }
    let crp = scores
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(t, &s)| s / scores[t][t])
                .collect()
        })
        .collect();
    Ok(CrpMatrix {
        domains: domains.to_vec(),
        scores: scores.to_vec(),
        crp,
    })
}

/// Heat value `h(s,t) = crp_a(s,t) - crp_b(s,t)`.
pub fn heatmap_delta(a: &CrpMatrix, b: &CrpMatrix) -> Result<Vec<Vec<f64>>> {
    if a.domains != b.domains {
        return Err(Error::invalid("CRP matrices cover different domain grids"));
    }
    Ok(a.crp
        .iter()
        .zip(&b.crp)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
        .collect())
}

/// Everything measured for one evaluated query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub question: String,
    pub prediction: String,
    pub answers: Vec<String>,
    pub em: f64,
    pub f1: f64,
    /// K -> whether a gold doc appeared in the top-K retrieval.
    pub gold_in_top: BTreeMap<usize, bool>,
    /// K -> whether the prediction text occurs in the top-K retrieved docs.
    pub covered_at: BTreeMap<usize, bool>,
    /// For wrong predictions: did the prediction overlap old-corpus docs.
    pub overlap_old_corpus: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub em: f64,
    pub f1: f64,
    pub overlap_rate: Option<f64>,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub coverage_at_k: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryRecord>,
}

impl MetricsReport {
    /// Aggregate a set of per-query records. This is the only constructor,
    /// so every aggregate is reconstructable from the records by definition.
    pub fn from_records(per_query: Vec<QueryRecord>) -> Result<Self> {
        if per_query.is_empty() {
            return Err(Error::UndefinedMetric("metrics over empty query set".into()));
        }
        let n = per_query.len() as f64;
        let em = 100.0 * per_query.iter().map(|r| r.em).sum::<f64>() / n;
        let f1 = 100.0 * per_query.iter().map(|r| r.f1).sum::<f64>() / n;

        let mut recall_at_k = BTreeMap::new();
        if let Some(first) = per_query.first() {
            for &k in first.gold_in_top.keys() {
                let hits = per_query.iter().filter(|r| r.gold_in_top[&k]).count();
                recall_at_k.insert(k, 100.0 * hits as f64 / n);
            }
        }
        let mut coverage_at_k = BTreeMap::new();
        if let Some(first) = per_query.first() {
            for &k in first.covered_at.keys() {
                let hits = per_query.iter().filter(|r| r.covered_at[&k]).count();
                coverage_at_k.insert(k, 100.0 * hits as f64 / n);
            }
        }
        let wrong: Vec<&QueryRecord> = per_query
            .iter()
            .filter(|r| r.overlap_old_corpus.is_some())
            .collect();
        let overlap_rate = if wrong.is_empty() {
            None
        } else {
            let hits = wrong
                .iter()
                .filter(|r| r.overlap_old_corpus == Some(true))
                .count();
            Some(100.0 * hits as f64 / wrong.len() as f64)
        };
        Ok(MetricsReport {
            em,
            f1,
            overlap_rate,
            recall_at_k,
            coverage_at_k,
            per_query,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ans(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("The Beatles!"), "beatles");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  Rishi   Sunak "), "rishi sunak");
        assert_eq!(normalize_answer("An Apple a Day"), "apple day");
    }

    #[test]
    fn em_and_f1_exact_hit() {
        let a = ans(&["paris"]);
        assert_eq!(exact_match("Paris", &a).unwrap(), 1.0);
        assert_eq!(f1("Paris", &a).unwrap(), 1.0);
    }

    #[test]
    fn f1_partial_token_overlap() {
        // precision 0.5, recall 1.0 -> 2*(0.5*1)/(0.5+1) = 2/3
        let a = ans(&["paris"]);
        assert_eq!(exact_match("paris france", &a).unwrap(), 0.0);
        assert!((f1("paris france", &a).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let a = ans(&["paris"]);
        assert_eq!(exact_match("", &a).unwrap(), 0.0);
        assert_eq!(f1("", &a).unwrap(), 0.0);
    }

    #[test]
    fn empty_answers_is_an_error() {
        assert!(exact_match("x", &[]).is_err());
        assert!(f1("x", &[]).is_err());
    }

    #[test]
    fn overlap_rate_counts_containment() {
        let wrong = vec!["boris johnson".to_string()];
        let docs = vec![vec!["the minister boris johnson spoke .".to_string()]];
        assert_eq!(overlap_rate(&wrong, &docs), Some(100.0));

        let docs = vec![vec!["boris was here and johnson there".to_string()]];
        assert_eq!(overlap_rate(&wrong, &docs), Some(0.0));
    }

    #[test]
    fn overlap_rate_undefined_without_wrong_predictions() {
        assert_eq!(overlap_rate(&[], &[]), None);
    }

    #[test]
    fn overlap_invariant_under_normalization_preserving_edits() {
        let docs = vec![vec!["we saw the beatles play".to_string()]];
        for pred in ["The Beatles!", "beatles", "  the BEATLES "] {
            assert_eq!(overlap_rate(&[pred.to_string()], &docs), Some(100.0));
        }
    }

    #[test]
    fn coverage_hand_case() {
        let preds: Vec<String> = ans(&["x", "y", "z", "w"]);
        let docs: Vec<Vec<String>> = vec![
            vec!["x here".into()],
            vec!["has y".into()],
            vec!["z too".into()],
            vec!["none".into()],
        ];
        assert_eq!(coverage(&preds, &docs, 1).unwrap(), 75.0);
        assert!(coverage(&[], &[], 1).is_err());
    }

    #[test]
    fn crp_substitution_and_diagonal() {
        let domains = vec!["s".to_string(), "t".to_string()];
        let scores = vec![vec![60.0, 30.0], vec![10.0, 60.0]];
        let m = crp(&domains, &scores).unwrap();
        assert_eq!(m.crp[0][1], 0.5);
        assert_eq!(m.crp[0][0], 1.0);
        assert_eq!(m.crp[1][1], 1.0);
    }

    #[test]
    fn crp_paper_scale_ratio() {
        let domains = vec!["v2017".to_string(), "v2018".to_string()];
        let scores = vec![vec![58.8, 56.9], vec![50.0, 62.2]];
        let m = crp(&domains, &scores).unwrap();
        assert!((m.crp[0][1] - 56.9 / 62.2).abs() < 1e-12);
        assert!((m.crp[0][1] - 0.915).abs() < 1e-3);
    }

    #[test]
    fn crp_zero_diagonal_names_domain() {
        let domains = vec!["good".to_string(), "bad".to_string()];
        let scores = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let err = crp(&domains, &scores).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn heatmap_of_matrix_with_itself_is_zero() {
        let domains = vec!["a".to_string(), "b".to_string()];
        let scores = vec![vec![4.0, 2.0], vec![1.0, 8.0]];
        let m = crp(&domains, &scores).unwrap();
        let h = heatmap_delta(&m, &m).unwrap();
        assert!(h.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn report_aggregates_match_records() {
        let mk = |em: f64, f1v: f64, hit: bool| QueryRecord {
            question: "q".into(),
            prediction: "p".into(),
            answers: ans(&["p"]),
            em,
            f1: f1v,
            gold_in_top: [(1usize, hit), (5, true)].into_iter().collect(),
            covered_at: [(1usize, hit)].into_iter().collect(),
            overlap_old_corpus: if em == 0.0 { Some(hit) } else { None },
        };
        let report =
            MetricsReport::from_records(vec![mk(1.0, 1.0, true), mk(0.0, 0.5, false)]).unwrap();
        assert_eq!(report.em, 50.0);
        assert_eq!(report.f1, 75.0);
        assert_eq!(report.recall_at_k[&1], 50.0);
        assert_eq!(report.recall_at_k[&5], 100.0);
        assert_eq!(report.overlap_rate, Some(0.0));
        // recall is monotone in K on these records
        assert!(report.recall_at_k[&1] <= report.recall_at_k[&5]);
    }
}
