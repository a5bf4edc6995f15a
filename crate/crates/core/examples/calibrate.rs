//! Scratch harness for tuning the desk-scale defaults: prints the headline
//! numbers (EM, overlap, recall, coverage, drift) for a small grid of
//! scenarios, alphas and seeds.

use citlab_core::kb::{generate_corpus_family, generate_qa, FamilyParams};
use citlab_core::loss::CitVariant;
use citlab_core::reader::{ReaderArch, ReaderKind};
use citlab_core::scenario::{run_scenario, Scenario};
use citlab_core::train::TrainingConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let alphas: Vec<f64> = args
        .get(3)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0.0, 0.2]);
    let lm_mode = args.get(4).map(|s| s == "lm").unwrap_or(false);

    let fam = generate_corpus_family(&FamilyParams {
        seed: 1000,
        n_facts: 150,
        n_entities: 60,
        n_relations: 6,
        update_fraction: 0.3,
        ..Default::default()
    })
    .unwrap();
    let ds = generate_qa(&fam, 77, 100, 40).unwrap();
    eprintln!(
        "corpus: {} docs, vocab-ish {} words",
        fam.corpus(1).unwrap().documents.len(),
        fam.word_inventory(Some(&ds)).len()
    );

    let dim: usize = std::env::var("DIM")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(ReaderArch::default().embed_dim);
    let arch = ReaderArch {
        embed_dim: dim,
        kind: if lm_mode {
            ReaderKind::DecoderOnly
        } else {
            ReaderKind::EncoderFusion
        },
        ..ReaderArch::default()
    };

    for &alpha in &alphas {
        for scenario in [Scenario::Original, Scenario::ZeroShotTransfer] {
            let mut ems = Vec::new();
            let mut overlaps = Vec::new();
            let mut recalls = Vec::new();
            let mut covers = Vec::new();
            let mut drifts = Vec::new();
            for seed in 0..n_seeds {
                let env_f = |k: &str, d: f64| {
                    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
                };
                let base = TrainingConfig::default();
                let cfg = TrainingConfig {
                    alpha,
                    cit_variant: if lm_mode { CitVariant::Lm } else { CitVariant::Msp },
                    max_steps: steps,
                    seed,
                    learning_rate: env_f("LR", base.learning_rate),
                    retriever_lr_scale: env_f("RLRS", base.retriever_lr_scale),
                    gate_lr_scale: env_f("GLRS", base.gate_lr_scale),
                    mask_ratio: env_f("MRATIO", base.mask_ratio),
                    mean_span_len: env_f("MSPAN", base.mean_span_len as f64) as usize,
                    retriever_start: env_f("RSTART", base.retriever_start as f64) as usize,
                    batch_size: env_f("BATCH", base.batch_size as f64) as usize,
                    k: env_f("K", base.k as f64) as usize,
                    ..base
                };
                let t0 = std::time::Instant::now();
                let report = run_scenario(scenario, &fam, &ds, arch, &cfg).unwrap();
                if std::env::var("CALIB_GROUPS").is_ok() {
                    // per-query records follow eval-set order: train then test
                    let n_train = ds.train.len();
                    let mut upd = (0.0, 0usize);
                    let mut unch = (0.0, 0usize);
                    let mut test = (0.0, 0usize);
                    let mut stale = 0usize;
                    let mut wrong = 0usize;
                    for (i, q) in report.metrics.per_query.iter().enumerate() {
                        let qa = if i < n_train { &ds.train[i] } else { &ds.test[i - n_train] };
                        let updated = qa.answers(1).unwrap() != qa.answers(2).unwrap();
                        let slot = if i >= n_train {
                            &mut test
                        } else if updated {
                            &mut upd
                        } else {
                            &mut unch
                        };
                        slot.0 += q.em;
                        slot.1 += 1;
                        if q.em == 0.0 {
                            wrong += 1;
                            if qa.answers(1).unwrap().contains(&q.prediction) {
                                stale += 1;
                            } else if i < n_train && updated && std::env::var("CALIB_WRONG").is_ok() {
                                eprintln!(
                                    "      wrong-upd: {:38} pred {:20} v1 {:?} v2 {:?}",
                                    q.question, q.prediction,
                                    qa.answers(1).unwrap(), qa.answers(2).unwrap()
                                );
                            }
                        }
                    }
                    eprintln!(
                        "    groups: train-upd {:.1} ({}), train-unch {:.1} ({}), test {:.1} ({}); stale wrongs {}/{}",
                        100.0 * upd.0 / upd.1.max(1) as f64, upd.1,
                        100.0 * unch.0 / unch.1.max(1) as f64, unch.1,
                        100.0 * test.0 / test.1.max(1) as f64, test.1,
                        stale, wrong
                    );
                }
                if std::env::var("CALIB_VERBOSE").is_ok() {
                    let log = &report.phase_logs[0];
                    eprintln!(
                        "    qa_loss: {:.3} -> {:.3}; retr: {:.4} -> {:.4}",
                        log.first().unwrap().qa_loss,
                        log.last().unwrap().qa_loss,
                        log.first().unwrap().retriever_loss,
                        log.last().unwrap().retriever_loss,
                    );
                    for q in report.metrics.per_query.iter().take(6) {
                        eprintln!("    q: {:40} pred: {:12} gold: {:?}", q.question, q.prediction, q.answers);
                    }
                }
                ems.push(report.metrics.em);
                if let Some(o) = report.metrics.overlap_rate {
                    overlaps.push(o);
                }
                if let Some(r) = report.metrics.recall_at_k.get(&1) {
                    recalls.push(*r);
                }
                let kmax = report.metrics.coverage_at_k.keys().max().copied();
                if let Some(k) = kmax {
                    covers.push(report.metrics.coverage_at_k[&k]);
                }
                drifts.push(report.mean_abs_drift);
                eprintln!(
                    "  cell alpha={alpha} {scenario} seed={seed}: em={:.1} ({:.1?}s)",
                    report.metrics.em,
                    t0.elapsed().as_secs_f32()
                );
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            println!(
                "alpha={alpha:4} {scenario:22} EM={:5.1} overlap={:5.1} R@1={:5.1} cov={:5.1} drift={:6.2}",
                mean(&ems),
                mean(&overlaps),
                mean(&recalls),
                mean(&covers),
                mean(&drifts),
            );
        }
    }
}
