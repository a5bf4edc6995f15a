//! Pathway-race probe: after a zero-shot-transfer run, show which pathway
//! (generation/memory vs copy) carries each updated training question.

use citlab_core::index::RetrievalIndex;
use citlab_core::kb::{generate_corpus_family, generate_qa, FamilyParams};
use citlab_core::loss::CitVariant;
use citlab_core::reader::{ReaderArch, ReaderInput};
use citlab_core::scenario::{run_scenario_with_models, Scenario};
use citlab_core::train::TrainingConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let alpha: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let scenario: Scenario = args
        .get(3)
        .map(|s| s.parse().unwrap())
        .unwrap_or(Scenario::ZeroShotTransfer);

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
    let env_f = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let base = TrainingConfig::default();
    let cfg = TrainingConfig {
        alpha,
        cit_variant: CitVariant::Msp,
        max_steps: steps,
        seed: 0,
        learning_rate: env_f("LR", base.learning_rate),
        gate_lr_scale: env_f("GLRS", base.gate_lr_scale),
        retriever_start: env_f("RSTART", base.retriever_start as f64) as usize,
        ..base
    };
    let (report, models) =
        run_scenario_with_models(scenario, &fam, &ds, ReaderArch::default(), &cfg).unwrap();
    eprintln!("{scenario} EM {:.1}, drift {:.2}", report.metrics.em, report.mean_abs_drift);

    let corpus = fam.corpus(2).unwrap();
    let index = RetrievalIndex::build(&models.retriever, corpus, &models.vocab).unwrap();
    let vocab = &models.vocab;
    let mut shown = 0;
    let mut lam_sum = 0.0;
    let mut n = 0;
    let pool: Vec<_> = if std::env::var("RACE_TEST").is_ok() {
        ds.test.iter().collect()
    } else {
        ds.train.iter().collect()
    };
    for qa in pool {
        let updated = qa.answers(1).unwrap() != qa.answers(2).unwrap();
        if !updated && std::env::var("RACE_ALL").is_err() && std::env::var("RACE_TEST").is_err() {
            continue;
        }
        let result = index
            .retrieve_text(&models.retriever, vocab, &qa.question, 5, 1.0)
            .unwrap();
        let contexts: Vec<(u64, Vec<u32>)> = result
            .doc_ids
            .iter()
            .map(|&id| (id, vocab.tokenize(&corpus.doc(id).unwrap().text)))
            .collect();
        let input = ReaderInput { question: vocab.tokenize(&qa.question), contexts };
        let (lambda, gen, copy) = models.reader.pathway_breakdown(&input, &[]);
        let top = |v: &[f64]| {
            let (i, p) = v.iter().enumerate().fold((0, 0.0), |acc, (i, &p)| {
                if p > acc.1 { (i, p) } else { acc }
            });
            (vocab.detokenize(&[i as u32]), p)
        };
        let (gt, gp) = top(&gen);
        let copy = copy.unwrap();
        let (ct, cp) = top(&copy);
        lam_sum += lambda.unwrap();
        n += 1;
        if shown < 12 {
            shown += 1;
            eprintln!(
                "q {:38} v1 {:8} v2 {:8} | lam {:.2} gen {gt:8}({gp:.2}) copy {ct:8}({cp:.2})",
                qa.question,
                qa.answers(1).unwrap()[0],
                qa.answers(2).unwrap()[0],
                lambda.unwrap()
            );
        }
    }
    eprintln!("mean lambda on updated train questions: {:.3}", lam_sum / n as f64);
}
