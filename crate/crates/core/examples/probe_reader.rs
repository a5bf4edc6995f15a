//! Isolation probe: can the reader learn QA when handed the gold document
//! directly (oracle retrieval)? Separates reader-learning failures from
//! retrieval-quality failures.

use citlab_core::kb::{generate_corpus_family, generate_qa, FamilyParams};
use citlab_core::loss;
use citlab_core::reader::{ReaderArch, ReaderInput, ReaderModel};
use citlab_core::tape;
use citlab_core::text::{Vocabulary, EOS};
use rand::Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.08);
    let dim: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(24);
    let extra_docs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);

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
    let vocab = Vocabulary::build(fam.word_inventory(Some(&ds)));
    let corpus = fam.corpus(1).unwrap();
    let arch = ReaderArch { embed_dim: dim, ..ReaderArch::default() };
    let mut reader = ReaderModel::new(arch, vocab.len(), 7);

    let example = |qa: &citlab_core::kb::QAPair| {
        let mut ctxs = Vec::new();
        for &id in qa.gold_docs(1).unwrap() {
            ctxs.push((id, vocab.tokenize(&corpus.doc(id).unwrap().text)));
        }
        // pad with unrelated docs to make copying harder
        for e in 0..extra_docs {
            let d = &corpus.documents[(qa.gold_fact_id as usize * 7 + e * 13) % corpus.documents.len()];
            if !ctxs.iter().any(|(id, _)| *id == d.doc_id) {
                ctxs.push((d.doc_id, vocab.tokenize(&d.text)));
            }
        }
        let mut target = vocab.tokenize(&qa.answers(1).unwrap()[0]);
        target.push(EOS);
        (
            ReaderInput { question: vocab.tokenize(&qa.question), contexts: ctxs },
            target,
        )
    };

    let mut rng = citlab_core::rng::stream(1);
    for step in 0..steps {
        let batch: Vec<_> = (0..8).map(|_| example(&ds.train[rng.gen_range(0..ds.train.len())])).collect();
        let (val, mut grad) = tape::gradient(&reader.params.clone(), "qa", |t| {
            loss::qa_loss_on_tape(&reader, t, &batch).unwrap()
        })
        .unwrap();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > 5.0 {
            let s = 5.0 / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let lr_t = if step < 50 { lr * (step + 1) as f64 / 50.0 } else { lr };
        for (p, g) in reader.params.iter_mut().zip(&grad) {
            *p -= lr_t * g + lr_t * 1e-4 * *p;
        }
        if step % 100 == 0 || step == steps - 1 {
            eprintln!("step {step}: qa_loss {val:.3}");
        }
    }

    // eval train and test EM with oracle contexts
    for (name, set) in [("train", &ds.train), ("test", &ds.test)] {
        let mut hits = 0;
        let mut shown = 0;
        for qa in set.iter() {
            let (input, _) = example(qa);
            let out = reader.generate(&input, 20).unwrap();
            let pred = vocab.detokenize(&out);
            if citlab_core::metrics::exact_match(&pred, qa.answers(1).unwrap()).unwrap() == 1.0 {
                hits += 1;
            } else if shown < 8 {
                shown += 1;
                let gold = &qa.answers(1).unwrap()[0];
                let in_ctx = input
                    .contexts
                    .iter()
                    .any(|(_, toks)| toks.contains(&vocab.tokenize(gold)[0]));
                eprintln!(
                    "  [{name}] q: {:40} pred: {:16} gold: {gold} (gold-in-ctx: {in_ctx})",
                    qa.question, pred
                );
            }
        }
        println!("{name} EM: {:.1}", 100.0 * hits as f64 / set.len() as f64);
    }
}
