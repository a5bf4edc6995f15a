//! Memorization probe: closed-book training on the QA pairs alone. Measures
//! how fast the generation pathway can absorb question->answer mappings.

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
    let arch = ReaderArch { embed_dim: dim, ..ReaderArch::default() };
    let mut reader = ReaderModel::new(arch, vocab.len(), 7);
    reader.set_function_words(
        fam.function_words(Some(&ds)).iter().flat_map(|w| vocab.tokenize(w)),
    );

    let example = |qa: &citlab_core::kb::QAPair| {
        let mut target = vocab.tokenize(&qa.answers(1).unwrap()[0]);
        target.push(EOS);
        (
            ReaderInput { question: vocab.tokenize(&qa.question), contexts: Vec::new() },
            target,
        )
    };

    let mut rng = citlab_core::rng::stream(1);
    for step in 0..steps {
        let batch: Vec<_> =
            (0..8).map(|_| example(&ds.train[rng.gen_range(0..ds.train.len())])).collect();
        let (val, mut grad) = tape::gradient(&reader.params.clone(), "qa", |t| {
            loss::qa_loss_on_tape(&reader, t, &batch).unwrap()
        })
        .unwrap();
        let clip: f64 = std::env::var("CLIP").ok().and_then(|v| v.parse().ok()).unwrap_or(5.0);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            let s = clip / norm;
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

    let mut hits = 0;
    for qa in ds.train.iter() {
        let (input, _) = example(qa);
        let out = reader.generate(&input, 20).unwrap();
        let pred = vocab.detokenize(&out);
        if citlab_core::metrics::exact_match(&pred, qa.answers(1).unwrap()).unwrap() == 1.0 {
            hits += 1;
        }
    }
    println!("closed-book train EM: {:.1}", 100.0 * hits as f64 / ds.train.len() as f64);
}
