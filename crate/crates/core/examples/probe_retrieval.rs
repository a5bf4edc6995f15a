//! Retrieval-quality probe: recall of the untrained lexical retriever.

use citlab_core::index::RetrievalIndex;
use citlab_core::kb::{generate_corpus_family, generate_qa, FamilyParams};
use citlab_core::retriever::RetrieverModel;
use citlab_core::text::Vocabulary;

fn main() {
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
    let docs: Vec<Vec<u32>> = corpus.documents.iter().map(|d| vocab.tokenize(&d.text)).collect();

    for (name, retr) in [
        ("plain", RetrieverModel::new_lexical(vocab.len(), 3)),
        (
            "idf",
            RetrieverModel::new_lexical_idf(vocab.len(), docs.iter().map(|t| t.as_slice()), 3),
        ),
    ] {
        let index = RetrievalIndex::build(&retr, corpus, &vocab).unwrap();
        let mut r1 = 0;
        let mut r5 = 0;
        let mut shown = 0;
        for qa in ds.test.iter() {
            let q = retr.encode_query(&vocab.tokenize(&qa.question)).unwrap();
            let hits = index.retrieve(&q, 5, 1.0).unwrap();
            let gold = qa.gold_docs(1).unwrap();
            let top = hits.doc_ids.clone();
            if gold.contains(&top[0]) {
                r1 += 1;
            }
            if top.iter().any(|d| gold.contains(d)) {
                r5 += 1;
            }
            if !gold.contains(&top[0]) && shown < 5 && name == "idf" {
                shown += 1;
                eprintln!("q: {}  gold {:?} -> got {:?}", qa.question, gold, top);
                eprintln!("  gold doc: {}", corpus.doc(gold[0]).unwrap().text);
                eprintln!("  top  doc: {}", corpus.doc(top[0]).unwrap().text);
            }
        }
        println!(
            "{name}: R@1 {:.1}  R@5 {:.1}",
            100.0 * r1 as f64 / ds.test.len() as f64,
            100.0 * r5 as f64 / ds.test.len() as f64
        );
    }
}
