//! Generators for corpus families, domains, and QA splits.

use super::{CorpusFamily, Dataset, Document, DomainSpec, Fact, QAPair, VersionedCorpus};
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

/// Words the templates are made of; entity generation avoids colliding with
/// these.
const FUNCTION_WORDS: &[&str] = &[
    "the", "of", "is", "what", "which", "does", "have", "near", "seen", ".", "?",
];

const ONSETS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

#[derive(Debug, Clone)]
pub struct FamilyParams {
    pub seed: u64,
    pub family_id: String,
    pub domain_tag: String,
    pub n_facts: usize,
    pub n_versions: u32,
    pub update_fraction: f64,
    pub n_entities: usize,
    pub n_relations: usize,
}

impl Default for FamilyParams {
    fn default() -> Self {
        FamilyParams {
            seed: 0,
            family_id: "family".to_string(),
            domain_tag: "general".to_string(),
            n_facts: 600,
            n_versions: 2,
            update_fraction: 0.3,
            n_entities: 150,
            n_relations: 8,
        }
    }
}

impl FamilyParams {
    fn validate(&self) -> Result<()> {
        if self.n_facts < 10 {
            return Err(Error::invalid("n_facts must be >= 10"));
        }
        if self.n_versions < 1 {
            return Err(Error::invalid("n_versions must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.update_fraction) {
            return Err(Error::invalid("update_fraction must be in [0, 1]"));
        }
        if self.n_entities * self.n_relations < self.n_facts {
            return Err(Error::invalid(
                "entity/relation vocabulary too small for the requested fact count",
            ));
        }
        Ok(())
    }
}

/// Draw a pseudo-word of 2-3 syllables that is new w.r.t. `taken`.
fn fresh_word(rng: &mut ChaCha8Rng, taken: &BTreeSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*ONSETS.choose(rng).expect("nonempty"));
            w.push(*VOWELS.choose(rng).expect("nonempty"));
        }
        if !taken.contains(&w) && !FUNCTION_WORDS.contains(&w.as_str()) {
            return w;
        }
    }
}

fn fresh_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    (0..n)
        .map(|_| {
            let w = fresh_word(rng, taken);
            taken.insert(w.clone());
            w
        })
        .collect()
}

/// Generate a corpus family from scratch with its own domain vocabulary.
pub fn generate_corpus_family(params: &FamilyParams) -> Result<CorpusFamily> {
    params.validate()?;
    let mut taken = BTreeSet::new();
    let mut vocab_rng = rng::stream(rng::mix(&[params.seed, 0x01]));
    let entities = fresh_words(&mut vocab_rng, params.n_entities, &mut taken);
    let relations = fresh_words(&mut vocab_rng, params.n_relations, &mut taken);
    let domain = DomainSpec {
        domain_tag: params.domain_tag.clone(),
        entities,
        relations,
    };
    build_family(params, domain)
}

/// Generate a new domain whose entity vocabulary shares exactly
/// `round(vocab_overlap * n_entities)` entities with the base domain.
/// Relations are always fresh, so the shift is both lexical and relational.
pub fn generate_domain(
    params: &FamilyParams,
    vocab_overlap: f64,
    base: Option<&CorpusFamily>,
) -> Result<CorpusFamily> {
    if !(0.0..=1.0).contains(&vocab_overlap) {
        return Err(Error::invalid("vocab_overlap must be in [0, 1]"));
    }
    params.validate()?;
    let mut vocab_rng = rng::stream(rng::mix(&[params.seed, 0x02]));
    let mut taken: BTreeSet<String> = BTreeSet::new();
    let mut entities: Vec<String> = Vec::new();
    if let Some(base) = base {
        let n_shared = (vocab_overlap * params.n_entities as f64).round() as usize;
        if n_shared > base.domain.entities.len() {
            return Err(Error::invalid(
                "base domain has too few entities for the requested overlap",
            ));
        }
        let mut pool = base.domain.entities.clone();
        pool.shuffle(&mut vocab_rng);
        entities.extend(pool.iter().take(n_shared).cloned());
        // Fresh entities must not collide with *any* base entity, shared or
        // not, so the overlap count is exact.
        taken.extend(base.domain.entities.iter().cloned());
        taken.extend(base.domain.relations.iter().cloned());
    } else if vocab_overlap > 0.0 {
        return Err(Error::Lookup(
            "vocab_overlap > 0 requires a base domain".to_string(),
        ));
    }
    let n_fresh = params.n_entities - entities.len();
    entities.extend(fresh_words(&mut vocab_rng, n_fresh, &mut taken));
    let relations = fresh_words(&mut vocab_rng, params.n_relations, &mut taken);
    let domain = DomainSpec {
        domain_tag: params.domain_tag.clone(),
        entities,
        relations,
    };
    build_family(params, domain)
}

fn build_family(params: &FamilyParams, domain: DomainSpec) -> Result<CorpusFamily> {
    let mut fact_rng = rng::stream(rng::mix(&[params.seed, 0x03]));

    // Unique (subject, relation) pairs so every question has one gold fact.
    let mut pairs: Vec<(usize, usize)> = (0..domain.entities.len())
        .flat_map(|s| (0..domain.relations.len()).map(move |r| (s, r)))
        .collect();
    pairs.shuffle(&mut fact_rng);
    pairs.truncate(params.n_facts);

    let mut v1_facts: Vec<Fact> = Vec::with_capacity(params.n_facts);
    for (fact_id, &(s, r)) in pairs.iter().enumerate() {
        let object = loop {
            let o = fact_rng.gen_range(0..domain.entities.len());
            if o != s {
                break o;
            }
        };
        v1_facts.push(Fact {
            fact_id: fact_id as u64,
            subject: domain.entities[s].clone(),
            relation: domain.relations[r].clone(),
            object: domain.entities[object].clone(),
            domain_tag: domain.domain_tag.clone(),
        });
    }

    // Which facts get updated objects in versions >= 2.
    let n_updated = (params.update_fraction * params.n_facts as f64).round() as usize;
    let mut order: Vec<usize> = (0..params.n_facts).collect();
    order.shuffle(&mut fact_rng);
    let updated: BTreeSet<usize> = order.into_iter().take(n_updated).collect();

    let mut facts_per_version = vec![v1_facts.clone()];
    for version in 2..=params.n_versions {
        let mut upd_rng = rng::stream(rng::mix(&[params.seed, 0x04, version as u64]));
        let mut facts = v1_facts.clone();
        for &i in &updated {
            let subject = facts[i].subject.clone();
            let old = facts[i].object.clone();
            facts[i].object = loop {
                let o = &domain.entities[upd_rng.gen_range(0..domain.entities.len())];
                if *o != subject && *o != old {
                    break o.clone();
                }
            };
        }
        facts_per_version.push(facts);
    }

    // Document grouping and distractors are drawn once, then reused for every
    // version so unchanged documents stay byte-identical.
    let mut doc_rng = rng::stream(rng::mix(&[params.seed, 0x05]));
    let mut groups: Vec<Vec<u64>> = Vec::new();
    let mut i = 0usize;
    while i < params.n_facts {
        let size = doc_rng.gen_range(1..=3).min(params.n_facts - i);
        groups.push((i..i + size).map(|j| j as u64).collect());
        i += size;
    }
    let distractors: Vec<Vec<String>> = groups
        .iter()
        .map(|_| {
            let n = doc_rng.gen_range(1..=2);
            (0..n)
                .map(|_| {
                    let a = domain.entities[doc_rng.gen_range(0..domain.entities.len())].clone();
                    let b = domain.entities[doc_rng.gen_range(0..domain.entities.len())].clone();
                    format!("{a} is seen near {b} .")
                })
                .collect()
        })
        .collect();

    let corpora = facts_per_version
        .iter()
        .enumerate()
        .map(|(vi, facts)| VersionedCorpus {
            family_id: params.family_id.clone(),
            version: vi as u32 + 1,
            update_fraction: params.update_fraction,
            documents: groups
                .iter()
                .zip(distractors.iter())
                .enumerate()
                .map(|(doc_id, (fact_ids, noise))| {
                    let mut sentences: Vec<String> = fact_ids
                        .iter()
                        .map(|&f| render_fact(&facts[f as usize]))
                        .collect();
                    sentences.extend(noise.iter().cloned());
                    Document {
                        doc_id: doc_id as u64,
                        text: sentences.join(" "),
                        source_fact_ids: fact_ids.clone(),
                        version: vi as u32 + 1,
                    }
                })
                .collect(),
        })
        .collect();

    Ok(CorpusFamily {
        family_id: params.family_id.clone(),
        domain,
        facts: facts_per_version,
        corpora,
    })
}

fn render_fact(fact: &Fact) -> String {
    format!("the {} of {} is {} .", fact.relation, fact.subject, fact.object)
}

/// Question surface forms. Deliberately never the document template, so a
/// string matcher over documents cannot answer questions for free.
fn render_question(rng: &mut ChaCha8Rng, fact: &Fact) -> String {
    if rng.gen_bool(0.5) {
        format!("what is the {} of {} ?", fact.relation, fact.subject)
    } else {
        format!("which {} does {} have ?", fact.relation, fact.subject)
    }
}

/// Split the family's facts into disjoint train/test QA pairs.
pub fn generate_qa(
    family: &CorpusFamily,
    split_seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<Dataset> {
    let n_facts = family.facts[0].len();
    if n_train + n_test > n_facts {
        return Err(Error::invalid(format!(
            "requested {n_train}+{n_test} QA pairs but family has only {n_facts} facts"
        )));
    }
    let mut split_rng = rng::stream(rng::mix(&[split_seed, 0x06]));
    let mut fact_ids: Vec<usize> = (0..n_facts).collect();
    fact_ids.shuffle(&mut split_rng);

    // doc lookup is version-independent by the family invariants
    let mut doc_of_fact: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for doc in &family.corpora[0].documents {
        for &f in &doc.source_fact_ids {
            doc_of_fact.entry(f).or_default().push(doc.doc_id);
        }
    }

    let mut make = |idx: &[usize]| -> Vec<QAPair> {
        idx.iter()
            .map(|&i| {
                let fact = &family.facts[0][i];
                let question = render_question(&mut split_rng, fact);
                let gold_docs = doc_of_fact.get(&(i as u64)).cloned().unwrap_or_default();
                QAPair {
                    question,
                    answers_per_version: family
                        .facts
                        .iter()
                        .enumerate()
                        .map(|(vi, facts)| (vi as u32 + 1, vec![facts[i].object.clone()]))
                        .collect(),
                    gold_fact_id: i as u64,
                    gold_doc_ids_per_version: (1..=family.n_versions())
                        .map(|v| (v, gold_docs.clone()))
                        .collect(),
                }
            })
            .collect()
    };

    let train = make(&fact_ids[..n_train]);
    let test = make(&fact_ids[n_train..n_train + n_test]);
    Ok(Dataset {
        family_id: family.family_id.clone(),
        train,
        test,
    })
}
