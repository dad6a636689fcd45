//! The counting and PMI pipeline against a brute-force reimplementation that
//! works on raw word strings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use conceptcap::corpus::{
    build_lexicon, count_cooccurrence, is_stop_word, lexicon_from_captions, pmi, tokenize,
    ConceptVocabulary, Vocabulary,
};
use conceptcap::harness::{generate_dataset, SyntheticSpec};
use proptest::prelude::*;

struct Oracle {
    unigram: HashMap<String, u64>,
    pair: HashMap<(String, String), u64>,
    tokens: u64,
    pairs: u64,
}

impl Oracle {
    fn new(captions: &[String], window: usize) -> Self {
        let mut o = Oracle {
            unigram: HashMap::new(),
            pair: HashMap::new(),
            tokens: 0,
            pairs: 0,
        };
        for c in captions {
            let words: Vec<String> = c
                .to_lowercase()
                .split_whitespace()
                .map(|w| w.chars().filter(|ch| ch.is_alphanumeric()).collect::<String>())
                .filter(|w| !w.is_empty())
                .collect();
            for i in 0..words.len() {
                *o.unigram.entry(words[i].clone()).or_default() += 1;
                o.tokens += 1;
                for j in i + 1..words.len() {
                    if j - i <= window {
                        *o.pair.entry((words[i].clone(), words[j].clone())).or_default() += 1;
                        o.pairs += 1;
                    }
                }
            }
        }
        o
    }

    fn score(&self, a: &str, b: &str) -> f64 {
        let joint = self.pair[&(a.to_string(), b.to_string())] as f64 / self.pairs as f64;
        let pa = self.unigram[a] as f64 / self.tokens as f64;
        let pb = self.unigram[b] as f64 / self.tokens as f64;
        joint.ln() - pa.ln() - pb.ln()
    }
}

fn synthetic_captions(n: usize, seed: u64) -> Vec<String> {
    generate_dataset(&SyntheticSpec {
        n_samples: n,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .captions()
}

#[test]
fn thousand_caption_corpus_matches_brute_force() {
    let start = Instant::now();
    let captions = synthetic_captions(1000, 11);
    let window = 3;
    let threshold = 0.5;
    let oracle = Oracle::new(&captions, window);

    let tokens: Vec<Vec<String>> = captions.iter().map(|c| tokenize(c)).collect();
    let vocab = Vocabulary::build(&tokens, 1);
    let ids: Vec<Vec<usize>> = tokens.iter().map(|t| vocab.encode(t)).collect();
    let table = count_cooccurrence(&ids, window).unwrap();

    assert_eq!(table.total_tokens, oracle.tokens);
    assert_eq!(table.total_pairs, oracle.pairs);
    assert_eq!(table.unigram.len(), oracle.unigram.len());
    for (w, &c) in &oracle.unigram {
        assert_eq!(table.unigram(vocab.id(w)), c, "unigram {w}");
    }
    assert_eq!(table.pair.len(), oracle.pair.len());
    for ((a, b), &c) in &oracle.pair {
        let (ia, ib) = (vocab.id(a), vocab.id(b));
        assert_eq!(table.pair(ia, ib), c, "pair {a} {b}");
        let got = pmi(&table, ia, ib).unwrap();
        assert!((got - oracle.score(a, b)).abs() < 1e-12, "pmi {a} {b}");
    }

    let lexicon = build_lexicon(&table, threshold).unwrap();
    let expected: BTreeSet<(String, String)> = oracle
        .pair
        .keys()
        .filter(|(a, b)| oracle.score(a, b) >= threshold)
        .cloned()
        .collect();
    let got: BTreeSet<(String, String)> = lexicon
        .iter()
        .map(|((a, b), _)| (vocab.word(a).to_string(), vocab.word(b).to_string()))
        .collect();
    assert_eq!(got, expected);
    for ((a, b), s) in lexicon.iter() {
        assert!((s - oracle.score(vocab.word(a), vocab.word(b))).abs() < 1e-12);
    }
    assert!(start.elapsed().as_secs_f64() < 10.0, "took {:?}", start.elapsed());
}

#[test]
fn concept_vocabulary_matches_frequency_count() {
    let captions = synthetic_captions(1000, 5);
    let tokens: Vec<Vec<String>> = captions.iter().map(|c| tokenize(c)).collect();
    let vocab = Vocabulary::build(&tokens, 1);
    let cv = ConceptVocabulary::build(&tokens, &vocab, 5).unwrap();
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for w in tokens.iter().flatten() {
        *freq.entry(w).or_default() += 1;
    }
    let expected: BTreeSet<&str> = freq
        .iter()
        .filter(|(w, &c)| c >= 5 && !is_stop_word(w))
        .map(|(w, _)| *w)
        .collect();
    let got: BTreeSet<&str> = cv.ids().iter().map(|&i| vocab.word(i)).collect();
    assert_eq!(got, expected);
}

#[test]
fn synthetic_lexicon_recovers_template_pairs() {
    let data = generate_dataset(&SyntheticSpec {
        n_samples: 1000,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (vocab, _, lexicon) = lexicon_from_captions(&data.captions(), 3, 0.5, 1).unwrap();
    let pairs = data.grammar.adjacent_pairs(3);
    let found = pairs
        .iter()
        .filter(|(a, b)| lexicon.contains(vocab.id(a), vocab.id(b)))
        .count();
    let rate = found as f64 / pairs.len() as f64;
    assert!(rate >= 0.9, "recovered {found} of {} template pairs", pairs.len());
}

fn sentences() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(4usize..12, 0..9), 1..12)
}

proptest! {
    #[test]
    fn reversing_sentences_swaps_pair_counts(corpus in sentences(), window in 1usize..5) {
        let fwd = count_cooccurrence(&corpus, window).unwrap();
        let rev: Vec<Vec<usize>> = corpus.iter().map(|s| s.iter().rev().copied().collect()).collect();
        let bwd = count_cooccurrence(&rev, window).unwrap();
        for (&(a, b), &c) in &fwd.pair {
            prop_assert_eq!(bwd.pair(b, a), c);
        }
        prop_assert_eq!(fwd.pair.len(), bwd.pair.len());
        prop_assert_eq!(fwd.unigram.values().sum::<u64>(), fwd.total_tokens);
    }

    #[test]
    fn raising_the_threshold_only_removes_pairs(corpus in sentences(), t1 in -2.0f64..2.0, dt in 0.0f64..2.0) {
        let table = count_cooccurrence(&corpus, 3).unwrap();
        let low = build_lexicon(&table, t1).unwrap();
        let high = build_lexicon(&table, t1 + dt).unwrap();
        for ((a, b), s) in high.iter() {
            prop_assert_eq!(low.get(a, b), Some(s));
        }
        for (_, s) in low.iter() {
            prop_assert!(s >= t1);
        }
    }

    #[test]
    fn symmetric_counts_give_symmetric_scores(corpus in sentences()) {
        let table = count_cooccurrence(&corpus, 2).unwrap();
        for (&(a, b), &c) in &table.pair {
            if table.pair(b, a) == c {
                let d = pmi(&table, a, b).unwrap() - pmi(&table, b, a).unwrap();
                prop_assert!(d.abs() < 1e-12);
            }
        }
    }
}
