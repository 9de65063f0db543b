//! Small synthetic corpora for tests, examples and the acceptance suite.
//!
//! `Disjoint` gives every class its own 30-word vocabulary, so the class
//! subgraphs share no word at all. `Overlapping` uses one shared 30-word
//! vocabulary; each class is a noisy walk along its own random successor
//! permutation, so classes are told apart only by word order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{parse_corpus_tsv, Corpus, LoadOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixtureKind {
    Disjoint,
    Overlapping,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixtureSpec {
    pub kind: FixtureKind,
    pub classes: usize,
    pub sentences_per_class: usize,
    pub words_per_class: usize,
    /// Every fifth sentence of a class goes to the test split.
    pub test_every: usize,
    /// Probability of a random jump instead of following the successor.
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl FixtureSpec {
    pub fn new(kind: FixtureKind, seed: u64) -> Self {
        Self {
            kind,
            classes: 3,
            sentences_per_class: 100,
            words_per_class: 30,
            test_every: 5,
            noise: 0.2,
            min_len: 6,
            max_len: 12,
            seed,
        }
    }
}

const CLASS_NAMES: [&str; 8] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"];

fn word(prefix: &str, k: usize) -> String {
    format!("{prefix}{k:02}")
}

/// Corpus TSV text (`split\tlabel\ttext` per line).
pub fn fixture_tsv(spec: &FixtureSpec) -> String {
    assert!(spec.classes >= 1 && spec.classes <= CLASS_NAMES.len());
    assert!(spec.min_len >= 1 && spec.min_len <= spec.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.words_per_class;
    let successors: Vec<Vec<usize>> = (0..spec.classes)
        .map(|_| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            // successor of perm[i] is perm[i+1]: one cycle through every word
            let mut next = vec![0; n];
            for i in 0..n {
                next[perm[i]] = perm[(i + 1) % n];
            }
            next
        })
        .collect();
    let mut out = String::new();
    for k in 0..spec.sentences_per_class {
        for (c, name) in CLASS_NAMES.iter().take(spec.classes).enumerate() {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let words: Vec<String> = match spec.kind {
                FixtureKind::Disjoint => {
                    let prefix = format!("k{}", (b'a' + c as u8) as char);
                    (0..len).map(|_| word(&prefix, rng.random_range(0..n))).collect()
                }
                FixtureKind::Overlapping => {
                    let mut cur = rng.random_range(0..n);
                    let mut ws = Vec::with_capacity(len);
                    for _ in 0..len {
                        ws.push(word("w", cur));
                        cur = if rng.random_bool(spec.noise) {
                            rng.random_range(0..n)
                        } else {
                            successors[c][cur]
                        };
                    }
                    ws
                }
            };
            let split = if spec.test_every > 0 && k % spec.test_every == spec.test_every - 1 {
                "test"
            } else {
                "train"
            };
            out.push_str(&format!("{split}\t{name}\t{}\n", words.join(" ")));
        }
    }
    out
}

pub fn corpus_from_spec(spec: &FixtureSpec) -> Corpus {
    let docs = parse_corpus_tsv(&fixture_tsv(spec)).expect("fixture parses");
    Corpus::from_documents(&docs, LoadOptions::default())
        .expect("fixture loads")
        .0
}

/// The default 3-class, 300-sentence fixture.
pub fn synthetic_corpus(kind: FixtureKind, seed: u64) -> Corpus {
    corpus_from_spec(&FixtureSpec::new(kind, seed))
}
