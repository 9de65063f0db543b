//! Corpus loading, preprocessing and vocabulary construction.
//!
//! Documents come from a tab-separated file with one document per line:
//!
//! ```text
//! <split>\t<label>\t<text>
//! ```
//!
//! where `split` is `train` or `test`. Text is lowercased, stripped of
//! non-alphanumeric characters and split on whitespace. The vocabulary is
//! built from the training split only.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type WordId = u32;

pub const DEFAULT_MIN_COUNT: usize = 2;

static STOPWORDS_SOURCE: &str = include_str!("../data/stopwords_en.txt");

fn stopwords() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_SOURCE
            .lines()
            .map(normalize_chars)
            .filter(|w| !w.is_empty())
            .collect()
    })
}

/// Preprocessing switches that differ between datasets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetProfile {
    /// Sentiment corpora (MR) keep stopwords.
    pub keep_stopwords: bool,
}

impl DatasetProfile {
    pub const DEFAULT: DatasetProfile = DatasetProfile {
        keep_stopwords: false,
    };
    pub const SENTIMENT: DatasetProfile = DatasetProfile {
        keep_stopwords: true,
    };

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "default" | "r8" | "r52" | "oh" | "ohsumed" | "20ng" | "bbc" | "imdb" => {
                Some(Self::DEFAULT)
            }
            "mr" | "sentiment" => Some(Self::SENTIMENT),
            _ => None,
        }
    }
}

/// Periods and apostrophes join their neighbours ("U.S." -> "us",
/// "don't" -> "dont"); every other non-alphanumeric character separates words.
fn is_joiner(c: char) -> bool {
    matches!(c, '.' | '\'' | '`' | '\u{2019}')
}

fn normalize_chars(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            out.push(c);
        } else if !is_joiner(c) {
            out.push(' ');
        }
    }
    out
}

/// Lowercases, removes non-alphanumeric characters, splits on whitespace and
/// drops stopwords unless the profile keeps them.
pub fn tokenize(raw_text: &str, profile: DatasetProfile) -> Vec<String> {
    let stop = stopwords();
    normalize_chars(raw_text)
        .split_whitespace()
        .filter(|w| profile.keep_stopwords || !stop.contains(*w))
        .map(str::to_owned)
        .collect()
}

/// Bijection between retained words and dense indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabIndex {
    words: Vec<String>,
    index: HashMap<String, WordId>,
    frequency: Vec<usize>,
    min_count: usize,
    profile: DatasetProfile,
}

impl VocabIndex {
    /// Retains words whose training frequency is at least `min_count`,
    /// numbered in order of first occurrence.
    pub fn build<S: AsRef<str>>(
        train: &[Vec<S>],
        min_count: usize,
        profile: DatasetProfile,
    ) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut order: Vec<&str> = Vec::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in train {
            for tok in doc {
                let tok = tok.as_ref();
                let c = counts.entry(tok).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        let mut words = Vec::new();
        let mut frequency = Vec::new();
        for w in order {
            let c = counts[w];
            if c >= min_count {
                words.push(w.to_owned());
                frequency.push(c);
            }
        }
        if words.is_empty() {
            return Err(Error::EmptyVocabulary { min_count });
        }
        Ok(Self::from_parts(words, frequency, min_count, profile))
    }

    pub(crate) fn from_parts(
        words: Vec<String>,
        frequency: Vec<usize>,
        min_count: usize,
        profile: DatasetProfile,
    ) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as WordId))
            .collect();
        Self {
            words,
            index,
            frequency,
            min_count,
            profile,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<WordId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn frequency(&self, id: WordId) -> usize {
        self.frequency[id as usize]
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn profile(&self) -> DatasetProfile {
        self.profile
    }

    /// Tokenizes `raw_text` and keeps in-vocabulary tokens.
    pub fn encode(&self, raw_text: &str) -> Vec<WordId> {
        self.encode_tokens(&tokenize(raw_text, self.profile))
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<WordId> {
        tokens.iter().filter_map(|t| self.get(t.as_ref())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    /// 1-based line number in the source file.
    pub raw_id: usize,
    pub tokens: Vec<WordId>,
    pub label: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One parsed line of the corpus file, before preprocessing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDocument {
    pub line: usize,
    pub split: Split,
    pub label: String,
    pub text: String,
}

/// Parses the corpus TSV. Blank lines are skipped.
pub fn parse_corpus_tsv(input: &str) -> Result<Vec<RawDocument>> {
    let mut docs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let (Some(split), Some(label), Some(text)) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Parse {
                line: line_no,
                message: "expected <split>\\t<label>\\t<text>".into(),
            });
        };
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::UnknownSplit {
                    line: line_no,
                    tag: other.to_owned(),
                })
            }
        };
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty label".into(),
            });
        }
        docs.push(RawDocument {
            line: line_no,
            split,
            label: label.to_owned(),
            text: text.to_owned(),
        });
    }
    Ok(docs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub profile: DatasetProfile,
    pub min_count: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            profile: DatasetProfile::DEFAULT,
            min_count: DEFAULT_MIN_COUNT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedDocument {
    pub raw_id: usize,
    pub split: Split,
    pub label: String,
}

/// Summary of a corpus load, emitted as JSON by the CLI.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub classes: Vec<String>,
    pub vocabulary_size: usize,
    /// split name -> class name -> sentence count
    pub per_class: BTreeMap<String, BTreeMap<String, usize>>,
    /// Training documents removed because no token survived filtering.
    pub dropped: Vec<DroppedDocument>,
    /// Test documents with no in-vocabulary token; kept and scored as errors.
    pub empty_test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sentence>,
    pub validation: Vec<Sentence>,
    pub test: Vec<Sentence>,
    pub classes: Vec<String>,
    pub vocabulary: VocabIndex,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Training sentence counts per class.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.classes.len()];
        for s in &self.train {
            if let Some(l) = s.label {
                sizes[l] += 1;
            }
        }
        sizes
    }

    /// Training token sequences of class `p`.
    pub fn class_sentences(&self, p: usize) -> Vec<&[WordId]> {
        self.train
            .iter()
            .filter(|s| s.label == Some(p))
            .map(|s| s.tokens.as_slice())
            .collect()
    }

    /// Builds a corpus from parsed documents. Classes are the sorted set of
    /// training labels; a test label outside that set is an error.
    pub fn from_documents(docs: &[RawDocument], options: LoadOptions) -> Result<(Self, LoadReport)> {
        let tokenized: Vec<Vec<String>> = docs
            .iter()
            .map(|d| tokenize(&d.text, options.profile))
            .collect();
        let train_tokens: Vec<Vec<String>> = docs
            .iter()
            .zip(&tokenized)
            .filter(|(d, _)| d.split == Split::Train)
            .map(|(_, t)| t.clone())
            .collect();
        let vocabulary = VocabIndex::build(&train_tokens, options.min_count, options.profile)?;

        let mut classes: Vec<String> = docs
            .iter()
            .filter(|d| d.split == Split::Train)
            .map(|d| d.label.clone())
            .collect();
        classes.sort();
        classes.dedup();
        let class_of: HashMap<&str, usize> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();

        let mut report = LoadReport {
            classes: classes.clone(),
            vocabulary_size: vocabulary.len(),
            ..LoadReport::default()
        };
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (doc, toks) in docs.iter().zip(&tokenized) {
            let Some(&label) = class_of.get(doc.label.as_str()) else {
                return Err(Error::Parse {
                    line: doc.line,
                    message: format!("label {:?} does not occur in the training split", doc.label),
                });
            };
            let sentence = Sentence {
                raw_id: doc.line,
                tokens: vocabulary.encode_tokens(toks),
                label: Some(label),
            };
            match doc.split {
                Split::Train if sentence.tokens.is_empty() => {
                    report.dropped.push(DroppedDocument {
                        raw_id: doc.line,
                        split: Split::Train,
                        label: doc.label.clone(),
                    });
                }
                Split::Train => train.push(sentence),
                Split::Test => {
                    if sentence.tokens.is_empty() {
                        report.empty_test.push(doc.line);
                    }
                    test.push(sentence);
                }
            }
        }
        let corpus = Corpus {
            train,
            validation: Vec::new(),
            test,
            classes,
            vocabulary,
        };
        corpus.fill_counts(&mut report);
        Ok((corpus, report))
    }

    pub(crate) fn fill_counts(&self, report: &mut LoadReport) {
        report.train = self.train.len();
        report.validation = self.validation.len();
        report.test = self.test.len();
        report.per_class.clear();
        for (name, split) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            let entry = report.per_class.entry(name.to_owned()).or_default();
            for s in split.iter() {
                if let Some(l) = s.label {
                    *entry.entry(self.classes[l].clone()).or_insert(0) += 1;
                }
            }
        }
    }

    /// Moves a seed-deterministic random `⌊fraction·N⌋` of the training
    /// sentences into the validation split.
    pub fn split_validation(mut self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Split(format!("fraction {fraction} not in (0, 1)")));
        }
        let n = self.train.len();
        let n_val = (fraction * n as f64).floor() as usize;
        if n_val == 0 || n_val == n {
            return Err(Error::Split(format!(
                "fraction {fraction} of {n} training sentences leaves an empty split"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut held = vec![false; n];
        for &i in &order[..n_val] {
            held[i] = true;
        }
        let mut train = Vec::with_capacity(n - n_val);
        let mut validation = std::mem::take(&mut self.validation);
        for (s, h) in std::mem::take(&mut self.train).into_iter().zip(held) {
            if h {
                validation.push(s);
            } else {
                train.push(s);
            }
        }
        self.train = train;
        self.validation = validation;
        Ok(self)
    }
}

/// Reads and preprocesses a corpus file.
pub fn load_corpus(path: &Path, options: LoadOptions) -> Result<(Corpus, LoadReport)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let docs = parse_corpus_tsv(&text)?;
    Corpus::from_documents(&docs, options)
}
