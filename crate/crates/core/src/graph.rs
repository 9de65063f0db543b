//! Sliding-window co-occurrence statistics, PMI weights and graph-of-words
//! construction.
//!
//! A [`Dgow`] holds one [`WordGraph`] per class, each built only from that
//! class's training sentences, so the global adjacency is block diagonal. A
//! mixed graph is a single [`WordGraph`] over the whole training corpus.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, WordId};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

pub const DEFAULT_WINDOW: usize = 2;

/// Contiguous windows of size `window`; a sentence shorter than the window is
/// a single window.
pub fn enumerate_windows<T>(tokens: &[T], window: usize) -> Vec<&[T]> {
    assert!(window >= 2, "window size must be at least 2");
    if tokens.is_empty() {
        Vec::new()
    } else if tokens.len() < window {
        vec![tokens]
    } else {
        tokens.windows(window).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CooccurrenceStats {
    window: usize,
    total_windows: u64,
    word_windows: HashMap<WordId, u64>,
    pair_windows: HashMap<(WordId, WordId), u64>,
}

fn ordered(i: WordId, j: WordId) -> (WordId, WordId) {
    if i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

impl CooccurrenceStats {
    pub fn window(&self) -> usize {
        self.window
    }

    /// `#W`
    pub fn total_windows(&self) -> u64 {
        self.total_windows
    }

    /// `#W(i)`: windows containing `i` at least once.
    pub fn word_windows(&self, i: WordId) -> u64 {
        self.word_windows.get(&i).copied().unwrap_or(0)
    }

    /// `#W(i,j)`: windows containing both words.
    pub fn pair_windows(&self, i: WordId, j: WordId) -> u64 {
        self.pair_windows.get(&ordered(i, j)).copied().unwrap_or(0)
    }

    /// Words seen in at least one window, ascending.
    pub fn words(&self) -> Vec<WordId> {
        let mut w: Vec<WordId> = self.word_windows.keys().copied().collect();
        w.sort_unstable();
        w
    }

    /// Co-occurring pairs `(i, j)` with `i < j`, ascending.
    pub fn pairs(&self) -> Vec<(WordId, WordId)> {
        let mut p: Vec<_> = self.pair_windows.keys().copied().collect();
        p.sort_unstable();
        p
    }

    /// `log(p(i,j) / (p(i) p(j)))`, or `None` when the words never co-occur.
    pub fn pmi(&self, i: WordId, j: WordId) -> Option<f64> {
        debug_assert_ne!(i, j);
        let nij = self.pair_windows(i, j);
        if nij == 0 || self.total_windows == 0 {
            return None;
        }
        let (ni, nj) = (self.word_windows(i), self.word_windows(j));
        assert!(ni > 0 && nj > 0, "pair count without marginal count");
        let w = self.total_windows as f64;
        Some(((nij as f64 / w) / ((ni as f64 / w) * (nj as f64 / w))).ln())
    }
}

/// Counts window presence for every word and unordered word pair.
pub fn count_cooccurrence<S: AsRef<[WordId]>>(sentences: &[S], window: usize) -> Result<CooccurrenceStats> {
    if window < 2 {
        return Err(Error::Config(format!("window size {window} < 2")));
    }
    let mut stats = CooccurrenceStats {
        window,
        ..Default::default()
    };
    let mut distinct: Vec<WordId> = Vec::with_capacity(window);
    for s in sentences {
        for win in enumerate_windows(s.as_ref(), window) {
            stats.total_windows += 1;
            distinct.clear();
            distinct.extend_from_slice(win);
            distinct.sort_unstable();
            distinct.dedup();
            for (a, &i) in distinct.iter().enumerate() {
                *stats.word_windows.entry(i).or_insert(0) += 1;
                for &j in &distinct[a + 1..] {
                    *stats.pair_windows.entry((i, j)).or_insert(0) += 1;
                }
            }
        }
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Word co-occurrence graph with positive-PMI edges. Nodes are the words that
/// occur in the source sentences, in ascending word-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct WordGraph {
    window: usize,
    words: Vec<WordId>,
    index: HashMap<WordId, usize>,
    /// Undirected, stored once with `src < dst`, sorted.
    edges: Vec<Edge>,
}

impl WordGraph {
    pub fn from_parts(window: usize, words: Vec<WordId>, mut edges: Vec<Edge>) -> Result<Self> {
        let index: HashMap<WordId, usize> = words.iter().enumerate().map(|(i, &w)| (w, i)).collect();
        if index.len() != words.len() {
            return Err(Error::format("graph", "duplicate word node"));
        }
        for e in &mut edges {
            if e.src == e.dst || e.src >= words.len() || e.dst >= words.len() {
                return Err(Error::format("graph", format!("invalid edge {}-{}", e.src, e.dst)));
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::format("graph", format!("non-positive weight {}", e.weight)));
            }
            if e.src > e.dst {
                std::mem::swap(&mut e.src, &mut e.dst);
            }
        }
        edges.sort_by_key(|e| (e.src, e.dst));
        if edges.windows(2).any(|w| (w[0].src, w[0].dst) == (w[1].src, w[1].dst)) {
            return Err(Error::format("graph", "duplicate edge"));
        }
        Ok(Self {
            window,
            words,
            index,
            edges,
        })
    }

    pub fn empty(window: usize) -> Self {
        Self {
            window,
            words: Vec::new(),
            index: HashMap::new(),
            edges: Vec::new(),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn num_nodes(&self) -> usize {
        self.words.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn words(&self) -> &[WordId] {
        &self.words
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_of(&self, word: WordId) -> Option<usize> {
        self.index.get(&word).copied()
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        let (src, dst) = if a <= b { (a, b) } else { (b, a) };
        self.edges
            .binary_search_by_key(&(src, dst), |e| (e.src, e.dst))
            .map(|k| self.edges[k].weight)
            .unwrap_or(0.0)
    }

    /// Symmetric weighted adjacency without self-loops.
    pub fn adjacency(&self) -> CsrMatrix {
        let n = self.num_nodes();
        let trip: Vec<_> = self
            .edges
            .iter()
            .flat_map(|e| [(e.src, e.dst, e.weight), (e.dst, e.src, e.weight)])
            .collect();
        CsrMatrix::from_triplets(n, n, &trip)
    }
}

/// Graph over the words of `sentences`, with an edge wherever PMI > 0.
pub fn build_subgraph<S: AsRef<[WordId]>>(sentences: &[S], window: usize) -> Result<WordGraph> {
    if sentences.is_empty() {
        log::warn!("building a graph from zero sentences");
        return Ok(WordGraph::empty(window));
    }
    let stats = count_cooccurrence(sentences, window)?;
    let words = stats.words();
    let index: HashMap<WordId, usize> = words.iter().enumerate().map(|(i, &w)| (w, i)).collect();
    let edges = stats
        .pairs()
        .into_iter()
        .filter_map(|(i, j)| {
            let w = stats.pmi(i, j)?;
            (w > 0.0).then(|| Edge {
                src: index[&i],
                dst: index[&j],
                weight: w,
            })
        })
        .collect();
    WordGraph::from_parts(window, words, edges)
}

/// Family of per-class subgraphs laid out block-diagonally.
#[derive(Clone, Debug, PartialEq)]
pub struct Dgow {
    blocks: Vec<WordGraph>,
    offsets: Vec<usize>,
}

impl Dgow {
    pub fn from_blocks(blocks: Vec<WordGraph>) -> Self {
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        offsets.push(0);
        for b in &blocks {
            offsets.push(offsets.last().unwrap() + b.num_nodes());
        }
        Self { blocks, offsets }
    }

    pub fn num_classes(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_edges(&self) -> usize {
        self.blocks.iter().map(WordGraph::num_edges).sum()
    }

    pub fn window(&self) -> usize {
        self.blocks.first().map_or(DEFAULT_WINDOW, WordGraph::window)
    }

    pub fn block(&self, class: usize) -> &WordGraph {
        &self.blocks[class]
    }

    pub fn blocks(&self) -> &[WordGraph] {
        &self.blocks
    }

    /// Global row range of class `class`.
    pub fn block_range(&self, class: usize) -> std::ops::Range<usize> {
        self.offsets[class]..self.offsets[class + 1]
    }

    /// Global row of the node for `word` in class `class`.
    pub fn node_of(&self, class: usize, word: WordId) -> Option<usize> {
        self.blocks[class].node_of(word).map(|l| l + self.offsets[class])
    }

    /// Class owning global row `node`.
    pub fn class_of_node(&self, node: usize) -> usize {
        self.offsets.partition_point(|&o| o <= node) - 1
    }

    /// Block-diagonal adjacency over all classes.
    pub fn adjacency(&self) -> CsrMatrix {
        let n = self.num_nodes();
        let trip: Vec<_> = self
            .blocks
            .iter()
            .zip(&self.offsets)
            .flat_map(|(b, &off)| {
                b.edges()
                    .iter()
                    .flat_map(move |e| [(e.src + off, e.dst + off, e.weight), (e.dst + off, e.src + off, e.weight)])
            })
            .collect();
        CsrMatrix::from_triplets(n, n, &trip)
    }
}

/// Builds one subgraph per class from that class's training sentences.
pub fn build_dgow(corpus: &Corpus, window: usize) -> Result<Dgow> {
    if corpus.num_classes() < 2 {
        return Err(Error::Config(format!(
            "a discriminative graph needs at least 2 classes, corpus has {}",
            corpus.num_classes()
        )));
    }
    let blocks = (0..corpus.num_classes())
        .into_par_iter()
        .map(|p| {
            let sentences = corpus.class_sentences(p);
            if sentences.is_empty() {
                return Err(Error::EmptyClass {
                    class: corpus.classes[p].clone(),
                });
            }
            build_subgraph(&sentences, window)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dgow::from_blocks(blocks))
}

/// Builds a single graph from all training sentences, ignoring labels.
pub fn build_mgow(corpus: &Corpus, window: usize) -> Result<WordGraph> {
    if corpus.train.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let sentences: Vec<&[WordId]> = corpus.train.iter().map(|s| s.tokens.as_slice()).collect();
    build_subgraph(&sentences, window)
}

/// `Â = D^{-1/2} (A + I) D^{-1/2}` with unit self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency(CsrMatrix);

impl NormalizedAdjacency {
    pub fn new(adjacency: &CsrMatrix) -> Self {
        let n = adjacency.rows();
        assert_eq!(n, adjacency.cols());
        let deg: Vec<f64> = adjacency.row_sums().iter().map(|d| d + 1.0).collect();
        let mut trip: Vec<(usize, usize, f64)> = adjacency
            .iter()
            .filter(|&(r, c, _)| r != c)
            .map(|(r, c, v)| {
                debug_assert!(v >= 0.0);
                (r, c, v / (deg[r] * deg[c]).sqrt())
            })
            .collect();
        trip.extend((0..n).map(|i| (i, i, 1.0 / deg[i])));
        Self(CsrMatrix::from_triplets(n, n, &trip))
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CsrMatrix {
        self.0
    }
}

pub fn normalize_adjacency(adjacency: &CsrMatrix) -> NormalizedAdjacency {
    NormalizedAdjacency::new(adjacency)
}
