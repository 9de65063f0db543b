//! Spectral node embeddings and class-pair structural similarity.
//!
//! Node embeddings are the eigenvectors of the symmetric normalized Laplacian
//! `L = I - D^{-1/2} A D^{-1/2}` for the `k` smallest eigenvalues. `L` is
//! block diagonal over connected components, so each component is solved on
//! its own and the eigenpairs are merged. Every eigenvector is therefore
//! supported on a single component, which makes embeddings of nodes in
//! different components exactly orthogonal.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, WordId};
use crate::error::{Error, Result};
use crate::graph::{build_dgow, build_mgow, Dgow, WordGraph};
use crate::sparse::CsrMatrix;

pub const DEFAULT_DIM: usize = 16;
pub const DEFAULT_SAMPLE: usize = 400;

/// Eigenvalues below this are treated as exactly zero when ordering.
const ZERO_EIGENVALUE: f64 = 1e-10;

/// `I - D^{-1/2} A D^{-1/2}`. Isolated nodes get an identity row.
pub fn normalized_laplacian(adjacency: &CsrMatrix) -> CsrMatrix {
    let n = adjacency.rows();
    let deg = adjacency.row_sums();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut trip: Vec<(usize, usize, f64)> = adjacency
        .iter()
        .filter(|&(r, c, v)| r != c && v != 0.0)
        .map(|(r, c, v)| (r, c, -v * inv_sqrt[r] * inv_sqrt[c]))
        .collect();
    for i in 0..n {
        let self_loop = adjacency.get(i, i);
        trip.push((i, i, 1.0 - self_loop * inv_sqrt[i] * inv_sqrt[i]));
    }
    CsrMatrix::from_triplets(n, n, &trip)
}

/// Connected-component label per node, numbered by smallest member.
pub fn connected_components(adjacency: &CsrMatrix) -> (Vec<usize>, usize) {
    let n = adjacency.rows();
    let mut label = vec![usize::MAX; n];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = count;
        stack.push(start);
        while let Some(u) = stack.pop() {
            for &v in adjacency.row(u).0 {
                if label[v] == usize::MAX {
                    label[v] = count;
                    stack.push(v);
                }
            }
        }
        count += 1;
    }
    (label, count)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralOptions {
    pub dim: usize,
    /// Components up to this size use a dense eigendecomposition.
    pub dense_limit: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            dense_limit: 3000,
            tol: 1e-8,
            max_iter: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralEmbedding {
    num_nodes: usize,
    dim: usize,
    eigenvalues: Vec<f64>,
    /// Row-major `num_nodes x dim`.
    vectors: Vec<f64>,
    zero_multiplicity: usize,
}

impl SpectralEmbedding {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Ascending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Column `j` as a dense vector over all nodes.
    pub fn eigenvector(&self, j: usize) -> Vec<f64> {
        (0..self.num_nodes).map(|i| self.vectors[i * self.dim + j]).collect()
    }

    /// Number of connected components containing at least one edge, which is
    /// the multiplicity of the zero eigenvalue.
    pub fn zero_multiplicity(&self) -> usize {
        self.zero_multiplicity
    }
}

struct Eigenpair {
    value: f64,
    component: usize,
    order: usize,
    nodes: std::sync::Arc<Vec<usize>>,
    vector: Vec<f64>,
}

/// Spectral embedding of dimension `min(opts.dim, n)`.
pub fn spectral_embed(adjacency: &CsrMatrix, opts: &SpectralOptions) -> Result<SpectralEmbedding> {
    let n = adjacency.rows();
    let lap = normalized_laplacian(adjacency);
    let (labels, count) = connected_components(adjacency);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    let nontrivial = members.iter().filter(|m| m.len() > 1).count();
    if opts.dim < nontrivial {
        return Err(Error::TooFewDimensions {
            dim: opts.dim,
            components: nontrivial,
        });
    }
    let dim = opts.dim.min(n);

    let per_component: Vec<Vec<Eigenpair>> = members
        .into_par_iter()
        .enumerate()
        .map(|(comp, nodes)| -> Result<Vec<Eigenpair>> {
            let nodes = std::sync::Arc::new(nodes);
            let want = dim.min(nodes.len());
            let sub = lap.submatrix(&nodes, &nodes);
            let pairs = if nodes.len() <= opts.dense_limit {
                dense_smallest(&sub, want)
            } else {
                lanczos_smallest(&sub, want, opts, comp as u64)?
            };
            Ok(pairs
                .into_iter()
                .enumerate()
                .map(|(order, (value, mut vector))| {
                    canonical_sign(&mut vector);
                    Eigenpair {
                        value,
                        component: comp,
                        order,
                        nodes: nodes.clone(),
                        vector,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut all: Vec<Eigenpair> = per_component.into_iter().flatten().collect();
    let key = |v: f64| if v.abs() < ZERO_EIGENVALUE { 0.0 } else { v };
    all.sort_by(|a, b| {
        key(a.value)
            .total_cmp(&key(b.value))
            .then(a.component.cmp(&b.component))
            .then(a.order.cmp(&b.order))
    });
    all.truncate(dim);

    let mut vectors = vec![0.0; n * dim];
    let mut eigenvalues = Vec::with_capacity(dim);
    for (j, pair) in all.iter().enumerate() {
        eigenvalues.push(key(pair.value));
        for (&node, &x) in pair.nodes.iter().zip(&pair.vector) {
            vectors[node * dim + j] = x;
        }
    }
    Ok(SpectralEmbedding {
        num_nodes: n,
        dim,
        eigenvalues,
        vectors,
        zero_multiplicity: nontrivial,
    })
}

/// Flip so the largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best + 1e-12 {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dense_smallest(m: &CsrMatrix, want: usize) -> Vec<(f64, Vec<f64>)> {
    let n = m.rows();
    let mut dense = DMatrix::<f64>::zeros(n, n);
    for (r, c, v) in m.iter() {
        dense[(r, c)] = v;
    }
    let eig = SymmetricEigen::new(dense);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    order
        .into_iter()
        .take(want)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect()))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Smallest eigenpairs of a normalized Laplacian block by Lanczos with full
/// reorthogonalization on `2I - L`, whose largest eigenpairs are the wanted
/// ones (the spectrum of `L` lies in `[0, 2]`).
pub fn lanczos_smallest(
    lap: &CsrMatrix,
    want: usize,
    opts: &SpectralOptions,
    stream: u64,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let n = lap.rows();
    if want == 0 {
        return Ok(Vec::new());
    }
    let apply = |x: &[f64]| -> Vec<f64> {
        let lx = lap.mul_vec(x);
        x.iter().zip(lx).map(|(a, b)| 2.0 * a - b).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(stream);
    let mut random_unit = |basis: &[Vec<f64>]| -> Option<Vec<f64>> {
        for _ in 0..8 {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            for _ in 0..2 {
                for b in basis {
                    let c = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                }
            }
            if normalize(&mut v) > 1e-10 {
                return Some(v);
            }
        }
        None
    };

    let cap = opts.max_iter.min(n);
    let mut basis: Vec<Vec<f64>> = vec![random_unit(&[]).expect("non-empty block")];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    loop {
        let j = basis.len() - 1;
        let mut w = apply(&basis[j]);
        let a = dot(&w, &basis[j]);
        alpha.push(a);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let k = alpha.len();
        let check = k >= want && (k.is_multiple_of(5) || k == cap);
        if check {
            let (vals, vecs) = tridiagonal_eigen(&alpha, &beta);
            let b_next = dot(&w, &w).sqrt();
            let converged = (0..want).all(|i| (b_next * vecs[(k - 1, i)]).abs() <= opts.tol);
            if converged || k == cap {
                let mut out = Vec::with_capacity(want);
                for i in 0..want {
                    let mut v = vec![0.0; n];
                    for (q, bq) in basis.iter().enumerate() {
                        let s = vecs[(q, i)];
                        v.iter_mut().zip(bq).for_each(|(x, y)| *x += s * y);
                    }
                    normalize(&mut v);
                    let lv = lap.mul_vec(&v);
                    let lambda = dot(&v, &lv);
                    let resid = lv
                        .iter()
                        .zip(&v)
                        .map(|(a, b)| (a - lambda * b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if resid > opts.tol * 10.0 {
                        return Err(Error::Eigen(format!(
                            "residual {resid:.3e} for eigenpair {i} after {k} iterations (cap {cap})"
                        )));
                    }
                    let _ = vals[i];
                    out.push((lambda, v));
                }
                out.sort_by(|a, b| a.0.total_cmp(&b.0));
                return Ok(out);
            }
        }
        let b = normalize(&mut w);
        if b < 1e-12 {
            // invariant subspace: restart orthogonal to the current basis
            match random_unit(&basis) {
                Some(v) => {
                    beta.push(0.0);
                    basis.push(v);
                }
                None => return Err(Error::Eigen("Krylov restart failed".into())),
            }
        } else {
            beta.push(b);
            basis.push(w);
        }
    }
}

/// Eigenpairs of the symmetric tridiagonal matrix, sorted by descending
/// eigenvalue (largest of `2I - L` first).
fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let k = alpha.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Maps a (class, word) pair to a graph node.
pub trait NodeLookup: Sync {
    fn lookup(&self, class: usize, word: WordId) -> Option<usize>;
    fn adjacency(&self) -> CsrMatrix;
}

impl NodeLookup for WordGraph {
    fn lookup(&self, _class: usize, word: WordId) -> Option<usize> {
        self.node_of(word)
    }
    fn adjacency(&self) -> CsrMatrix {
        WordGraph::adjacency(self)
    }
}

impl NodeLookup for Dgow {
    fn lookup(&self, class: usize, word: WordId) -> Option<usize> {
        self.node_of(class, word)
    }
    fn adjacency(&self) -> CsrMatrix {
        Dgow::adjacency(self)
    }
}

/// Sum of the node vectors of the sentence's tokens; tokens without a node
/// contribute nothing. The flag is set when no token had a node.
pub fn sentence_embedding(
    tokens: &[WordId],
    class: usize,
    emb: &SpectralEmbedding,
    graph: &impl NodeLookup,
) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; emb.dim()];
    let mut found = false;
    for &t in tokens {
        if let Some(node) = graph.lookup(class, t) {
            found = true;
            out.iter_mut().zip(emb.node(node)).for_each(|(o, x)| *o += x);
        }
    }
    (out, !found)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    (na > 0.0 && nb > 0.0).then(|| dot(a, b) / (na * nb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    /// Mean cosine similarity ×100.
    pub value: f64,
    pub pairs: usize,
    /// Pairs skipped because an embedding had zero norm.
    pub skipped: usize,
}

/// Mean cosine similarity between two embedding sets, ×100. With `same`,
/// `a` and `b` are the same sample and the diagonal pairs are excluded.
pub fn mean_cosine(a: &[Vec<f64>], b: &[Vec<f64>], same: bool) -> PairSimilarity {
    let mut sum = 0.0;
    let mut pairs = 0;
    let mut skipped = 0;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if same && i == j {
                continue;
            }
            match cosine(x, y) {
                Some(c) => {
                    sum += c;
                    pairs += 1;
                }
                None => skipped += 1,
            }
        }
    }
    PairSimilarity {
        value: if pairs > 0 { 100.0 * sum / pairs as f64 } else { 0.0 },
        pairs,
        skipped,
    }
}

/// Seed-deterministic sample of `n` training sentences of class `p`, without
/// replacement. The class must hold more than `n` sentences.
pub fn sample_class(corpus: &Corpus, p: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut members: Vec<usize> = corpus
        .train
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Some(p))
        .map(|(i, _)| i)
        .collect();
    if members.len() <= n {
        return Err(Error::ClassTooSmall {
            class: corpus.classes[p].clone(),
            available: members.len(),
            required: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(p as u64);
    members.shuffle(&mut rng);
    members.truncate(n);
    members.sort_unstable();
    Ok(members)
}

fn class_embeddings(
    corpus: &Corpus,
    p: usize,
    emb: &SpectralEmbedding,
    graph: &impl NodeLookup,
    sample_n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    Ok(sample_class(corpus, p, sample_n, seed)?
        .into_iter()
        .map(|i| sentence_embedding(&corpus.train[i].tokens, p, emb, graph).0)
        .collect())
}

/// `δ(p, q)` over sampled training sentences, ×100.
pub fn class_pair_similarity(
    p: usize,
    q: usize,
    corpus: &Corpus,
    emb: &SpectralEmbedding,
    graph: &impl NodeLookup,
    sample_n: usize,
    seed: u64,
) -> Result<PairSimilarity> {
    if p == q && sample_n < 2 {
        return Err(Error::Config("intra-class similarity needs a sample of at least 2".into()));
    }
    let a = class_embeddings(corpus, p, emb, graph, sample_n, seed)?;
    if p == q {
        return Ok(mean_cosine(&a, &a, true));
    }
    let b = class_embeddings(corpus, q, emb, graph, sample_n, seed)?;
    Ok(mean_cosine(&a, &b, false))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    Mgow,
    Dgow,
}

impl std::str::FromStr for Construction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mgow" => Ok(Self::Mgow),
            "dgow" => Ok(Self::Dgow),
            other => Err(Error::Config(format!("unknown construction {other:?}"))),
        }
    }
}

impl std::fmt::Display for Construction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mgow => "MGoW",
            Self::Dgow => "DGoW",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityOptions {
    pub spectral: SpectralOptions,
    pub sample_n: usize,
    pub seed: u64,
    /// Restrict to the most frequent classes.
    pub top_classes: Option<usize>,
}

impl Default for SimilarityOptions {
    fn default() -> Self {
        Self {
            spectral: SpectralOptions::default(),
            sample_n: DEFAULT_SAMPLE,
            seed: 0,
            top_classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub p: String,
    pub q: String,
    /// One cell per window size, ×100; `None` when the cell failed.
    pub values: Vec<Option<f64>>,
    pub errors: Vec<Option<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub construction: Construction,
    pub windows: Vec<usize>,
    pub dim: usize,
    pub sample_n: usize,
    pub seed: u64,
    pub classes: Vec<String>,
    pub rows: Vec<SimilarityRow>,
}

impl SimilarityTable {
    pub fn get(&self, p: &str, q: &str) -> Option<&SimilarityRow> {
        self.rows
            .iter()
            .find(|r| (r.p == p && r.q == q) || (r.p == q && r.q == p))
    }

    /// One line per class pair, one column per window size.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("construction,labels");
        for w in &self.windows {
            out.push_str(&format!(",omega={w}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{}/{}", self.construction, row.p, row.q));
            for v in &row.values {
                match v {
                    Some(v) => out.push_str(&format!(",{v:.2}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Classes eligible for the analysis: more than `sample_n` training
/// sentences, optionally only the `top` most frequent.
pub fn qualifying_classes(corpus: &Corpus, sample_n: usize, top: Option<usize>) -> Vec<usize> {
    let sizes = corpus.class_sizes();
    let mut eligible: Vec<usize> = (0..corpus.num_classes()).filter(|&p| sizes[p] > sample_n).collect();
    if let Some(top) = top {
        eligible.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
        eligible.truncate(top);
        eligible.sort_unstable();
    }
    eligible
}

fn similarity_cells(
    corpus: &Corpus,
    graph: &impl NodeLookup,
    classes: &[usize],
    opts: &SimilarityOptions,
) -> Result<BTreeMap<(usize, usize), Result<f64>>> {
    let emb = spectral_embed(&graph.adjacency(), &opts.spectral)?;
    let pairs: Vec<(usize, usize)> = classes
        .iter()
        .enumerate()
        .flat_map(|(a, &p)| classes[a..].iter().map(move |&q| (p, q)))
        .collect();
    Ok(pairs
        .into_par_iter()
        .map(|(p, q)| {
            let v = class_pair_similarity(p, q, corpus, &emb, graph, opts.sample_n, opts.seed).map(|s| s.value);
            ((p, q), v)
        })
        .collect())
}

/// δ for every qualifying class pair and window size.
pub fn similarity_report(
    corpus: &Corpus,
    construction: Construction,
    windows: &[usize],
    opts: &SimilarityOptions,
) -> Result<SimilarityTable> {
    let classes = qualifying_classes(corpus, opts.sample_n, opts.top_classes);
    let mut cells = Vec::new();
    for &w in windows {
        cells.push(match construction {
            Construction::Dgow => similarity_cells(corpus, &build_dgow(corpus, w)?, &classes, opts)?,
            Construction::Mgow => similarity_cells(corpus, &build_mgow(corpus, w)?, &classes, opts)?,
        });
    }
    Ok(assemble(corpus, construction, windows, &classes, cells, opts))
}

/// Same as [`similarity_report`] for one graph that is already built, e.g.
/// read back from a graph file. Word ids must be those of `corpus`.
pub fn similarity_report_for(
    corpus: &Corpus,
    graph: &impl NodeLookup,
    construction: Construction,
    window: usize,
    opts: &SimilarityOptions,
) -> Result<SimilarityTable> {
    let classes = qualifying_classes(corpus, opts.sample_n, opts.top_classes);
    let cells = similarity_cells(corpus, graph, &classes, opts)?;
    Ok(assemble(corpus, construction, &[window], &classes, vec![cells], opts))
}

fn assemble(
    corpus: &Corpus,
    construction: Construction,
    windows: &[usize],
    classes: &[usize],
    mut cells: Vec<BTreeMap<(usize, usize), Result<f64>>>,
    opts: &SimilarityOptions,
) -> SimilarityTable {
    let mut rows = Vec::new();
    for (a, &p) in classes.iter().enumerate() {
        for &q in &classes[a..] {
            let mut values = Vec::new();
            let mut errors = Vec::new();
            for per_window in &mut cells {
                match per_window.remove(&(p, q)).expect("cell computed") {
                    Ok(v) => {
                        values.push(Some(v));
                        errors.push(None);
                    }
                    Err(e) => {
                        values.push(None);
                        errors.push(Some(e.to_string()));
                    }
                }
            }
            rows.push(SimilarityRow {
                p: corpus.classes[p].clone(),
                q: corpus.classes[q].clone(),
                values,
                errors,
            });
        }
    }
    // intra-class rows first, then cross-class, as in the usual table layout
    rows.sort_by_key(|r| r.p != r.q);
    SimilarityTable {
        construction,
        windows: windows.to_vec(),
        dim: opts.spectral.dim,
        sample_n: opts.sample_n,
        seed: opts.seed,
        classes: classes.iter().map(|&p| corpus.classes[p].clone()).collect(),
        rows,
    }
}
