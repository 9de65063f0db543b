//! The walk-classification network: class-conditioned GCN word embeddings,
//! a bidirectional LSTM over the sentence and an aggregator head producing
//! one probability per class.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::WordId;
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Dgow};
use crate::nn::{BiLstm, Bound, GcnStack, Matrix, MlpHead, ParameterStore, Tape, Var};
use crate::sparse::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    /// Mean over positions, then the MLP head.
    Avg,
    /// First and last position concatenated, then the MLP head.
    Mlp,
    /// Product of `σ(h_i·h_j)` over within-window pairs. No parameters.
    Prod,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Avg, Aggregator::Mlp, Aggregator::Prod];
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Avg => "avg",
            Aggregator::Mlp => "mlp",
            Aggregator::Prod => "prod",
        })
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avg" => Ok(Aggregator::Avg),
            "mlp" => Ok(Aggregator::Mlp),
            "prod" => Ok(Aggregator::Prod),
            _ => Err(Error::Config(format!("unknown aggregator {s:?} (avg, mlp, prod)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub lstm_hidden: usize,
    pub aggregator: Aggregator,
    pub mlp_hidden: usize,
    /// Pair window for [`Aggregator::Prod`]; the graph's window when unset.
    pub prod_window: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gcn_layers: 3,
            gcn_hidden: 128,
            lstm_hidden: 128,
            aggregator: Aggregator::Avg,
            mlp_hidden: 128,
            prod_window: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gcn_layers", self.gcn_layers),
            ("gcn_hidden", self.gcn_hidden),
            ("lstm_hidden", self.lstm_hidden),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if let Some(w) = self.prod_window {
            if w < 2 {
                return Err(Error::Config("prod_window must be at least 2".into()));
            }
        }
        Ok(())
    }
}

/// Within-window index pairs `i < j`, `j - i < window`, in lexicographic order.
pub fn window_pairs(len: usize, window: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..len {
        for j in i + 1..len.min(i + window) {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Output of the head on the tape: a logit for the MLP-based heads, a log
/// probability for the product head.
#[derive(Clone, Copy, Debug)]
pub enum ScoreVar {
    Logit(Var),
    LogProb(Var),
}

impl ScoreVar {
    pub fn probability(self, tape: &Tape) -> f64 {
        match self {
            ScoreVar::Logit(v) => {
                let x = tape.value(v).item();
                1.0 / (1.0 + (-x).exp())
            }
            ScoreVar::LogProb(v) => tape.value(v).item().exp(),
        }
    }

    pub fn bce(self, tape: &mut Tape, target: f64) -> Var {
        match self {
            ScoreVar::Logit(v) => tape.bce_with_logit(v, target),
            ScoreVar::LogProb(v) => tape.bce_with_log_prob(v, target),
        }
    }
}

/// GCN output for every node of the graph under one parameter snapshot.
#[derive(Clone, Debug)]
pub struct NodeEmbeddings(Arc<Matrix>);

impl NodeEmbeddings {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub scores: Vec<f64>,
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct DgowGnn {
    config: ModelConfig,
    dgow: Dgow,
    adj: Arc<CsrMatrix>,
    store: ParameterStore,
    gcn: GcnStack,
    lstm: BiLstm,
    head: Option<MlpHead>,
}

impl DgowGnn {
    pub fn new(dgow: Dgow, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let n = dgow.num_nodes();
        let gcn = GcnStack::init(&mut store, &mut rng, n, config.gcn_hidden, config.gcn_layers);
        let lstm = BiLstm::init(&mut store, &mut rng, config.gcn_hidden, config.lstm_hidden);
        let head = match config.aggregator {
            Aggregator::Avg => Some(MlpHead::init(&mut store, &mut rng, 2 * config.lstm_hidden, config.mlp_hidden)),
            Aggregator::Mlp => Some(MlpHead::init(&mut store, &mut rng, 4 * config.lstm_hidden, config.mlp_hidden)),
            Aggregator::Prod => None,
        };
        let adj = Arc::new(normalize_adjacency(&dgow.adjacency()).into_matrix());
        Ok(Self {
            config,
            dgow,
            adj,
            store,
            gcn,
            lstm,
            head,
        })
    }

    /// Reassembles a model from stored parameters, checking every shape.
    pub fn from_parts(dgow: Dgow, config: ModelConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(dgow.clone(), config.clone(), 0)?;
        if store.len() != reference.store.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors, model needs {}", store.len(), reference.store.len()),
            ));
        }
        for p in reference.store.params() {
            match store.get(&p.name) {
                Some(v) if v.shape() == p.value().shape() => {}
                Some(v) => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("{} has shape {:?}, expected {:?}", p.name, v.shape(), p.value().shape()),
                    ))
                }
                None => return Err(Error::format("checkpoint", format!("missing parameter {}", p.name))),
            }
        }
        let gcn = GcnStack::from_store(&store, dgow.num_nodes(), config.gcn_layers)?;
        let lstm = BiLstm::from_store(&store)?;
        let head = match config.aggregator {
            Aggregator::Prod => None,
            _ => Some(MlpHead::from_store(&store)?),
        };
        Ok(Self {
            adj: reference.adj,
            config,
            dgow,
            store,
            gcn,
            lstm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dgow(&self) -> &Dgow {
        &self.dgow
    }

    pub fn num_classes(&self) -> usize {
        self.dgow.num_classes()
    }

    pub fn adjacency(&self) -> &Arc<CsrMatrix> {
        &self.adj
    }

    pub fn params(&self) -> &ParameterStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn prod_window(&self) -> usize {
        self.config.prod_window.unwrap_or(self.dgow.window())
    }

    /// One full GCN pass over the block-diagonal graph.
    pub fn node_embeddings(&self) -> Result<NodeEmbeddings> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let h = self.gcn.forward_full(&mut tape, &bound, &self.adj)?;
        Ok(NodeEmbeddings(Arc::new(tape.value(h).clone())))
    }

    fn node_rows(&self, tokens: &[WordId], class: usize) -> Result<Vec<Option<usize>>> {
        if class >= self.num_classes() {
            return Err(Error::Config(format!("class {class} out of range")));
        }
        Ok(tokens.iter().map(|&w| self.dgow.node_of(class, w)).collect())
    }

    /// Per-token GCN vectors of block `class` in sentence order; tokens with no
    /// node in the block get the zero vector. The flag is set when every token
    /// was missing.
    pub fn embed_words(&self, emb: &NodeEmbeddings, tokens: &[WordId], class: usize) -> Result<(Matrix, bool)> {
        let rows = self.node_rows(tokens, class)?;
        let all_missing = rows.iter().all(Option::is_none);
        let m = emb.matrix();
        let out = Matrix::from_fn(rows.len(), m.cols(), |r, c| rows[r].map_or(0.0, |n| m.get(n, c)));
        Ok((out, all_missing))
    }

    /// Bi-LSTM and head on an embedded sequence (`L x gcn_hidden`).
    pub fn head_forward(&self, tape: &mut Tape, bound: &Bound, seq: Var) -> Result<ScoreVar> {
        let ctx = self.lstm.forward(tape, bound, seq)?;
        let len = tape.shape(ctx).0;
        Ok(match self.config.aggregator {
            Aggregator::Avg => {
                let mean = tape.mean_rows(ctx);
                ScoreVar::Logit(self.head.as_ref().expect("avg head").forward(tape, bound, mean))
            }
            Aggregator::Mlp => {
                let first = tape.row(ctx, 0);
                let last = tape.row(ctx, len - 1);
                let both = tape.concat_cols(vec![first, last]);
                ScoreVar::Logit(self.head.as_ref().expect("mlp head").forward(tape, bound, both))
            }
            Aggregator::Prod => {
                let dots = tape.row_dots(ctx, window_pairs(len, self.prod_window()));
                ScoreVar::LogProb(tape.log_sigmoid_sum(dots))
            }
        })
    }

    /// `ẑ` for one sentence and class under a frozen snapshot.
    pub fn score_sentence(&self, emb: &NodeEmbeddings, tokens: &[WordId], class: usize) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("score_sentence"));
        }
        let rows = self.node_rows(tokens, class)?;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let h = tape.leaf_shared(emb.0.clone());
        let seq = tape.gather_rows(h, rows);
        Ok(self.head_forward(&mut tape, &bound, seq)?.probability(&tape))
    }

    pub fn scores(&self, emb: &NodeEmbeddings, tokens: &[WordId]) -> Result<Vec<f64>> {
        (0..self.num_classes()).map(|p| self.score_sentence(emb, tokens, p)).collect()
    }

    pub fn predict(&self, emb: &NodeEmbeddings, tokens: &[WordId]) -> Result<Prediction> {
        if tokens.is_empty() {
            return Err(Error::Unclassifiable);
        }
        let scores = self.scores(emb, tokens)?;
        let class = argmax(&scores).ok_or(Error::Unclassifiable)?;
        Ok(Prediction { class, scores })
    }

    /// Builds the scores of `tokens` for each class in `classes` on `tape`,
    /// running the GCN only on the nodes they need.
    pub fn score_on_tape(&self, tape: &mut Tape, bound: &Bound, tokens: &[WordId], classes: &[usize]) -> Result<Vec<ScoreVar>> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("score_on_tape"));
        }
        let per_class = classes
            .iter()
            .map(|&p| self.node_rows(tokens, p))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<usize> = per_class.iter().flatten().flatten().copied().collect();
        if targets.is_empty() {
            // nothing to look up: every position is the zero vector
            let width = self.gcn.hidden();
            return classes
                .iter()
                .map(|_| {
                    let seq = tape.leaf(Matrix::zeros(tokens.len(), width));
                    self.head_forward(tape, bound, seq)
                })
                .collect();
        }
        let (h, out_rows) = self.gcn.forward_rows(tape, bound, &self.adj, &targets);
        per_class
            .into_iter()
            .map(|rows| {
                let local = rows
                    .into_iter()
                    .map(|r| r.map(|n| out_rows.binary_search(&n).expect("target row computed")))
                    .collect();
                let seq = tape.gather_rows(h, local);
                self.head_forward(tape, bound, seq)
            })
            .collect()
    }

    /// BCE of `tokens` against target 1 for `positive` and 0 for `negative`,
    /// with gradients for every parameter in store order.
    pub fn pair_loss(&self, tokens: &[WordId], positive: usize, negative: Option<usize>) -> Result<(f64, Vec<Option<Matrix>>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let mut classes = vec![positive];
        classes.extend(negative);
        let scores = self.score_on_tape(&mut tape, &bound, tokens, &classes)?;
        let mut loss = scores[0].bce(&mut tape, 1.0);
        if let Some(&neg) = scores.get(1) {
            let l = neg.bce(&mut tape, 0.0);
            loss = tape.add(loss, l);
        }
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss);
        Ok((value, self.store.collect(&bound, &mut grads)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{corpus_from_spec, FixtureKind, FixtureSpec};
    use crate::graph::build_dgow;
    use crate::nn::finite_difference_check;

    fn small_model(aggregator: Aggregator, seed: u64) -> (DgowGnn, crate::corpus::Corpus) {
        let spec = FixtureSpec {
            classes: 2,
            sentences_per_class: 12,
            words_per_class: 5,
            ..FixtureSpec::new(FixtureKind::Disjoint, seed)
        };
        let corpus = corpus_from_spec(&spec);
        let dgow = build_dgow(&corpus, 2).unwrap();
        let cfg = ModelConfig {
            gcn_layers: 2,
            gcn_hidden: 4,
            lstm_hidden: 3,
            mlp_hidden: 5,
            aggregator,
            prod_window: None,
        };
        (DgowGnn::new(dgow, cfg, seed).unwrap(), corpus)
    }

    #[test]
    fn window_pairs_match_enumeration() {
        assert_eq!(window_pairs(4, 2), vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(window_pairs(1, 2), vec![]);
        assert_eq!(window_pairs(3, 5), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.9]), Some(1));
        assert_eq!(argmax(&[0.5, 0.5]), Some(0));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn aggregator_names_round_trip() {
        for a in Aggregator::ALL {
            assert_eq!(a.to_string().parse::<Aggregator>().unwrap(), a);
        }
        assert!("max".parse::<Aggregator>().is_err());
    }

    #[test]
    fn scores_are_probabilities() {
        for a in Aggregator::ALL {
            let (m, c) = small_model(a, 1);
            let emb = m.node_embeddings().unwrap();
            for s in c.train.iter().chain(&c.test) {
                for p in m.scores(&emb, &s.tokens).unwrap() {
                    assert!(p > 0.0 && p <= 1.0, "{a}: {p}");
                }
            }
        }
    }

    #[test]
    fn receptive_field_scores_match_full_pass() {
        for a in Aggregator::ALL {
            let (m, c) = small_model(a, 2);
            let emb = m.node_embeddings().unwrap();
            for s in &c.train {
                let mut tape = Tape::new();
                let bound = m.params().bind(&mut tape);
                let vars = m.score_on_tape(&mut tape, &bound, &s.tokens, &[0, 1]).unwrap();
                for (p, v) in vars.into_iter().enumerate() {
                    let full = m.score_sentence(&emb, &s.tokens, p).unwrap();
                    assert!((v.probability(&tape) - full).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_block_word_is_zero_vector() {
        let (m, c) = small_model(Aggregator::Avg, 3);
        let emb = m.node_embeddings().unwrap();
        let own = c.class_sentences(0)[0].to_vec();
        let foreign = c.class_sentences(1)[0][0];
        let mut mixed = own.clone();
        mixed.insert(1, foreign);
        let (a, missing) = m.embed_words(&emb, &own, 0).unwrap();
        assert!(!missing);
        assert!((0..a.rows()).all(|r| a.row(r).iter().any(|&x| x != 0.0)));
        let (b, _) = m.embed_words(&emb, &mixed, 0).unwrap();
        assert!(b.row(1).iter().all(|&x| x == 0.0));
        assert_eq!(b.row(0), a.row(0));
        assert_eq!(b.row(2), a.row(1));
        let (_, all_missing) = m.embed_words(&emb, &own, 1).unwrap();
        assert!(all_missing);
    }

    #[test]
    fn empty_sentence_is_unclassifiable() {
        let (m, _) = small_model(Aggregator::Avg, 0);
        let emb = m.node_embeddings().unwrap();
        assert!(matches!(m.predict(&emb, &[]), Err(Error::Unclassifiable)));
        assert!(matches!(m.score_sentence(&emb, &[], 0), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn zero_parameters_give_sigmoid_of_output_bias() {
        let (mut m, c) = small_model(Aggregator::Avg, 0);
        let b2 = 0.37;
        for i in 0..m.params().len() {
            m.params_mut().value_mut(i).data_mut().fill(0.0);
        }
        let idx = m.params().index_of("head.fc2.bias").unwrap();
        m.params_mut().value_mut(idx).data_mut()[0] = b2;
        let emb = m.node_embeddings().unwrap();
        let z = m.score_sentence(&emb, &c.train[0].tokens, 0).unwrap();
        assert!((z - 1.0 / (1.0 + (-b2).exp())).abs() < 1e-15);
    }

    #[test]
    fn prod_single_token_is_one() {
        let (m, c) = small_model(Aggregator::Prod, 0);
        let emb = m.node_embeddings().unwrap();
        let z = m.score_sentence(&emb, &c.train[0].tokens[..1], 0).unwrap();
        assert_eq!(z, 1.0);
    }

    #[test]
    fn scores_ignore_other_blocks() {
        let (m, c) = small_model(Aggregator::Avg, 4);
        let emb = m.node_embeddings().unwrap();
        let s = &c.train[0].tokens;
        let before = m.score_sentence(&emb, s, 0).unwrap();
        // rewire block 1: replace its edges by a path with arbitrary weights
        let mut blocks = m.dgow().blocks().to_vec();
        let b1 = &blocks[1];
        let words = b1.words().to_vec();
        let edges = (1..words.len())
            .map(|i| crate::graph::Edge {
                src: i - 1,
                dst: i,
                weight: 0.3 * i as f64,
            })
            .collect();
        blocks[1] = crate::graph::WordGraph::from_parts(b1.window(), words, edges).unwrap();
        let rewired = DgowGnn::from_parts(Dgow::from_blocks(blocks), m.config().clone(), m.params().clone()).unwrap();
        let emb2 = rewired.node_embeddings().unwrap();
        assert_eq!(rewired.score_sentence(&emb2, s, 0).unwrap(), before);
        let (a, _) = m.embed_words(&emb, s, 0).unwrap();
        let (b, _) = rewired.embed_words(&emb2, s, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn composed_score_gradients() {
        for a in Aggregator::ALL {
            for seed in 0..3 {
                let (mut m, c) = small_model(a, seed);
                // zero biases put the head's ReLU exactly on its kink for
                // all-missing sentences; move them off it
                for i in 0..m.params().len() {
                    if m.params().params()[i].name.ends_with("bias") {
                        let v = m.params_mut().value_mut(i);
                        v.data_mut().iter_mut().enumerate().for_each(|(k, x)| *x = 0.1 * ((k + 1) as f64).sin());
                    }
                }
                let tokens = c.train[seed as usize].tokens.clone();
                let model = m.clone();
                let err = finite_difference_check(
                    m.params_mut(),
                    |store| {
                        let mut probe = model.clone();
                        *probe.params_mut() = store.clone();
                        probe.pair_loss(&tokens, 0, Some(1)).unwrap()
                    },
                    1e-6,
                    8,
                    seed,
                );
                assert!(err < 1e-4, "{a} seed {seed}: {err}");
            }
        }
    }
}
