//! GCN stack, bidirectional LSTM and MLP head built on the tape.

use std::sync::Arc;

use rand::Rng;

use super::params::{Bound, ParamGroup, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// `ReLU(Â H W)` when `activate`, else `Â H W`.
pub fn gcn_layer_forward(tape: &mut Tape, adj: &Arc<CsrMatrix>, h: Var, w: Var, activate: bool) -> Result<Var> {
    let (hr, hc) = tape.shape(h);
    let (wr, _) = tape.shape(w);
    if adj.cols() != hr || hc != wr {
        return Err(Error::Shape {
            op: "gcn_layer_forward",
            detail: format!("Â {}x{}, H {hr}x{hc}, W {:?}", adj.rows(), adj.cols(), tape.shape(w)),
        });
    }
    let hw = tape.matmul(h, w);
    let out = tape.spmm(adj.clone(), hw);
    Ok(if activate { tape.relu(out) } else { out })
}

/// GCN with identity input features: the first layer is `Â W₁`. ReLU between
/// layers, none after the last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GcnStack {
    weights: Vec<usize>,
    num_nodes: usize,
    hidden: usize,
}

impl GcnStack {
    pub fn init(store: &mut ParameterStore, rng: &mut impl Rng, num_nodes: usize, hidden: usize, layers: usize) -> Self {
        assert!(layers >= 1);
        let weights = (0..layers)
            .map(|l| {
                let rows = if l == 0 { num_nodes } else { hidden };
                store.add_xavier(format!("gcn.{l}.weight"), ParamGroup::Gcn, rows, hidden, rng)
            })
            .collect();
        Self {
            weights,
            num_nodes,
            hidden,
        }
    }

    pub fn from_store(store: &ParameterStore, num_nodes: usize, layers: usize) -> Result<Self> {
        let weights = (0..layers)
            .map(|l| lookup(store, &format!("gcn.{l}.weight")))
            .collect::<Result<Vec<_>>>()?;
        let hidden = store.value(weights[0]).cols();
        if store.value(weights[0]).rows() != num_nodes {
            return Err(Error::format("checkpoint", "first GCN weight does not match the graph size"));
        }
        Ok(Self {
            weights,
            num_nodes,
            hidden,
        })
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Embeddings of every node.
    pub fn forward_full(&self, tape: &mut Tape, params: &Bound, adj: &Arc<CsrMatrix>) -> Result<Var> {
        let last = self.weights.len() - 1;
        let mut h = tape.spmm(adj.clone(), params.var(self.weights[0]));
        if last > 0 {
            h = tape.relu(h);
        }
        for (l, &w) in self.weights.iter().enumerate().skip(1) {
            h = gcn_layer_forward(tape, adj, h, params.var(w), l < last)?;
        }
        Ok(h)
    }

    /// Embeddings of `targets` only, computing each layer on the receptive
    /// field it needs. Returns the output rows (sorted node ids) alongside.
    /// Equal to the matching rows of [`forward_full`](Self::forward_full).
    pub fn forward_rows(&self, tape: &mut Tape, params: &Bound, adj: &CsrMatrix, targets: &[usize]) -> (Var, Vec<usize>) {
        let layers = self.weights.len();
        let mut sets: Vec<Vec<usize>> = vec![Vec::new(); layers + 1];
        let mut out_rows = targets.to_vec();
        out_rows.sort_unstable();
        out_rows.dedup();
        sets[layers] = out_rows;
        let mut mark = vec![false; adj.rows()];
        for l in (0..layers).rev() {
            let mut next = Vec::new();
            for &r in &sets[l + 1] {
                for &c in adj.row(r).0.iter().chain(std::iter::once(&r)) {
                    if !mark[c] {
                        mark[c] = true;
                        next.push(c);
                    }
                }
            }
            next.iter().for_each(|&c| mark[c] = false);
            next.sort_unstable();
            sets[l] = next;
        }
        let sub = Arc::new(adj.submatrix(&sets[1], &sets[0]));
        let w0 = tape.gather_rows(params.var(self.weights[0]), sets[0].iter().map(|&r| Some(r)).collect());
        let mut h = tape.spmm(sub, w0);
        if layers > 1 {
            h = tape.relu(h);
        }
        for l in 1..layers {
            let sub = Arc::new(adj.submatrix(&sets[l + 1], &sets[l]));
            let hw = tape.matmul(h, params.var(self.weights[l]));
            h = tape.spmm(sub, hw);
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        (h, sets.pop().unwrap())
    }
}

fn lookup(store: &ParameterStore, name: &str) -> Result<usize> {
    store
        .index_of(name)
        .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LstmCell {
    w_ih: usize,
    w_hh: usize,
    bias: usize,
}

/// Bidirectional LSTM with gates ordered input, forget, cell, output and zero
/// initial states. Output row `t` is `[forward_t, backward_t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiLstm {
    input: usize,
    hidden: usize,
    fwd: LstmCell,
    bwd: LstmCell,
}

impl BiLstm {
    pub fn init(store: &mut ParameterStore, rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        let mut cell = |dir: &str| LstmCell {
            w_ih: store.add_xavier(format!("lstm.{dir}.w_ih"), ParamGroup::Lstm, input, 4 * hidden, rng),
            w_hh: store.add_xavier(format!("lstm.{dir}.w_hh"), ParamGroup::Lstm, hidden, 4 * hidden, rng),
            bias: store.add_zeros(format!("lstm.{dir}.bias"), ParamGroup::Lstm, 1, 4 * hidden),
        };
        let fwd = cell("fwd");
        let bwd = cell("bwd");
        Self {
            input,
            hidden,
            fwd,
            bwd,
        }
    }

    pub fn from_store(store: &ParameterStore) -> Result<Self> {
        let cell = |dir: &str| -> Result<LstmCell> {
            Ok(LstmCell {
                w_ih: lookup(store, &format!("lstm.{dir}.w_ih"))?,
                w_hh: lookup(store, &format!("lstm.{dir}.w_hh"))?,
                bias: lookup(store, &format!("lstm.{dir}.bias"))?,
            })
        };
        let fwd = cell("fwd")?;
        let bwd = cell("bwd")?;
        let (input, four_h) = store.value(fwd.w_ih).shape();
        Ok(Self {
            input,
            hidden: four_h / 4,
            fwd,
            bwd,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn output_width(&self) -> usize {
        2 * self.hidden
    }

    /// `seq` is `L x input`; returns `L x 2·hidden`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, seq: Var) -> Result<Var> {
        let (len, width) = tape.shape(seq);
        if len == 0 {
            return Err(Error::EmptySequence("bilstm_forward"));
        }
        if width != self.input {
            return Err(Error::Shape {
                op: "bilstm_forward",
                detail: format!("input width {width}, expected {}", self.input),
            });
        }
        let f = self.direction(tape, params, seq, self.fwd, &mut (0..len))?;
        let b = self.direction(tape, params, seq, self.bwd, &mut (0..len).rev())?;
        Ok(tape.concat_cols(vec![f, b]))
    }

    fn direction(
        &self,
        tape: &mut Tape,
        params: &Bound,
        seq: Var,
        cell: LstmCell,
        order: &mut dyn Iterator<Item = usize>,
    ) -> Result<Var> {
        let h_size = self.hidden;
        let len = tape.shape(seq).0;
        let xw = tape.matmul(seq, params.var(cell.w_ih));
        let xw = tape.add_row(xw, params.var(cell.bias));
        let mut outputs: Vec<Option<Var>> = vec![None; len];
        let mut state: Option<(Var, Var)> = None;
        for t in order {
            let mut gates = tape.row(xw, t);
            if let Some((h, _)) = state {
                let hh = tape.matmul(h, params.var(cell.w_hh));
                gates = tape.add(gates, hh);
            }
            let i = tape.cols(gates, 0, h_size);
            let i = tape.sigmoid(i);
            let f = tape.cols(gates, h_size, h_size);
            let f = tape.sigmoid(f);
            let g = tape.cols(gates, 2 * h_size, h_size);
            let g = tape.tanh(g);
            let o = tape.cols(gates, 3 * h_size, h_size);
            let o = tape.sigmoid(o);
            let mut c = tape.mul(i, g);
            if let Some((_, c_prev)) = state {
                let keep = tape.mul(f, c_prev);
                c = tape.add(keep, c);
            }
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc);
            outputs[t] = Some(h);
            state = Some((h, c));
        }
        Ok(tape.stack_rows(outputs.into_iter().map(|o| o.expect("every position visited")).collect()))
    }
}

/// One hidden ReLU layer and a scalar logit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpHead {
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

impl MlpHead {
    pub fn init(store: &mut ParameterStore, rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        Self {
            fc1_w: store.add_xavier("head.fc1.weight", ParamGroup::Head, input, hidden, rng),
            fc1_b: store.add_zeros("head.fc1.bias", ParamGroup::Head, 1, hidden),
            fc2_w: store.add_xavier("head.fc2.weight", ParamGroup::Head, hidden, 1, rng),
            fc2_b: store.add_zeros("head.fc2.bias", ParamGroup::Head, 1, 1),
        }
    }

    pub fn from_store(store: &ParameterStore) -> Result<Self> {
        Ok(Self {
            fc1_w: lookup(store, "head.fc1.weight")?,
            fc1_b: lookup(store, "head.fc1.bias")?,
            fc2_w: lookup(store, "head.fc2.weight")?,
            fc2_b: lookup(store, "head.fc2.bias")?,
        })
    }

    /// `x` is `1 x input`; returns the `1 x 1` logit.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, params.var(self.fc1_w));
        let h = tape.add_row(h, params.var(self.fc1_b));
        let h = tape.relu(h);
        let z = tape.matmul(h, params.var(self.fc2_w));
        tape.add_row(z, params.var(self.fc2_b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::finite_difference_check;
    use crate::nn::matrix::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring_adjacency(n: usize) -> Arc<CsrMatrix> {
        let adj = CsrMatrix::from_triplets(
            n,
            n,
            &(0..n).flat_map(|i| [(i, (i + 1) % n, 1.0), ((i + 1) % n, i, 1.0)]).collect::<Vec<_>>(),
        );
        Arc::new(crate::graph::normalize_adjacency(&adj).into_matrix())
    }

    #[test]
    fn identity_layer_is_identity_on_nonnegative_input() {
        let mut t = Tape::new();
        let h = t.leaf(Matrix::new(2, 2, vec![1.0, 2.0, 0.0, 3.0]));
        let w = t.leaf(Matrix::identity(2));
        let eye = Arc::new(CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, 1.0)]));
        let out = gcn_layer_forward(&mut t, &eye, h, w, true).unwrap();
        assert_eq!(t.value(out), t.value(h));
    }

    #[test]
    fn two_node_layer_by_hand() {
        let mut t = Tape::new();
        let adj = Arc::new(CsrMatrix::from_triplets(2, 2, &[(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5)]));
        let h = t.leaf(Matrix::identity(2));
        let w = t.leaf(Matrix::identity(2));
        let out = gcn_layer_forward(&mut t, &adj, h, w, false).unwrap();
        assert_eq!(t.value(out).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_rejects_bad_dimensions() {
        let mut t = Tape::new();
        let adj = ring_adjacency(3);
        let h = t.leaf(Matrix::zeros(2, 2));
        let w = t.leaf(Matrix::zeros(2, 2));
        assert!(matches!(gcn_layer_forward(&mut t, &adj, h, w, true), Err(Error::Shape { .. })));
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let adj = ring_adjacency(5);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParameterStore::new();
            store.add_xavier("h", ParamGroup::Gcn, 5, 3, &mut rng);
            store.add_xavier("w", ParamGroup::Gcn, 3, 4, &mut rng);
            let err = finite_difference_check(
                &mut store,
                |s| {
                    let mut t = Tape::new();
                    let b = s.bind(&mut t);
                    let out = gcn_layer_forward(&mut t, &adj, b.var(0), b.var(1), true).unwrap();
                    let out = t.tanh(out);
                    let l = t.sum(out);
                    let mut g = t.backward(l);
                    (t.value(l).item(), s.collect(&b, &mut g))
                },
                1e-6,
                20,
                seed,
            );
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn receptive_field_pass_matches_full_pass() {
        let adj = ring_adjacency(12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let gcn = GcnStack::init(&mut store, &mut rng, 12, 4, 3);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let full = gcn.forward_full(&mut t, &b, &adj).unwrap();
        let (part, rows) = gcn.forward_rows(&mut t, &b, &adj, &[7, 2, 7]);
        assert_eq!(rows, vec![2, 7]);
        for (k, &r) in rows.iter().enumerate() {
            for c in 0..4 {
                let (a, b) = (t.value(full).get(r, c), t.value(part).get(k, c));
                assert!((a - b).abs() < 1e-14, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lstm = BiLstm::init(&mut store, &mut rng, 3, 2);
        for i in 0..store.len() {
            store.value_mut(i).data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let seq = t.leaf(Matrix::from_fn(4, 3, |r, c| (r + c) as f64));
        let out = lstm.forward(&mut t, &b, seq).unwrap();
        assert_eq!(t.shape(out), (4, 4));
        assert!(t.value(out).data().iter().all(|&x| x == 0.0));
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn scalar_cell_matches_hand_recurrence() {
        // input width 1, hidden 1; gates [i, f, g, o]
        let w_ih = [0.5, -0.3, 0.8, 0.1];
        let w_hh = [0.2, 0.4, -0.6, 0.7];
        let bias = [0.1, 0.2, -0.1, 0.05];
        let xs = [1.0, -2.0];
        let step = |x: f64, h: f64, c: f64| {
            let a: Vec<f64> = (0..4).map(|k| w_ih[k] * x + w_hh[k] * h + bias[k]).collect();
            let (i, f, g, o) = (sig(a[0]), sig(a[1]), a[2].tanh(), sig(a[3]));
            let c = f * c + i * g;
            (o * c.tanh(), c)
        };
        let (h0, c0) = step(xs[0], 0.0, 0.0);
        let (h1, _) = step(xs[1], h0, c0);
        let (b1, d1) = step(xs[1], 0.0, 0.0);
        let (b0, _) = step(xs[0], b1, d1);

        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lstm = BiLstm::init(&mut store, &mut rng, 1, 1);
        for dir in ["fwd", "bwd"] {
            *store.value_mut(store.index_of(&format!("lstm.{dir}.w_ih")).unwrap()) = Matrix::new(1, 4, w_ih.to_vec());
            *store.value_mut(store.index_of(&format!("lstm.{dir}.w_hh")).unwrap()) = Matrix::new(1, 4, w_hh.to_vec());
            *store.value_mut(store.index_of(&format!("lstm.{dir}.bias")).unwrap()) = Matrix::new(1, 4, bias.to_vec());
        }
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let seq = t.leaf(Matrix::new(2, 1, xs.to_vec()));
        let out = lstm.forward(&mut t, &b, seq).unwrap();
        let v = t.value(out);
        for (got, want) in [(v.get(0, 0), h0), (v.get(1, 0), h1), (v.get(0, 1), b0), (v.get(1, 1), b1)] {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn reversing_input_swaps_directions() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lstm = BiLstm::init(&mut store, &mut rng, 2, 3);
        // share weights across directions so the swap is exact
        for name in ["w_ih", "w_hh", "bias"] {
            let f = store.value(store.index_of(&format!("lstm.fwd.{name}")).unwrap()).clone();
            *store.value_mut(store.index_of(&format!("lstm.bwd.{name}")).unwrap()) = f;
        }
        let seq = Matrix::from_fn(3, 2, |r, c| (r as f64 - c as f64) * 0.7);
        let rev = Matrix::from_fn(3, 2, |r, c| seq.get(2 - r, c));
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let s1 = t.leaf(seq);
        let s2 = t.leaf(rev);
        let o1 = lstm.forward(&mut t, &b, s1).unwrap();
        let o2 = lstm.forward(&mut t, &b, s2).unwrap();
        let (o1, o2) = (t.value(o1), t.value(o2));
        for r in 0..3 {
            for c in 0..3 {
                assert!((o1.get(r, c) - o2.get(2 - r, 3 + c)).abs() < 1e-14);
                assert!((o1.get(r, 3 + c) - o2.get(2 - r, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lstm = BiLstm::init(&mut store, &mut rng, 2, 2);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let seq = t.leaf(Matrix::zeros(0, 2));
        assert!(matches!(lstm.forward(&mut t, &b, seq), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParameterStore::new();
            let lstm = BiLstm::init(&mut store, &mut rng, 3, 4);
            let x = store.add_xavier("x", ParamGroup::Gcn, 5, 3, &mut rng);
            let err = finite_difference_check(
                &mut store,
                |s| {
                    let mut t = Tape::new();
                    let b = s.bind(&mut t);
                    let out = lstm.forward(&mut t, &b, b.var(x)).unwrap();
                    let sq = t.mul(out, out);
                    let l = t.sum(sq);
                    let mut g = t.backward(l);
                    (t.value(l).item(), s.collect(&b, &mut g))
                },
                1e-6,
                10,
                seed,
            );
            assert!(err < 1e-4, "relative error {err}");
        }
    }
}
