//! A small reverse-mode differentiation tape over a fixed operator set.
//!
//! Nodes hold `f64` vectors. Operators cover exactly what the parser
//! needs: parameter/row reads, matrix-vector products, elementwise
//! arithmetic and activations, concatenation/slicing, dot products of one
//! query against many keys, full softmax, weighted sums, and a fused
//! log-softmax negative log-likelihood. The tape is append-only, so
//! reverse insertion order is a valid reverse topological order.

use super::params::{GradStore, ParamId, ParamStore};

/// Handle to one tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Constant input; no gradient flows into it.
    Input,
    /// Whole-tensor parameter read (vectors and biases).
    Param(ParamId),
    /// One row of a matrix parameter (embedding lookup).
    Row(ParamId, usize),
    /// `W x` with a matrix parameter.
    MatVec(ParamId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// `1 - x` elementwise.
    OneMinus(NodeId),
    /// `c * x` with a constant scalar.
    Scale(NodeId, f64),
    Concat(NodeId, NodeId),
    Slice(NodeId, usize),
    /// `y_i = q . k_i` for each key.
    DotEach(NodeId, Vec<NodeId>),
    Softmax(NodeId),
    /// `y = sum_i w_i v_i`.
    WeightedSum(NodeId, Vec<NodeId>),
    /// Scalar `logsumexp(z) - z[gold]`.
    PickNll(NodeId, usize),
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.input(vec![0.0; len])
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.tensor(id).data.clone(), Op::Param(id))
    }

    pub fn row(&mut self, store: &ParamStore, id: ParamId, r: usize) -> NodeId {
        self.push(store.tensor(id).row(r).to_vec(), Op::Row(id, r))
    }

    pub fn matvec(&mut self, store: &ParamStore, w: ParamId, x: NodeId) -> NodeId {
        let t = store.tensor(w);
        let xv = &self.nodes[x.0].value;
        debug_assert_eq!(t.cols, xv.len(), "matvec shape mismatch for '{}'", t.name);
        let mut y = vec![0.0; t.rows];
        for (i, yi) in y.iter_mut().enumerate() {
            let row = t.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(xv.iter()) {
                acc += a * b;
            }
            *yi = acc;
        }
        self.push(y, Op::MatVec(w, x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(av.len(), bv.len());
        let y = av.iter().zip(bv).map(|(x, z)| x + z).collect();
        self.push(y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(av.len(), bv.len());
        let y = av.iter().zip(bv).map(|(x, z)| x * z).collect();
        self.push(y, Op::Mul(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let y = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(y, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let y = self.nodes[a.0]
            .value
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(y, Op::Sigmoid(a))
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let y = self.nodes[a.0].value.iter().map(|x| 1.0 - x).collect();
        self.push(y, Op::OneMinus(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let y = self.nodes[a.0].value.iter().map(|x| c * x).collect();
        self.push(y, Op::Scale(a, c))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.nodes[a.0].value.clone();
        y.extend_from_slice(&self.nodes[b.0].value);
        self.push(y, Op::Concat(a, b))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let y = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(y, Op::Slice(a, start))
    }

    pub fn dot_each(&mut self, q: NodeId, keys: &[NodeId]) -> NodeId {
        let qv = &self.nodes[q.0].value;
        let y: Vec<f64> = keys
            .iter()
            .map(|k| {
                let kv = &self.nodes[k.0].value;
                debug_assert_eq!(qv.len(), kv.len());
                qv.iter().zip(kv).map(|(a, b)| a * b).sum()
            })
            .collect();
        self.push(y, Op::DotEach(q, keys.to_vec()))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let y = softmax_values(&self.nodes[a.0].value);
        self.push(y, Op::Softmax(a))
    }

    pub fn weighted_sum(&mut self, w: NodeId, vals: &[NodeId]) -> NodeId {
        let wv = &self.nodes[w.0].value;
        debug_assert_eq!(wv.len(), vals.len());
        let dim = self.nodes[vals[0].0].value.len();
        let mut y = vec![0.0; dim];
        for (wi, v) in wv.iter().zip(vals) {
            for (yj, vj) in y.iter_mut().zip(&self.nodes[v.0].value) {
                *yj += wi * vj;
            }
        }
        self.push(y, Op::WeightedSum(w, vals.to_vec()))
    }

    /// Fused `logsumexp(z) - z[gold]`, the per-step negative log-likelihood
    /// of the gold index under a softmax over `logits`. For a single-entry
    /// logit vector this is exactly `0.0`.
    pub fn pick_nll(&mut self, logits: NodeId, gold: usize) -> NodeId {
        let z = &self.nodes[logits.0].value;
        debug_assert!(gold < z.len());
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|x| (x - m).exp()).sum();
        let lse = m + sum.ln();
        self.push(vec![lse - z[gold]], Op::PickNll(logits, gold))
    }

    /// Backpropagates from a scalar root node, accumulating parameter
    /// gradients. Parameter values must not have changed since the forward
    /// pass.
    pub fn backward(&self, root: NodeId, store: &ParamStore) -> GradStore {
        let mut grads = GradStore::zeros_like(store);
        let mut adjoint: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        debug_assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        adjoint[root.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(p) => {
                    for (s, gi) in grads.slot_mut(*p).iter_mut().zip(&g) {
                        *s += gi;
                    }
                }
                Op::Row(p, r) => {
                    let cols = store.tensor(*p).cols;
                    let slot = grads.slot_mut(*p);
                    for (j, gi) in g.iter().enumerate() {
                        slot[r * cols + j] += gi;
                    }
                }
                Op::MatVec(w, x) => {
                    let t = store.tensor(*w);
                    let xv = &self.nodes[x.0].value;
                    // dW[i][j] += g[i] * x[j]
                    let slot = grads.slot_mut(*w);
                    for (ii, gi) in g.iter().enumerate() {
                        if *gi == 0.0 {
                            continue;
                        }
                        let base = ii * t.cols;
                        for (j, xj) in xv.iter().enumerate() {
                            slot[base + j] += gi * xj;
                        }
                    }
                    // dx[j] += sum_i g[i] * W[i][j]
                    let dx = accumulate(&mut adjoint, *x, xv.len());
                    for (ii, gi) in g.iter().enumerate() {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (j, wij) in t.row(ii).iter().enumerate() {
                            dx[j] += gi * wij;
                        }
                    }
                }
                Op::Add(a, b) => {
                    let da = accumulate(&mut adjoint, *a, g.len());
                    for (x, gi) in da.iter_mut().zip(&g) {
                        *x += gi;
                    }
                    let db = accumulate(&mut adjoint, *b, g.len());
                    for (x, gi) in db.iter_mut().zip(&g) {
                        *x += gi;
                    }
                }
                Op::Mul(a, b) => {
                    let bv = self.nodes[b.0].value.clone();
                    let av = self.nodes[a.0].value.clone();
                    let da = accumulate(&mut adjoint, *a, g.len());
                    for ((x, gi), bvi) in da.iter_mut().zip(&g).zip(&bv) {
                        *x += gi * bvi;
                    }
                    let db = accumulate(&mut adjoint, *b, g.len());
                    for ((x, gi), avi) in db.iter_mut().zip(&g).zip(&av) {
                        *x += gi * avi;
                    }
                }
                Op::Tanh(a) => {
                    let yv = self.nodes[i].value.clone();
                    let da = accumulate(&mut adjoint, *a, g.len());
                    for ((x, gi), y) in da.iter_mut().zip(&g).zip(&yv) {
                        *x += gi * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let yv = self.nodes[i].value.clone();
                    let da = accumulate(&mut adjoint, *a, g.len());
                    for ((x, gi), y) in da.iter_mut().zip(&g).zip(&yv) {
                        *x += gi * y * (1.0 - y);
                    }
                }
                Op::OneMinus(a) => {
                    let da = accumulate(&mut adjoint, *a, g.len());
                    for (x, gi) in da.iter_mut().zip(&g) {
                        *x -= gi;
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    let da = accumulate(&mut adjoint, *a, g.len());
                    for (x, gi) in da.iter_mut().zip(&g) {
                        *x += gi * c;
                    }
                }
                Op::Concat(a, b) => {
                    let alen = self.nodes[a.0].value.len();
                    let da = accumulate(&mut adjoint, *a, alen);
                    for (x, gi) in da.iter_mut().zip(&g[..alen]) {
                        *x += gi;
                    }
                    let blen = g.len() - alen;
                    let db = accumulate(&mut adjoint, *b, blen);
                    for (x, gi) in db.iter_mut().zip(&g[alen..]) {
                        *x += gi;
                    }
                }
                Op::Slice(a, start) => {
                    let alen = self.nodes[a.0].value.len();
                    let da = accumulate(&mut adjoint, *a, alen);
                    for (j, gi) in g.iter().enumerate() {
                        da[start + j] += gi;
                    }
                }
                Op::DotEach(q, keys) => {
                    let qv = self.nodes[q.0].value.clone();
                    let dim = qv.len();
                    // dq += sum_i g[i] * k_i ; dk_i += g[i] * q
                    let keyvals: Vec<Vec<f64>> =
                        keys.iter().map(|k| self.nodes[k.0].value.clone()).collect();
                    let dq = accumulate(&mut adjoint, *q, dim);
                    for (gi, kv) in g.iter().zip(&keyvals) {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (x, kj) in dq.iter_mut().zip(kv) {
                            *x += gi * kj;
                        }
                    }
                    for (k, gi) in keys.iter().zip(&g) {
                        if *gi == 0.0 {
                            continue;
                        }
                        let dk = accumulate(&mut adjoint, *k, dim);
                        for (x, qj) in dk.iter_mut().zip(&qv) {
                            *x += gi * qj;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let yv = self.nodes[i].value.clone();
                    let dot: f64 = g.iter().zip(&yv).map(|(gi, yi)| gi * yi).sum();
                    let da = accumulate(&mut adjoint, *a, g.len());
                    for ((x, gi), yi) in da.iter_mut().zip(&g).zip(&yv) {
                        *x += yi * (gi - dot);
                    }
                }
                Op::WeightedSum(w, vals) => {
                    let wv = self.nodes[w.0].value.clone();
                    let valvals: Vec<Vec<f64>> =
                        vals.iter().map(|v| self.nodes[v.0].value.clone()).collect();
                    let dw = accumulate(&mut adjoint, *w, wv.len());
                    for (x, vv) in dw.iter_mut().zip(&valvals) {
                        *x += g.iter().zip(vv).map(|(gi, vj)| gi * vj).sum::<f64>();
                    }
                    for (v, wi) in vals.iter().zip(&wv) {
                        let dv = accumulate(&mut adjoint, *v, g.len());
                        for (x, gi) in dv.iter_mut().zip(&g) {
                            *x += wi * gi;
                        }
                    }
                }
                Op::PickNll(logits, gold) => {
                    let z = self.nodes[logits.0].value.clone();
                    let probs = softmax_values(&z);
                    let dz = accumulate(&mut adjoint, *logits, z.len());
                    let g0 = g[0];
                    for (j, (x, p)) in dz.iter_mut().zip(&probs).enumerate() {
                        let indicator = if j == *gold { 1.0 } else { 0.0 };
                        *x += g0 * (p - indicator);
                    }
                }
            }
        }
        grads
    }
}

fn accumulate<'a>(
    adjoint: &'a mut [Option<Vec<f64>>],
    id: NodeId,
    len: usize,
) -> &'a mut Vec<f64> {
    adjoint[id.0].get_or_insert_with(|| vec![0.0; len])
}

/// Numerically stable softmax of a plain value vector.
pub fn softmax_values(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, Partition};

    /// Central-difference check of a scalar function of the parameter store.
    fn fd_check(
        store: &mut ParamStore,
        build: impl Fn(&mut Tape, &ParamStore) -> NodeId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let root = build(&mut tape, store);
        let analytic = tape.backward(root, store);

        let h = 1e-5;
        for ti in 0..store.len() {
            for j in 0..store.tensor(crate::nn::params::ParamId(ti)).len() {
                let id = crate::nn::params::ParamId(ti);
                let orig = store.tensor(id).data[j];

                store.tensor_mut(id).data[j] = orig + h;
                let mut tp = Tape::new();
                let r = build(&mut tp, store);
                let fp = tp.value(r)[0];

                store.tensor_mut(id).data[j] = orig - h;
                let mut tm = Tape::new();
                let r = build(&mut tm, store);
                let fm = tm.value(r)[0];

                store.tensor_mut(id).data[j] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let got = analytic.slot(id)[j];
                let denom = got.abs().max(numeric.abs()).max(1e-5);
                assert!(
                    (got - numeric).abs() / denom < tol,
                    "tensor {ti} coord {j}: analytic {got} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut store = ParamStore::new();
        store.add("w", 3, 4, Partition::Global, Init::Uniform(0.5), 3);
        store.add("b", 3, 1, Partition::Global, Init::Uniform(0.5), 4);
        store.add("e", 5, 4, Partition::Global, Init::Uniform(0.5), 5);

        fd_check(
            &mut store,
            |tape, store| {
                let w = store.id("w").unwrap();
                let b = store.id("b").unwrap();
                let e = store.id("e").unwrap();
                let x = tape.row(store, e, 2);
                let y = tape.row(store, e, 4);
                let wx = tape.matvec(store, w, x);
                let bb = tape.param(store, b);
                let pre = tape.add(wx, bb);
                let t = tape.tanh(pre);
                let s = tape.sigmoid(pre);
                let m = tape.mul(t, s);
                let om = tape.one_minus(s);
                let m2 = tape.mul(om, t);
                let cat = tape.concat(m, m2);
                let sl = tape.slice(cat, 1, 4);
                let scores = tape.dot_each(sl, &[x, y]);
                let sm = tape.softmax(scores);
                let ws = tape.weighted_sum(sm, &[x, y]);
                let scores2 = tape.dot_each(ws, &[y, x, x]);
                let nll = tape.pick_nll(scores2, 1);
                tape.scale(nll, 0.5)
            },
            1e-4,
        );
    }

    #[test]
    fn single_logit_nll_is_exactly_zero() {
        let mut tape = Tape::new();
        let z = tape.input(vec![3.7]);
        let nll = tape.pick_nll(z, 0);
        assert_eq!(tape.value(nll)[0], 0.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape = Tape::new();
        let z = tape.input(vec![1.0, -2.0, 0.5, 40.0]);
        let s = tape.softmax(z);
        let total: f64 = tape.value(s).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_give_exactly_uniform_probabilities() {
        let probs = softmax_values(&[0.25; 4]);
        for p in &probs {
            assert_eq!(*p, 0.25);
        }
    }
}
