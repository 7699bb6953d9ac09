//! Reverse-mode gradient tape over [`Tensor2`] nodes.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Parameter leaves
//! are keyed by [`ParamKey`] so the resulting [`Gradients`] can be applied
//! straight back onto a [`ParameterStore`](crate::model::ParameterStore).

use std::collections::{BTreeMap, HashMap};

use super::ops::{self, dot, norm};
use super::Tensor2;
use crate::error::{Error, Result};
use crate::model::{ParamAddr, ParamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor2,
    },
    GroupMean {
        input: NodeId,
        groups: Vec<Vec<usize>>,
    },
    PairDistance {
        a: NodeId,
        b: NodeId,
        pairs: Vec<(usize, usize)>,
    },
    PairCosine {
        a: NodeId,
        b: NodeId,
        pairs: Vec<(usize, usize)>,
    },
    L1Deviation {
        input: NodeId,
        entries: Vec<(usize, f64)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf. Receives no gradient in the output map.
    pub fn input(&mut self, value: Tensor2) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Parameter leaf. Registering the same key twice returns the first node.
    pub fn param(&mut self, key: ParamKey, value: Tensor2) -> NodeId {
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        let id = self.push(value, Op::Param);
        self.params.insert(key, id);
        id
    }

    pub fn param_node(&self, key: ParamKey) -> Option<NodeId> {
        self.params.get(&key).copied()
    }

    /// `input · weight + bias`; `bias` must be a `1 x out` row.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let b = self.value(bias);
        if b.rows() != 1 {
            return Err(Error::shape("dense bias", "1 row", b.rows()));
        }
        let value = ops::dense_forward(self.value(input), self.value(weight), b.data())?;
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = ops::relu(self.value(x));
        self.push(value, Op::Relu(x))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = f(*o, y);
        }
        out
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v += c);
        self.push(value, Op::AddScalar(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor2::scalar(s), Op::Sum(x))
    }

    /// Mean of all entries; an empty tensor averages to 0.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let n = v.data().len();
        let m = if n == 0 {
            0.0
        } else {
            v.data().iter().sum::<f64>() / n as f64
        };
        self.push(Tensor2::scalar(m), Op::Mean(x))
    }

    /// Mean softmax cross-entropy over rows, as a 1x1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let l = self.value(logits);
        ops::check_labels(l, labels)?;
        let loss = ops::softmax_cross_entropy(l, labels)?;
        let probs = ops::softmax(l);
        Ok(self.push(
            Tensor2::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Row `g` of the output is the mean of the input rows listed in `groups[g]`.
    pub fn group_mean(&mut self, input: NodeId, groups: Vec<Vec<usize>>) -> Result<NodeId> {
        let x = self.value(input);
        let mut out = Tensor2::zeros(groups.len(), x.cols());
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Empty(format!("group {g} has no rows")));
            }
            let inv = 1.0 / members.len() as f64;
            for &m in members {
                if m >= x.rows() {
                    return Err(Error::shape("group_mean", format!("row < {}", x.rows()), m));
                }
                for (o, v) in out.row_mut(g).iter_mut().zip(x.row(m)) {
                    *o += v * inv;
                }
            }
        }
        Ok(self.push(out, Op::GroupMean { input, groups }))
    }

    fn check_pairs(&self, op: &'static str, a: NodeId, b: NodeId, pairs: &[(usize, usize)]) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape(op, va.cols(), vb.cols()));
        }
        for &(i, j) in pairs {
            if i >= va.rows() || j >= vb.rows() {
                return Err(Error::shape(
                    op,
                    format!("pair within {}x{}", va.rows(), vb.rows()),
                    format!("({i},{j})"),
                ));
            }
        }
        Ok(())
    }

    /// Column of Euclidean distances `‖a[i] − b[j]‖` for each `(i, j)`.
    pub fn pair_distance(&mut self, a: NodeId, b: NodeId, pairs: Vec<(usize, usize)>) -> Result<NodeId> {
        self.check_pairs("pair_distance", a, b, &pairs)?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Tensor2::zeros(pairs.len(), 1);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            out.set(k, 0, ops::euclidean_distance(va.row(i), vb.row(j))?);
        }
        Ok(self.push(out, Op::PairDistance { a, b, pairs }))
    }

    /// Column of cosine similarities between `a[i]` and `b[j]` for each `(i, j)`.
    pub fn pair_cosine(&mut self, a: NodeId, b: NodeId, pairs: Vec<(usize, usize)>) -> Result<NodeId> {
        self.check_pairs("pair_cosine", a, b, &pairs)?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Tensor2::zeros(pairs.len(), 1);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let (x, y) = (va.row(i), vb.row(j));
            let (nx, ny) = (norm(x), norm(y));
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::DegenerateInput(format!(
                    "zero-norm row in cosine pair ({i},{j})"
                )));
            }
            out.set(k, 0, dot(x, y) / (nx * ny));
        }
        Ok(self.push(out, Op::PairCosine { a, b, pairs }))
    }

    /// `Σ |x[offset] − reference|` over the listed flat offsets of `input`.
    pub fn l1_deviation(&mut self, input: NodeId, entries: Vec<(usize, f64)>) -> Result<NodeId> {
        let x = self.value(input).data();
        let mut total = 0.0;
        for &(off, reference) in &entries {
            let v = x.get(off).ok_or_else(|| {
                Error::InvalidAddress(format!("offset {off} beyond {} values", x.len()))
            })?;
            total += (v - reference).abs();
        }
        Ok(self.push(Tensor2::scalar(total), Op::L1Deviation { input, entries }))
    }

    /// Propagates d(root)/d(node) backward and collects parameter gradients.
    ///
    /// Every parameter leaf on the tape gets an entry, zero-filled when the
    /// root does not depend on it.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::NonScalarRoot {
                rows: rv.rows(),
                cols: rv.cols(),
            });
        }
        let mut adj: Vec<Option<Tensor2>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (n, k, m) = (x.rows(), x.cols(), w.cols());
                    let mut dx = Tensor2::zeros(n, k);
                    let mut dw = Tensor2::zeros(k, m);
                    let mut db = Tensor2::zeros(1, m);
                    for r in 0..n {
                        let gr = g.row(r);
                        let xr = x.row(r);
                        for (d, gv) in db.data_mut().iter_mut().zip(gr) {
                            *d += gv;
                        }
                        for (i, &xi) in xr.iter().enumerate() {
                            dx.set(r, i, dot(w.row(i), gr));
                            if xi != 0.0 {
                                for (d, gv) in dw.row_mut(i).iter_mut().zip(gr) {
                                    *d += xi * gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *input, dx);
                    accumulate(&mut adj, *weight, dw);
                    accumulate(&mut adj, *bias, db);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut d = g;
                    for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *b, neg);
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (d, v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *d *= v;
                    }
                    let mut db = g;
                    for (d, v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= v;
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(x, factor) => {
                    let mut d = g;
                    d.data_mut().iter_mut().for_each(|v| *v *= factor);
                    accumulate(&mut adj, *x, d);
                }
                Op::AddScalar(x) => accumulate(&mut adj, *x, g),
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut adj, *x, Tensor2::filled(r, c, g.data()[0]));
                }
                Op::Mean(x) => {
                    let (r, c) = self.value(*x).shape();
                    let n = (r * c).max(1) as f64;
                    accumulate(&mut adj, *x, Tensor2::filled(r, c, g.data()[0] / n));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        let row = d.row_mut(r);
                        row[label] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(&mut adj, *logits, d);
                }
                Op::GroupMean { input, groups } => {
                    let (r, c) = self.value(*input).shape();
                    let mut d = Tensor2::zeros(r, c);
                    for (gi, members) in groups.iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &m in members {
                            for (dv, gv) in d.row_mut(m).iter_mut().zip(g.row(gi)) {
                                *dv += gv * inv;
                            }
                        }
                    }
                    accumulate(&mut adj, *input, d);
                }
                Op::PairDistance { a, b, pairs } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Tensor2::zeros(va.rows(), va.cols());
                    let mut db = Tensor2::zeros(vb.rows(), vb.cols());
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let dist = node.value.get(k, 0);
                        // d sqrt(u) / du is taken as 0 at u = 0
                        if dist == 0.0 {
                            continue;
                        }
                        let s = g.get(k, 0) / dist;
                        let (x, y) = (va.row(i), vb.row(j));
                        for c in 0..x.len() {
                            let diff = s * (x[c] - y[c]);
                            da.row_mut(i)[c] += diff;
                            db.row_mut(j)[c] -= diff;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::PairCosine { a, b, pairs } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Tensor2::zeros(va.rows(), va.cols());
                    let mut db = Tensor2::zeros(vb.rows(), vb.cols());
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let cos = node.value.get(k, 0);
                        let gk = g.get(k, 0);
                        let (x, y) = (va.row(i), vb.row(j));
                        let (nx, ny) = (norm(x), norm(y));
                        let inv = 1.0 / (nx * ny);
                        for c in 0..x.len() {
                            da.row_mut(i)[c] += gk * (y[c] * inv - cos * x[c] / (nx * nx));
                            db.row_mut(j)[c] += gk * (x[c] * inv - cos * y[c] / (ny * ny));
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::L1Deviation { input, entries } => {
                    let x = self.value(*input);
                    let mut d = Tensor2::zeros(x.rows(), x.cols());
                    let gv = g.data()[0];
                    for &(off, reference) in entries {
                        let diff = x.data()[off] - reference;
                        // subgradient 0 at the kink
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d.data_mut()[off] += gv * s;
                    }
                    accumulate(&mut adj, *input, d);
                }
            }
        }

        let mut grads = Gradients::default();
        for (&key, &id) in &self.params {
            let g = match adj.get_mut(id.0).and_then(Option::take) {
                Some(g) => g.into_data(),
                None => vec![0.0; self.value(id).data().len()],
            };
            grads.map.insert(key, g);
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Tensor2>], id: NodeId, g: Tensor2) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradient arrays keyed by parameter tensor, in the same flat layout as the store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ParamKey, values: Vec<f64>) {
        self.map.insert(key, values);
    }

    pub fn tensor(&self, key: ParamKey) -> Option<&[f64]> {
        self.map.get(&key).map(Vec::as_slice)
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> Option<&mut Vec<f64>> {
        self.map.get_mut(&key)
    }

    /// Gradient at one address; zero when the parameter never reached the tape.
    pub fn get(&self, addr: ParamAddr) -> f64 {
        self.map
            .get(&addr.key())
            .and_then(|v| v.get(addr.offset))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &[f64])> + '_ {
        self.map.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.map.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSlot, ParamKind};

    fn key(layer: usize, kind: ParamKind) -> ParamKey {
        ParamKey {
            layer: LayerSlot::Extractor(layer),
            kind,
        }
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let k = key(0, ParamKind::Weight);
        let w = tape.param(k, Tensor2::scalar(3.0));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.value(loss).item().unwrap(), 9.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.tensor(k).unwrap(), &[6.0]);
    }

    #[test]
    fn untouched_param_gets_zero() {
        let mut tape = Tape::new();
        let used = key(0, ParamKind::Weight);
        let unused = key(1, ParamKind::Bias);
        let w = tape.param(used, Tensor2::row_vector(&[1.0, -2.0]));
        tape.param(unused, Tensor2::row_vector(&[5.0, 5.0, 5.0]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.tensor(unused).unwrap(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.tensor(used).unwrap(), &[1.0, 1.0]);
        let missing = ParamAddr::new(LayerSlot::Classifier, ParamKind::Weight, 3);
        assert_eq!(grads.get(missing), 0.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::zeros(2, 2));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarRoot { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn relu_zero_has_zero_subgradient() {
        let mut tape = Tape::new();
        let k = key(0, ParamKind::Bias);
        let x = tape.param(k, Tensor2::row_vector(&[0.0, 1.0, -1.0]));
        let r = tape.relu(x);
        let loss = tape.sum(r);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.tensor(k).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn coincident_distance_has_zero_gradient() {
        let mut tape = Tape::new();
        let k = key(0, ParamKind::Weight);
        let x = tape.param(k, Tensor2::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap());
        let d = tape.pair_distance(x, x, vec![(0, 1)]).unwrap();
        let loss = tape.sum(d);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.tensor(k).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l1_kink_has_zero_subgradient() {
        let mut tape = Tape::new();
        let k = key(0, ParamKind::Weight);
        let x = tape.param(k, Tensor2::row_vector(&[0.5, 0.1, -0.3]));
        let l = tape
            .l1_deviation(x, vec![(0, 0.5), (1, 0.0), (2, 0.0)])
            .unwrap();
        assert!((tape.value(l).item().unwrap() - 0.4).abs() < 1e-15);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.tensor(k).unwrap(), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn shared_param_accumulates() {
        // loss = sum(w) + sum(2w) -> grad 3
        let mut tape = Tape::new();
        let k = key(0, ParamKind::Weight);
        let w = tape.param(k, Tensor2::row_vector(&[1.0, 4.0]));
        let w2 = tape.param(k, Tensor2::row_vector(&[99.0, 99.0]));
        assert_eq!(w, w2);
        let s = tape.scale(w, 2.0);
        let t = tape.add(w, s).unwrap();
        let loss = tape.sum(t);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.tensor(k).unwrap(), &[3.0, 3.0]);
    }
}
