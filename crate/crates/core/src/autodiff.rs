//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every recorded node, including
//! parameter leaves pulled in through [`Graph::param`].

use std::collections::HashMap;

use crate::params::{ParamGrads, ParamId, ParameterStore};
use crate::tensor::{matmul_acc, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batched multi-head attention cache (one entry per batch, head, query, key).
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    batches: usize,
    tq: usize,
    tk: usize,
    key_mask: Vec<bool>,
    weights: Vec<f64>,
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Tan(Var),
    LnClamped(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    GroupMean(Var, Vec<Vec<usize>>),
    Attention(Box<AttentionCache>),
    SoftmaxRows(Var),
    RowNorm(Var),
    SmoothL1(Var),
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape for one forward evaluation.
pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParameterStore>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// A graph without parameters (only [`Graph::input`] leaves).
    pub fn new() -> Self {
        Self { nodes: Vec::new(), store: None, param_vars: HashMap::new() }
    }

    pub fn with_params(store: &'s ParameterStore) -> Self {
        Self { nodes: Vec::new(), store: Some(store), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store.expect("graph has no parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.store().value(id).clone();
        let v = self.push(t, Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        assert_eq!(bv.rank(), 2, "matmul rhs must be a matrix");
        assert_eq!(bv.shape()[0], k, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let m = bv.cols();
        let mut out = vec![0.0; n * m];
        matmul_acc(av.data(), bv.data(), &mut out, n, k, m);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        self.push(Tensor::new(shape, out), Op::MatMul(a, b))
    }

    /// `x + b` with `b` broadcast across rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let m = xv.cols();
        assert_eq!(bv.len(), m, "bias length {} vs width {}", bv.len(), m);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise shapes {:?} vs {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::sin);
        self.push(t, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::cos);
        self.push(t, Op::Cos(a))
    }

    pub fn tan(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tan);
        self.push(t, Op::Tan(a))
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|x| x.max(floor).ln());
        self.push(t, Op::LnClamped(a, floor))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat_cols row mismatch");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = self.value(parts[0]).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        self.push(Tensor::new(shape, data), Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start < end && end <= av.cols());
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        self.push(Tensor::new(vec![rows, end - start], data), Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        self.push(Tensor::new(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        assert!(start < end && end <= av.rows());
        let data = av.data()[start * cols..end * cols].to_vec();
        self.push(Tensor::new(vec![end - start, cols], data), Op::SliceRows(a, start))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        assert!(!index.is_empty());
        let av = self.value(a);
        let cols = av.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(av.row(i));
        }
        self.push(Tensor::new(vec![index.len(), cols], data), Op::GatherRows(a, index))
    }

    /// Output row `s` is the channel-wise max over input rows `segments[s]`.
    /// Ties resolve to the earliest listed row.
    pub fn segment_max(&mut self, a: Var, segments: &[Vec<usize>]) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = Vec::with_capacity(segments.len() * cols);
        let mut argmax = Vec::with_capacity(segments.len() * cols);
        for seg in segments {
            assert!(!seg.is_empty(), "segment_max over an empty segment");
            for c in 0..cols {
                let mut best = seg[0];
                let mut best_v = av.at(best, c);
                for &r in &seg[1..] {
                    let v = av.at(r, c);
                    if v > best_v {
                        best_v = v;
                        best = r;
                    }
                }
                data.push(best_v);
                argmax.push(best);
            }
        }
        let t = Tensor::new(vec![segments.len(), cols], data);
        self.push(t, Op::SegmentMax(a, argmax))
    }

    /// Output row `g` is the mean of input rows `groups[g]`.
    pub fn group_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = vec![0.0; groups.len() * cols];
        for (g, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "group_mean over an empty group");
            let out = &mut data[g * cols..(g + 1) * cols];
            for &r in rows {
                for (o, x) in out.iter_mut().zip(av.row(r)) {
                    *o += x;
                }
            }
            let inv = 1.0 / rows.len() as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::new(vec![groups.len(), cols], data);
        self.push(t, Op::GroupMean(a, groups))
    }

    /// Batched scaled dot-product attention on already-projected inputs.
    ///
    /// `q` holds `batches * tq` rows and `k`, `v` hold `batches * tk` rows, all
    /// of width `d`, split into `heads` contiguous column blocks. `key_mask`
    /// flags valid keys (`batches * tk`). A batch with no valid key yields zero
    /// rows; masked keys are never read.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batches: usize,
        tq: usize,
        tk: usize,
        key_mask: Vec<bool>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(qv.rows(), batches * tq, "query rows");
        assert_eq!(kv.rows(), batches * tk, "key rows");
        assert_eq!(vv.rows(), batches * tk, "value rows");
        assert_eq!(key_mask.len(), batches * tk, "mask length");
        assert!(heads > 0 && d % heads == 0, "heads must divide model dim");
        let dk = d / heads;
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; batches * tq * d];
        let mut weights = vec![0.0; batches * heads * tq * tk];
        let mut logits = vec![0.0; tk];
        for b in 0..batches {
            let mask = &key_mask[b * tk..(b + 1) * tk];
            if !mask.iter().any(|&m| m) {
                continue;
            }
            for h in 0..heads {
                let cs = h * dk;
                for i in 0..tq {
                    let qrow = &qv.row(b * tq + i)[cs..cs + dk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        if !mask[j] {
                            continue;
                        }
                        let krow = &kv.row(b * tk + j)[cs..cs + dk];
                        let s = dot(qrow, krow) * inv_sqrt;
                        logits[j] = s;
                        max = max.max(s);
                    }
                    let wbase = ((b * heads + h) * tq + i) * tk;
                    let mut z = 0.0;
                    for j in 0..tk {
                        if mask[j] {
                            let e = (logits[j] - max).exp();
                            weights[wbase + j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out[(b * tq + i) * d + cs..(b * tq + i) * d + cs + dk];
                    for j in 0..tk {
                        if !mask[j] {
                            continue;
                        }
                        let w = weights[wbase + j] / z;
                        weights[wbase + j] = w;
                        let vrow = &vv.row(b * tk + j)[cs..cs + dk];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let cache = AttentionCache { q, k, v, heads, batches, tq, tk, key_mask, weights };
        self.push(Tensor::new(vec![batches * tq, d], out), Op::Attention(Box::new(cache)))
    }

    /// Attention weights of an attention node laid out `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.weights),
            _ => None,
        }
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for r in 0..t.rows() {
            softmax_in_place(t.row_mut(r));
        }
        self.push(t, Op::SoftmaxRows(a))
    }

    /// Euclidean norm of every row, shape `[rows, 1]`. The gradient at a zero
    /// row is taken as zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<f64> =
            (0..av.rows()).map(|r| av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let n = data.len();
        self.push(Tensor::new(vec![n, 1], data), Op::RowNorm(a))
    }

    /// Elementwise smooth-L1 (Huber with threshold 1).
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let t = self.value(a).map(smooth_l1);
        self.push(t, Op::SmoothL1(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a).clone().reshape(shape);
        self.push(t, Op::Reshape(a))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, param_vars: self.param_vars.clone() }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                // dA = G · Bᵀ
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    let grow = &g.data()[i * m..(i + 1) * m];
                    for p in 0..k {
                        da[i * k + p] = dot(grow, &bv.data()[p * m..(p + 1) * m]);
                    }
                }
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    let grow = &g.data()[i * m..(i + 1) * m];
                    for p in 0..k {
                        let a_ip = av.data()[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for (d, gg) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *d += a_ip * gg;
                        }
                    }
                }
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::AddRow(x, b) => {
                accumulate(grads, *x, g.shape(), g.data().to_vec());
                let m = g.cols();
                let mut db = vec![0.0; m];
                for r in 0..g.rows() {
                    for (d, gg) in db.iter_mut().zip(g.row(r)) {
                        *d += gg;
                    }
                }
                accumulate(grads, *b, self.value(*b).shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, self.value(*a).shape(), g.data().to_vec());
                accumulate(grads, *b, self.value(*b).shape(), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, self.value(*a).shape(), g.data().to_vec());
                accumulate(grads, *b, self.value(*b).shape(), g.data().iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, g.shape(), g.data().iter().map(|x| x * s).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(grads, *a, self.value(*a).shape(), g.data().to_vec());
            }
            Op::Relu(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gg, y)| if *y > 0.0 { *gg } else { 0.0 });
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gg, y)| gg * (1.0 - y * y));
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gg, y)| gg * y * (1.0 - y));
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::Sin(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(gg, x)| gg * x.cos());
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::Cos(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(gg, x)| -gg * x.sin());
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::Tan(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gg, y)| gg * (1.0 + y * y));
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::LnClamped(a, floor) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gg, x)| if *x > *floor { gg / x } else { 0.0 });
                accumulate(grads, *a, g.shape(), d.collect());
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    accumulate(grads, p, pv.shape(), d);
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = vec![0.0; av.len()];
                let (cols, w) = (av.cols(), g.cols());
                for r in 0..g.rows() {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, av.shape(), d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    accumulate(grads, p, pv.shape(), g.data()[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut d = vec![0.0; av.len()];
                let off = start * av.cols();
                d[off..off + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, av.shape(), d);
            }
            Op::GatherRows(a, index) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut d = vec![0.0; av.len()];
                for (i, &src) in index.iter().enumerate() {
                    for (dd, gg) in d[src * cols..(src + 1) * cols].iter_mut().zip(g.row(i)) {
                        *dd += gg;
                    }
                }
                accumulate(grads, *a, av.shape(), d);
            }
            Op::SegmentMax(a, argmax) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut d = vec![0.0; av.len()];
                for (flat, &src) in argmax.iter().enumerate() {
                    let c = flat % cols;
                    d[src * cols + c] += g.data()[flat];
                }
                accumulate(grads, *a, av.shape(), d);
            }
            Op::GroupMean(a, groups) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut d = vec![0.0; av.len()];
                for (gi, rows) in groups.iter().enumerate() {
                    let inv = 1.0 / rows.len() as f64;
                    for &r in rows {
                        for (dd, gg) in d[r * cols..(r + 1) * cols].iter_mut().zip(g.row(gi)) {
                            *dd += gg * inv;
                        }
                    }
                }
                accumulate(grads, *a, av.shape(), d);
            }
            Op::Attention(c) => self.backprop_attention(c, g, grads),
            Op::SoftmaxRows(a) => {
                let mut d = vec![0.0; out.len()];
                let cols = out.cols();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let s = dot(y, gr);
                    for c in 0..cols {
                        d[r * cols + c] = y[c] * (gr[c] - s);
                    }
                }
                accumulate(grads, *a, self.value(*a).shape(), d);
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut d = vec![0.0; av.len()];
                for r in 0..av.rows() {
                    let n = out.data()[r];
                    if n > 0.0 {
                        let scale = g.data()[r] / n;
                        for (dd, x) in d[r * cols..(r + 1) * cols].iter_mut().zip(av.row(r)) {
                            *dd = scale * x;
                        }
                    }
                }
                accumulate(grads, *a, av.shape(), d);
            }
            Op::SmoothL1(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(gg, x)| gg * smooth_l1_grad(*x));
                accumulate(grads, *a, x.shape(), d.collect());
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                let s = g.data()[0];
                accumulate(grads, *a, av.shape(), vec![s; av.len()]);
            }
        }
    }

    fn backprop_attention(&self, c: &AttentionCache, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qv.cols();
        let dk = d / c.heads;
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        let (tq, tk) = (c.tq, c.tk);
        let mut dq = vec![0.0; qv.len()];
        let mut dkey = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dw = vec![0.0; tk];
        for b in 0..c.batches {
            let mask = &c.key_mask[b * tk..(b + 1) * tk];
            if !mask.iter().any(|&m| m) {
                continue;
            }
            for h in 0..c.heads {
                let cs = h * dk;
                for i in 0..tq {
                    let qi = b * tq + i;
                    let grow = &g.row(qi)[cs..cs + dk];
                    let wbase = ((b * c.heads + h) * tq + i) * tk;
                    let w = &c.weights[wbase..wbase + tk];
                    let mut wdw = 0.0;
                    for j in 0..tk {
                        if !mask[j] {
                            continue;
                        }
                        let kj = b * tk + j;
                        let vrow = &vv.row(kj)[cs..cs + dk];
                        dw[j] = dot(grow, vrow);
                        wdw += w[j] * dw[j];
                        for (dd, gg) in dv[kj * d + cs..kj * d + cs + dk].iter_mut().zip(grow) {
                            *dd += w[j] * gg;
                        }
                    }
                    let qrow = &qv.row(qi)[cs..cs + dk];
                    for j in 0..tk {
                        if !mask[j] {
                            continue;
                        }
                        let ds = w[j] * (dw[j] - wdw) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = b * tk + j;
                        let krow = &kv.row(kj)[cs..cs + dk];
                        for (dd, kk) in dq[qi * d + cs..qi * d + cs + dk].iter_mut().zip(krow) {
                            *dd += ds * kk;
                        }
                        for (dd, qq) in dkey[kj * d + cs..kj * d + cs + dk].iter_mut().zip(qrow) {
                            *dd += ds * qq;
                        }
                    }
                }
            }
        }
        accumulate(grads, c.q, qv.shape(), dq);
        accumulate(grads, c.k, kv.shape(), dkey);
        accumulate(grads, c.v, vv.shape(), dv);
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), data)),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient for a node, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients aligned with the store; untouched parameters are zero.
    pub fn param_grads(&self, store: &ParameterStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &self.grads[v.0] {
                out.get_mut(id).add_assign(g);
            }
        }
        out
    }
}
