//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records one forward pass. Nodes are appended in evaluation
//! order, so a reverse sweep over the node list is a valid topological order
//! for backpropagation. Sequence tensors use a time-major row layout: row
//! `t * batch + b` holds position `t` of example `b`.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{Mat, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Layout of a padded batch of sequences: `steps` time steps, `batch`
/// examples, and the number of real tokens per example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub steps: usize,
    pub batch: usize,
    pub lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn new(steps: usize, lengths: Vec<usize>) -> Self {
        SeqLayout {
            steps,
            batch: lengths.len(),
            lengths,
        }
    }

    #[inline]
    pub fn row(&self, t: usize, b: usize) -> usize {
        t * self.batch + b
    }

    #[inline]
    pub fn valid(&self, t: usize, b: usize) -> bool {
        t < self.lengths[b]
    }
}

struct LstmSaved {
    order: Vec<usize>,
    acts: Vec<Mat>,
    tanh_c: Vec<Mat>,
    h_prev: Vec<Mat>,
    c_prev: Vec<Mat>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Transpose(NodeId),
    SumAll(NodeId),
    GradReverse(NodeId, f64),
    AddScaledIdentity(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    MulConst(NodeId, Mat),
    AffineCols(NodeId, Vec<f64>),
    LstmSeq {
        xw: NodeId,
        u: NodeId,
        layout: SeqLayout,
        saved: Box<LstmSaved>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        layout: SeqLayout,
        probs: Vec<Vec<f64>>,
    },
    MaskedMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    MaskedMean {
        x: NodeId,
        layout: SeqLayout,
    },
    ColumnNormalize {
        x: NodeId,
        inv_sd: Vec<f64>,
    },
    Inverse(NodeId),
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Mat,
    },
}

struct Node {
    value: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

/// One forward pass. Parameters are read from the borrowed store without
/// copying.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

fn standard(a: Mat) -> Mat {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gauss-Jordan inverse with partial pivoting. `None` when a pivot vanishes.
pub fn invert(a: &Mat) -> Option<Mat> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut work = a.to_owned();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| work[[i, col]].abs().total_cmp(&work[[j, col]].abs()))?;
        let p = work[[pivot, col]];
        if !p.is_finite() || p.abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                work.swap([pivot, j], [col, j]);
                inv.swap([pivot, j], [col, j]);
            }
        }
        let p = work[[col, col]];
        for j in 0..n {
            work[[col, j]] /= p;
            inv[[col, j]] /= p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let factor = work[[i, col]];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                work[[i, j]] -= factor * work[[col, j]];
                inv[[i, j]] -= factor * inv[[col, j]];
            }
        }
    }
    Some(inv)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// A graph without a parameter store, for pure tensor computations.
    pub fn detached() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(pid)) => self.params.expect("parameter node without a store").value(*pid),
            (None, _) => unreachable!("node without a value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Some(standard(value)),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    /// Non-trainable parameters behave as constants.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let store = self.params.expect("graph has no parameter store");
        let needs_grad = store.is_trainable(id);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a` (n x m) plus the row vector `b` (1 x m) broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a 1 x m bias");
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-lambda` on the backward pass.
    pub fn grad_reverse(&mut self, a: NodeId, lambda: f64) -> NodeId {
        let v = self.value(a).clone();
        let ng = self.needs(a);
        self.push(v, Op::GradReverse(a, lambda), ng)
    }

    /// `a + c * I` for square `a`.
    pub fn add_scaled_identity(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        assert_eq!(v.nrows(), v.ncols(), "add_scaled_identity needs a square matrix");
        for i in 0..v.nrows() {
            v[[i, i]] += c;
        }
        let ng = self.needs(a);
        self.push(v, Op::AddScaledIdentity(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let v = self.value(a).slice(s![.., lo..hi]).to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceCols(a, lo, hi), ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let v = self.value(a).slice(s![lo..hi, ..]).to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceRows(a, lo, hi), ng)
    }

    /// Row lookup into `table` (embedding gather).
    pub fn gather_rows(&mut self, table: NodeId, rows: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let mut v = Array2::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&t.row(r));
        }
        let ng = self.needs(table);
        self.push(v, Op::GatherRows(table, rows), ng)
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, c: Mat) -> NodeId {
        let v = self.value(a) * &c;
        let ng = self.needs(a);
        self.push(v, Op::MulConst(a, c), ng)
    }

    /// `(a - shift) * scale` per column, with constant shift and scale.
    pub fn affine_cols(&mut self, a: NodeId, shift: &[f64], scale: &[f64]) -> NodeId {
        let mut v = self.value(a).clone();
        assert_eq!(v.ncols(), shift.len());
        for mut row in v.rows_mut() {
            for j in 0..row.len() {
                row[j] = (row[j] - shift[j]) * scale[j];
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::AffineCols(a, scale.to_vec()), ng)
    }

    /// Runs an LSTM over a padded sequence batch.
    ///
    /// `xw` holds the input projections plus bias for every position,
    /// `(steps * batch) x 4h`, with gate blocks ordered input, forget, cell,
    /// output. `u` is the `h x 4h` recurrent matrix. Padded positions carry the
    /// state through unchanged and emit zeros, so outputs at real positions do
    /// not depend on the amount of padding. With `reverse` the sequence is read
    /// from its last real token backwards.
    pub fn lstm_seq(&mut self, xw: NodeId, u: NodeId, layout: &SeqLayout, reverse: bool) -> NodeId {
        let xw_v = self.value(xw);
        let u_v = self.value(u);
        let h = u_v.nrows();
        let bsz = layout.batch;
        assert_eq!(u_v.ncols(), 4 * h);
        assert_eq!(xw_v.dim(), (layout.steps * bsz, 4 * h));

        let order: Vec<usize> = if reverse {
            (0..layout.steps).rev().collect()
        } else {
            (0..layout.steps).collect()
        };
        let mut out = Array2::<f64>::zeros((layout.steps * bsz, h));
        let mut h_state = Array2::<f64>::zeros((bsz, h));
        let mut c_state = Array2::<f64>::zeros((bsz, h));
        let mut saved = LstmSaved {
            order: order.clone(),
            acts: Vec::with_capacity(order.len()),
            tanh_c: Vec::with_capacity(order.len()),
            h_prev: Vec::with_capacity(order.len()),
            c_prev: Vec::with_capacity(order.len()),
        };
        for &t in &order {
            let mut pre = h_state.dot(u_v);
            pre += &xw_v.slice(s![t * bsz..(t + 1) * bsz, ..]);
            let mut acts = pre;
            let mut tanh_c = Array2::<f64>::zeros((bsz, h));
            let mut h_new = h_state.clone();
            let mut c_new = c_state.clone();
            for b in 0..bsz {
                if !layout.valid(t, b) {
                    continue;
                }
                let mut a = acts.row_mut(b);
                for j in 0..h {
                    let i_g = sigmoid(a[j]);
                    let f_g = sigmoid(a[h + j]);
                    let g_g = a[2 * h + j].tanh();
                    let o_g = sigmoid(a[3 * h + j]);
                    a[j] = i_g;
                    a[h + j] = f_g;
                    a[2 * h + j] = g_g;
                    a[3 * h + j] = o_g;
                    let c = f_g * c_state[[b, j]] + i_g * g_g;
                    let tc = c.tanh();
                    c_new[[b, j]] = c;
                    tanh_c[[b, j]] = tc;
                    let hv = o_g * tc;
                    h_new[[b, j]] = hv;
                    out[[t * bsz + b, j]] = hv;
                }
            }
            saved.acts.push(acts);
            saved.tanh_c.push(tanh_c);
            saved.h_prev.push(std::mem::replace(&mut h_state, h_new));
            saved.c_prev.push(std::mem::replace(&mut c_state, c_new));
        }
        let ng = self.needs(xw) || self.needs(u);
        self.push(
            out,
            Op::LstmSeq {
                xw,
                u,
                layout: layout.clone(),
                saved: Box::new(saved),
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product self-attention without position
    /// information. Keys at padded positions are excluded; padded query rows
    /// produce zeros.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, layout: &SeqLayout) -> NodeId {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.ncols();
        assert!(
            heads >= 1 && d.is_multiple_of(heads),
            "model width must divide into heads"
        );
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let bsz = layout.batch;
        let mut out = Array2::<f64>::zeros((layout.steps * bsz, d));
        let mut probs = Vec::with_capacity(bsz * heads);
        for b in 0..bsz {
            let len = layout.lengths[b];
            for hd in 0..heads {
                let cols = hd * dk..(hd + 1) * dk;
                let mut p = vec![0.0; len * len];
                for t in 0..len {
                    let qr = qv.row(layout.row(t, b));
                    let mut max = f64::NEG_INFINITY;
                    for s_ in 0..len {
                        let kr = kv.row(layout.row(s_, b));
                        let mut dot = 0.0;
                        for c in cols.clone() {
                            dot += qr[c] * kr[c];
                        }
                        let sc = dot * scale;
                        p[t * len + s_] = sc;
                        max = max.max(sc);
                    }
                    let mut z = 0.0;
                    for s_ in 0..len {
                        let e = (p[t * len + s_] - max).exp();
                        p[t * len + s_] = e;
                        z += e;
                    }
                    let row = layout.row(t, b);
                    for s_ in 0..len {
                        let w = p[t * len + s_] / z;
                        p[t * len + s_] = w;
                        let vr = vv.row(layout.row(s_, b));
                        for c in cols.clone() {
                            out[[row, c]] += w * vr[c];
                        }
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout: layout.clone(),
                probs,
            },
            ng,
        )
    }

    /// Elementwise max over the real positions of each sequence: `batch x d`.
    /// Every sequence must have at least one real position.
    pub fn masked_max(&mut self, x: NodeId, layout: &SeqLayout) -> NodeId {
        let xv = self.value(x);
        let d = xv.ncols();
        let mut out = Array2::<f64>::zeros((layout.batch, d));
        let mut argmax = vec![0usize; layout.batch * d];
        for b in 0..layout.batch {
            assert!(layout.lengths[b] >= 1, "masked_max over an empty sequence");
            for j in 0..d {
                let mut best = layout.row(0, b);
                for t in 1..layout.lengths[b] {
                    let r = layout.row(t, b);
                    if xv[[r, j]] > xv[[best, j]] {
                        best = r;
                    }
                }
                out[[b, j]] = xv[[best, j]];
                argmax[b * d + j] = best;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::MaskedMax { x, argmax }, ng)
    }

    /// Mean over the real positions of each sequence: `batch x d`.
    pub fn masked_mean(&mut self, x: NodeId, layout: &SeqLayout) -> NodeId {
        let xv = self.value(x);
        let d = xv.ncols();
        let mut out = Array2::<f64>::zeros((layout.batch, d));
        for b in 0..layout.batch {
            let len = layout.lengths[b];
            assert!(len >= 1, "masked_mean over an empty sequence");
            let mut row = out.row_mut(b);
            for t in 0..len {
                row += &xv.row(layout.row(t, b));
            }
            row /= len as f64;
        }
        let ng = self.needs(x);
        self.push(
            out,
            Op::MaskedMean {
                x,
                layout: layout.clone(),
            },
            ng,
        )
    }

    /// Per-column standardization over the rows (population standard
    /// deviation). Zero-variance columns become zero.
    pub fn column_normalize(&mut self, x: NodeId) -> NodeId {
        let (out, inv_sd) = normalize_columns(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::ColumnNormalize { x, inv_sd }, ng)
    }

    /// Matrix inverse; non-invertible input yields NaN entries.
    pub fn inverse(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = invert(av).unwrap_or_else(|| Array2::from_elem(av.dim(), f64::NAN));
        let ng = self.needs(a);
        self.push(v, Op::Inverse(a), ng)
    }

    /// `sum_i weights[i] * -log softmax(logits_i)[labels[i]]` as a 1 x 1 node.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize], weights: &[f64]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len());
        assert_eq!(lv.nrows(), weights.len());
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[y]);
        }
        let ng = self.needs(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Backpropagates from the 1 x 1 node `root`.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, g, &mut grads);
        }
        let mut params = HashMap::new();
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = grads[node.0].take() {
                params.insert(pid, g);
            }
        }
        Grads { nodes: grads, params }
    }

    fn backprop_node(&self, i: usize, g: Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let out = node.value.as_ref().expect("interior node has a value");
        let mut acc = |id: NodeId, contrib: Mat| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).t().dot(&g));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    acc(*b, -&g);
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, &g * self.value(*b));
                }
                if self.needs(*b) {
                    acc(*b, &g * self.value(*a));
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                acc(*a, g);
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Tanh(a) => {
                let mut d = g;
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g;
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, standard(g.t().to_owned())),
            Op::SumAll(a) => {
                let dim = self.value(*a).dim();
                acc(*a, Array2::from_elem(dim, g[[0, 0]]));
            }
            Op::GradReverse(a, lambda) => {
                // A zero coefficient cuts the path entirely.
                if *lambda != 0.0 {
                    acc(*a, g * (-*lambda));
                }
            }
            Op::AddScaledIdentity(a) => acc(*a, g),
            Op::ConcatCols(parts) => {
                let mut lo = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.needs(p) {
                        acc(p, g.slice(s![.., lo..lo + w]).to_owned());
                    }
                    lo += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut lo = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.needs(p) {
                        acc(p, g.slice(s![lo..lo + h, ..]).to_owned());
                    }
                    lo += h;
                }
            }
            Op::SliceCols(a, lo, hi) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *lo..*hi]).assign(&g);
                acc(*a, d);
            }
            Op::SliceRows(a, lo, hi) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![*lo..*hi, ..]).assign(&g);
                acc(*a, d);
            }
            Op::GatherRows(table, rows) => {
                let mut d = Array2::zeros(self.value(*table).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dr = d.row_mut(r);
                    dr += &g.row(i);
                }
                acc(*table, d);
            }
            Op::MulConst(a, c) => acc(*a, g * c),
            Op::AffineCols(a, scale) => {
                let mut d = g;
                for mut row in d.rows_mut() {
                    for j in 0..row.len() {
                        row[j] *= scale[j];
                    }
                }
                acc(*a, d);
            }
            Op::LstmSeq { xw, u, layout, saved } => {
                let (dxw, du) = lstm_backward(&g, self.value(*u), layout, saved);
                if self.needs(*xw) {
                    acc(*xw, dxw);
                }
                if self.needs(*u) {
                    acc(*u, du);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    &g,
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    layout,
                    probs,
                );
                if self.needs(*q) {
                    acc(*q, dq);
                }
                if self.needs(*k) {
                    acc(*k, dk);
                }
                if self.needs(*v) {
                    acc(*v, dv);
                }
            }
            Op::MaskedMax { x, argmax } => {
                let mut d = Array2::zeros(self.value(*x).dim());
                let cols = g.ncols();
                for b in 0..g.nrows() {
                    for j in 0..cols {
                        d[[argmax[b * cols + j], j]] += g[[b, j]];
                    }
                }
                acc(*x, d);
            }
            Op::MaskedMean { x, layout } => {
                let mut d = Array2::zeros(self.value(*x).dim());
                for b in 0..layout.batch {
                    let len = layout.lengths[b];
                    let gr = g.row(b).mapv(|v| v / len as f64);
                    for t in 0..len {
                        d.row_mut(layout.row(t, b)).assign(&gr);
                    }
                }
                acc(*x, d);
            }
            Op::ColumnNormalize { x, inv_sd } => {
                let n = g.nrows() as f64;
                let mut d = Array2::zeros(g.dim());
                for j in 0..g.ncols() {
                    if inv_sd[j] == 0.0 {
                        continue;
                    }
                    let gc = g.column(j);
                    let yc = out.column(j);
                    let mean_g = gc.sum() / n;
                    let mean_gy = gc.iter().zip(yc.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for r in 0..g.nrows() {
                        d[[r, j]] = inv_sd[j] * (gc[r] - mean_g - yc[r] * mean_gy);
                    }
                }
                acc(*x, d);
            }
            Op::Inverse(a) => {
                let yt = out.t();
                acc(*a, -(yt.dot(&g).dot(&yt)));
            }
            Op::SoftmaxXent {
                logits,
                labels,
                weights,
                probs,
            } => {
                let scale = g[[0, 0]];
                let mut d = probs.clone();
                for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                    d[[i, y]] -= 1.0;
                    let mut row = d.row_mut(i);
                    row *= w * scale;
                }
                acc(*logits, d);
            }
        }
    }
}

/// Gradients from one backward sweep.
pub struct Grads {
    nodes: Vec<Option<Mat>>,
    params: HashMap<ParamId, Mat>,
}

impl Grads {
    /// Gradient of a leaf created with [`Graph::input`].
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Mat> {
        self.params
    }
}

pub(crate) fn softmax_rows(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let z: f64 = row.sum();
        row /= z;
    }
    p
}

/// Standardizes each column; returns the result and `1/sd` per column, with
/// zero marking a degenerate column.
pub(crate) fn normalize_columns(x: &Mat) -> (Mat, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut out = Array2::zeros(x.dim());
    let mut inv_sd = vec![0.0; x.ncols()];
    for j in 0..x.ncols() {
        let col = x.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd <= 1e-12 * (1.0 + mean.abs()) {
            continue;
        }
        inv_sd[j] = 1.0 / sd;
        for r in 0..x.nrows() {
            out[[r, j]] = (col[r] - mean) / sd;
        }
    }
    (out, inv_sd)
}

fn lstm_backward(g: &Mat, u: &Mat, layout: &SeqLayout, saved: &LstmSaved) -> (Mat, Mat) {
    let h = u.nrows();
    let bsz = layout.batch;
    let mut dxw = Array2::<f64>::zeros((layout.steps * bsz, 4 * h));
    let mut du = Array2::<f64>::zeros((h, 4 * h));
    let mut dh_carry = Array2::<f64>::zeros((bsz, h));
    let mut dc_carry = Array2::<f64>::zeros((bsz, h));
    for k in (0..saved.order.len()).rev() {
        let t = saved.order[k];
        let acts = &saved.acts[k];
        let tanh_c = &saved.tanh_c[k];
        let c_prev = &saved.c_prev[k];
        let mut dpre = Array2::<f64>::zeros((bsz, 4 * h));
        for b in 0..bsz {
            if !layout.valid(t, b) {
                continue;
            }
            for j in 0..h {
                let i_g = acts[[b, j]];
                let f_g = acts[[b, h + j]];
                let g_g = acts[[b, 2 * h + j]];
                let o_g = acts[[b, 3 * h + j]];
                let tc = tanh_c[[b, j]];
                let dh = g[[t * bsz + b, j]] + dh_carry[[b, j]];
                let dc = dc_carry[[b, j]] + dh * o_g * (1.0 - tc * tc);
                dpre[[b, j]] = dc * g_g * i_g * (1.0 - i_g);
                dpre[[b, h + j]] = dc * c_prev[[b, j]] * f_g * (1.0 - f_g);
                dpre[[b, 2 * h + j]] = dc * i_g * (1.0 - g_g * g_g);
                dpre[[b, 3 * h + j]] = dh * tc * o_g * (1.0 - o_g);
                dc_carry[[b, j]] = dc * f_g;
            }
        }
        du += &saved.h_prev[k].t().dot(&dpre);
        let dh_prev = dpre.dot(&u.t());
        for b in 0..bsz {
            if layout.valid(t, b) {
                dh_carry.row_mut(b).assign(&dh_prev.row(b));
            }
        }
        dxw.slice_mut(s![t * bsz..(t + 1) * bsz, ..]).assign(&dpre);
    }
    (dxw, du)
}

fn attention_backward(
    g: &Mat,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    heads: usize,
    layout: &SeqLayout,
    probs: &[Vec<f64>],
) -> (Mat, Mat, Mat) {
    let d = q.ncols();
    let dk_w = d / heads;
    let scale = 1.0 / (dk_w as f64).sqrt();
    let mut dq = Array2::<f64>::zeros(q.dim());
    let mut dk = Array2::<f64>::zeros(k.dim());
    let mut dv = Array2::<f64>::zeros(v.dim());
    for b in 0..layout.batch {
        let len = layout.lengths[b];
        for hd in 0..heads {
            let cols = hd * dk_w..(hd + 1) * dk_w;
            let p = &probs[b * heads + hd];
            let mut dp = vec![0.0; len];
            for t in 0..len {
                let rt = layout.row(t, b);
                let mut dot_pdp = 0.0;
                for s_ in 0..len {
                    let rs = layout.row(s_, b);
                    let w = p[t * len + s_];
                    let mut acc = 0.0;
                    for c in cols.clone() {
                        acc += g[[rt, c]] * v[[rs, c]];
                        dv[[rs, c]] += w * g[[rt, c]];
                    }
                    dp[s_] = acc;
                    dot_pdp += w * acc;
                }
                for s_ in 0..len {
                    let rs = layout.row(s_, b);
                    let ds = p[t * len + s_] * (dp[s_] - dot_pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in cols.clone() {
                        dq[[rt, c]] += ds * k[[rs, c]];
                        dk[[rs, c]] += ds * q[[rt, c]];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
