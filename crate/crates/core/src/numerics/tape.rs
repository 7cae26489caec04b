//! Reverse-mode differentiation over a linear tape.
//!
//! Every node owns its forward value. `backward` walks the tape from the root
//! towards the leaves, accumulating adjoints only for nodes that depend on a
//! parameter.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use super::{layer_norm_row, sigmoid, softmax_in_place, LOG_FLOOR};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Feed-forward nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

enum Op<F> {
    Constant,
    Param(usize),
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    AddRow { x: NodeId, row: NodeId },
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: F },
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    Gather { table: NodeId, ids: Vec<usize> },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<F>, rstd: Vec<F> },
    Sigmoid(NodeId),
    Activation { x: NodeId, kind: Activation },
    Log(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Attention(Box<AttentionSaved<F>>),
    Dropout { x: NodeId, mask: Vec<F> },
    Reshape(NodeId),
}

struct AttentionSaved<F> {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    probs: Vec<F>,
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Accumulated partial derivatives, one tensor per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord<F> {
    pub grads: Vec<Tensor<F>>,
}

impl<F: Scalar> GradientRecord<F> {
    pub fn zeros_like(params: &[Tensor<F>]) -> Self {
        Self {
            grads: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &GradientRecord<F>, scale: F) {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            for (a, b) in g.data_mut().iter_mut().zip(o.data()) {
                *a = *a + scale * *b;
            }
        }
    }

    pub fn global_norm(&self) -> F {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<F>()
            .sqrt()
    }

    pub fn scale(&mut self, s: F) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

/// Records a differentiable computation.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<F: Scalar>(what: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Constant, &[])
    }

    /// A trainable leaf; `index` is its slot in the resulting [`GradientRecord`].
    pub fn param(&mut self, index: usize, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Param(index), &[])
    }

    /// `a·b`, or `a·bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n, bs) = if trans_b {
            (bv.cols(), bv.rows(), (1, bv.cols()))
        } else {
            (bv.rows(), bv.cols(), (bv.cols(), 1))
        };
        if k != bk {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}{}",
                av.shape(),
                bv.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, F::one(), av.data(), (k, 1), bv.data(), bs, F::zero(), &mut out, (n, 1));
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        if rv.len() != c {
            return Err(Error::shape(format!(
                "add_row: {:?} + {:?}",
                xv.shape(),
                rv.shape()
            )));
        }
        let r = rv.data();
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| *a + *b))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { x, row }, &[x, row]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: F, shift: F) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        self.affine(x, s, F::zero())
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of nothing"));
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::shape(format!(
                    "concat_rows: width {} vs {c}",
                    v.cols()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(rows, c, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::shape(format!(
                "slice_rows {start}..{end} of {} rows",
                xv.rows()
            )));
        }
        let value = xv.slice_rows(start, end);
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= tv.rows() {
                return Err(Error::domain(format!(
                    "index {id} outside table of {} rows",
                    tv.rows()
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::matrix(ids.len(), c, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(Error::domain("softmax over an empty axis"));
        }
        let mut value = xv.clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row, None);
        }
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: F) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape(format!(
                "layer_norm: width {c}, gain {}, bias {}",
                gv.len(),
                bv.len()
            )));
        }
        let rows = xv.rows();
        let mut out = vec![F::zero(); rows * c];
        let mut xhat = vec![F::zero(); rows * c];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let xr = xv.row(r);
            let (mean, rs) = layer_norm_row(xr, gv.data(), bv.data(), eps, &mut out[r * c..(r + 1) * c]);
            rstd[r] = rs;
            for (h, &v) in xhat[r * c..(r + 1) * c].iter_mut().zip(xr) {
                *h = (v - mean) * rs;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(F::zero()),
                Activation::Gelu => {
                    let inner = F::lit(GELU_C) * (v + F::lit(0.044715) * v * v * v);
                    F::lit(0.5) * v * (F::one() + inner.tanh())
                }
            })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Activation { x, kind }, &[x])
    }

    /// Elementwise natural log, input clamped below at `LOG_FLOOR`.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let floor = F::lit(LOG_FLOOR);
        let data = xv.data().iter().map(|&v| v.max(floor).ln()).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Log(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = F::from_usize(xv.len().max(1)).unwrap();
        let value = Tensor::scalar(xv.data().iter().copied().sum::<F>() / n);
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum::<F>());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let data = self.value(x).data().to_vec();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Multiplies by a fixed 0 / `1/(1-p)` mask.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<F>) -> Result<NodeId> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape("dropout mask length"));
        }
        let data = xv.data().iter().zip(&mask).map(|(a, b)| *a * *b).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Scaled dot-product attention split across `heads`.
    ///
    /// `q` is `Lq×d`, `k` and `v` are `Lk×d`. Keys with `key_mask[j] == false`
    /// receive exactly zero weight; queries with `query_mask[i] == false`
    /// produce a zero row.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        query_mask: &[bool],
        key_mask: &[bool],
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (lq, lk) = (qv.rows(), kv.rows());
        if heads == 0 || d % heads != 0 || kv.cols() != d || vv.cols() != d || vv.rows() != lk {
            return Err(Error::shape(format!(
                "attention: q {:?}, k {:?}, v {:?}, heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if query_mask.len() != lq || key_mask.len() != lk {
            return Err(Error::shape("attention mask length"));
        }
        let dh = d / heads;
        let scale = F::from_usize(dh).unwrap().sqrt().recip();
        let mut probs = vec![F::zero(); heads * lq * lk];
        let mut out = vec![F::zero(); lq * d];
        for h in 0..heads {
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            F::gemm(
                lq,
                dh,
                lk,
                scale,
                &qv.data()[h * dh..],
                (d, 1),
                &kv.data()[h * dh..],
                (1, d),
                F::zero(),
                p,
                (lk, 1),
            );
            for (i, row) in p.chunks_mut(lk).enumerate() {
                if query_mask[i] {
                    softmax_in_place(row, Some(key_mask));
                } else {
                    row.iter_mut().for_each(|x| *x = F::zero());
                }
            }
            F::gemm(
                lq,
                lk,
                dh,
                F::one(),
                p,
                (lk, 1),
                &vv.data()[h * dh..],
                (d, 1),
                F::zero(),
                &mut out[h * dh..],
                (d, 1),
            );
        }
        let value = Tensor::matrix(lq, d, out)?;
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            probs,
        };
        Ok(self.push(value, Op::Attention(Box::new(saved)), &[q, k, v]))
    }

    /// Adjoints of every node with respect to the scalar `root`.
    fn adjoints(&self, root: NodeId) -> Result<Vec<Option<Vec<F>>>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            if let Op::Param(_) = node.op {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    /// Gradient of the scalar `root` with respect to every registered
    /// parameter. `params` supplies the shapes of the record's slots.
    pub fn backward(&self, root: NodeId, params: &[Tensor<F>]) -> Result<GradientRecord<F>> {
        let mut record = GradientRecord::zeros_like(params);
        self.backward_into(root, &mut record, F::one())?;
        Ok(record)
    }

    /// Adds `scale` times the gradient of `root` into `record`.
    pub fn backward_into(&self, root: NodeId, record: &mut GradientRecord<F>, scale: F) -> Result<()> {
        let adj = self.adjoints(root)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(slot) = node.op {
                if let Some(g) = &adj[i] {
                    let dst = record
                        .grads
                        .get_mut(slot)
                        .ok_or_else(|| Error::shape(format!("no gradient slot {slot}")))?;
                    if dst.len() != g.len() {
                        return Err(Error::shape(format!("gradient slot {slot} has the wrong size")));
                    }
                    for (a, b) in dst.data_mut().iter_mut().zip(g) {
                        *a = *a + scale * *b;
                    }
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], id: NodeId, delta: Vec<F>) {
        if !self.wants(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<F>>], id: NodeId, f: impl FnOnce(&mut [F])) {
        if !self.wants(id) {
            return;
        }
        let len = self.value(id).len();
        let g = grads[id.0].get_or_insert_with(|| vec![F::zero(); len]);
        f(g);
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if self.wants(*a) {
                    // dA = G·Bᵀ (b is k×n) or G·B (b is n×k)
                    let bs = if *trans_b { (k, 1) } else { (1, n) };
                    self.acc_with(grads, *a, |ga| {
                        F::gemm(m, n, k, F::one(), g, (n, 1), bv.data(), bs, F::one(), ga, (k, 1))
                    });
                }
                if self.wants(*b) {
                    if *trans_b {
                        // dB (n×k) = Gᵀ·A
                        self.acc_with(grads, *b, |gb| {
                            F::gemm(n, m, k, F::one(), g, (1, n), av.data(), (k, 1), F::one(), gb, (k, 1))
                        });
                    } else {
                        // dB (k×n) = Aᵀ·G
                        self.acc_with(grads, *b, |gb| {
                            F::gemm(k, m, n, F::one(), av.data(), (1, k), g, (n, 1), F::one(), gb, (n, 1))
                        });
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::AddRow { x, row } => {
                self.acc(grads, *x, g.to_vec());
                let c = node.value.cols();
                self.acc_with(grads, *row, |gr| {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(a, b)| *a = *a + *b);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.acc(grads, *a, g.iter().zip(bv).map(|(g, b)| *g * *b).collect());
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.iter().zip(av).map(|(g, a)| *g * *a).collect());
                }
            }
            Op::Affine { x, scale } => {
                self.acc(grads, *x, g.iter().map(|&v| v * *scale).collect());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let off = start * c;
                self.acc_with(grads, *x, |gx| {
                    gx[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a = *a + *b);
                });
            }
            Op::Gather { table, ids } => {
                let c = node.value.cols();
                self.acc_with(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(a, b)| *a = *a + *b);
                    }
                });
            }
            Op::Softmax { x } => {
                let c = node.value.cols();
                let mut dx = vec![F::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: F = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    self.acc_with(grads, *gain, |gg| {
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ((a, &gi), &hi) in gg.iter_mut().zip(gr).zip(hr) {
                                *a = *a + gi * hi;
                            }
                        }
                    });
                }
                if self.wants(*bias) {
                    self.acc_with(grads, *bias, |gb| {
                        for gr in g.chunks(c) {
                            gb.iter_mut().zip(gr).for_each(|(a, b)| *a = *a + *b);
                        }
                    });
                }
                if self.wants(*x) {
                    let n = F::from_usize(c).unwrap();
                    let mut dx = vec![F::zero(); g.len()];
                    for (r, ((dxr, gr), hr)) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        // dxhat = g * gain
                        let mut sum_d = F::zero();
                        let mut sum_dh = F::zero();
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            sum_d = sum_d + dh;
                            sum_dh = sum_dh + dh * hr[j];
                        }
                        let mean_d = sum_d / n;
                        let mean_dh = sum_dh / n;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dxr[j] = rstd[r] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Sigmoid(x) => {
                self.acc(
                    grads,
                    *x,
                    g.iter().zip(y).map(|(&g, &s)| g * s * (F::one() - s)).collect(),
                );
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x).data();
                let dx = match kind {
                    Activation::Relu => g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                        .collect(),
                    Activation::Gelu => g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| {
                            let c = F::lit(GELU_C);
                            let a = F::lit(0.044715);
                            let inner = c * (v + a * v * v * v);
                            let t = inner.tanh();
                            let dinner = c * (F::one() + F::lit(3.0) * a * v * v);
                            let d = F::lit(0.5) * (F::one() + t)
                                + F::lit(0.5) * v * (F::one() - t * t) * dinner;
                            g * d
                        })
                        .collect(),
                };
                self.acc(grads, *x, dx);
            }
            Op::Log(x) => {
                let floor = F::lit(LOG_FLOOR);
                let xv = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v >= floor { g / v } else { F::zero() })
                        .collect(),
                );
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = g[0] / F::from_usize(n.max(1)).unwrap();
                self.acc(grads, *x, vec![d; n]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, g.iter().zip(mask).map(|(a, b)| *a * *b).collect());
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
        }
    }

    fn attention_backward(&self, s: &AttentionSaved<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let (qv, kv, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let d = qv.cols();
        let (lq, lk) = (qv.rows(), kv.rows());
        let dh = d / s.heads;
        let scale = F::from_usize(dh).unwrap().sqrt().recip();
        let mut dq = vec![F::zero(); lq * d];
        let mut dk = vec![F::zero(); lk * d];
        let mut dv = vec![F::zero(); lk * d];
        let mut dp = vec![F::zero(); lq * lk];
        for h in 0..s.heads {
            let p = &s.probs[h * lq * lk..(h + 1) * lq * lk];
            // dP = G_h · V_hᵀ
            F::gemm(lq, dh, lk, F::one(), &g[h * dh..], (d, 1), &vv.data()[h * dh..], (1, d), F::zero(), &mut dp, (lk, 1));
            // dV_h = Pᵀ · G_h
            F::gemm(lk, lq, dh, F::one(), p, (1, lk), &g[h * dh..], (d, 1), F::zero(), &mut dv[h * dh..], (d, 1));
            // dS = P ⊙ (dP − rowdot(dP, P))
            for (dpr, pr) in dp.chunks_mut(lk).zip(p.chunks(lk)) {
                let dot: F = dpr.iter().zip(pr).map(|(a, b)| *a * *b).sum();
                for (x, &pv) in dpr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            F::gemm(lq, lk, dh, scale, &dp, (lk, 1), &kv.data()[h * dh..], (d, 1), F::zero(), &mut dq[h * dh..], (d, 1));
            F::gemm(lk, lq, dh, scale, &dp, (1, lk), &qv.data()[h * dh..], (d, 1), F::zero(), &mut dk[h * dh..], (d, 1));
        }
        self.acc(grads, s.q, dq);
        self.acc(grads, s.k, dk);
        self.acc(grads, s.v, dv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_param(t: &mut Tape<f64>, v: &[f64]) -> NodeId {
        t.param(0, Tensor::new(vec![v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = vec_param(&mut t, &[1.0, 2.0, 3.0]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let params = [t.value(x).clone()];
        let g = t.backward(loss, &params).unwrap();
        assert_eq!(g.grads[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let w = t.param(0, Tensor::scalar(0.0f64));
        let s = t.sigmoid(w);
        let params = [Tensor::scalar(0.0)];
        let g = t.backward(s, &params).unwrap();
        assert_eq!(g.grads[0].item(), 0.25);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = vec_param(&mut t, &[1.0, 2.0]);
        let params = [t.value(x).clone()];
        assert!(matches!(t.backward(x, &params), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut t = Tape::<f64>::new();
        let q = t.constant(Tensor::from_fn(2, 4, |r, c| (r + c) as f64 * 0.1));
        let k = t.constant(Tensor::from_fn(3, 4, |r, c| (r * c) as f64 * 0.2));
        let v = t.constant(Tensor::from_fn(3, 4, |r, _| r as f64));
        let out = t
            .attention(q, k, v, 2, &[true, false], &[true, true, false])
            .unwrap();
        let o = t.value(out);
        // value rows are 0,1,2; masked key (value 2) never contributes
        assert!(o.row(0).iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(o.row(1).iter().all(|&x| x == 0.0));
    }
}
