//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations append nodes to a [`Graph`]; `backward` walks the tape in
//! reverse and accumulates gradients with the chain rule. A graph instance
//! is single-owner for the duration of a forward/backward pass; distinct
//! instances may run on distinct threads.
//!
//! All reductions accumulate in row-major input order so that results are
//! bit-reproducible across runs and thread counts.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;
use std::sync::Arc;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse row-wise weighted combination, CSR layout. Row `i` of the output
/// is `sum(weight[j] * input[index[j]] for j in offsets[i]..offsets[i+1])`.
#[derive(Debug, Clone)]
pub struct GatherMap {
    pub offsets: Vec<usize>,
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
}

impl GatherMap {
    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Relu { a: Var },
    MeanAll { a: Var },
    MeanAxis { a: Var, pre: usize, axis: usize, post: usize },
    Concat { parts: Vec<Var> },
    StackRows { parts: Vec<Var>, cols: usize },
    L2Norm { a: Var },
    Gather { a: Var, index: Arc<Vec<usize>> },
    WeightedGather { a: Var, map: Arc<GatherMap> },
    Reshape { a: Var },
    Conv2dSame { input: Var, kernel: Var, in_ch: usize, out_ch: usize, h: usize, w: usize, k: usize },
    AvgPool2 { a: Var, ch: usize, h: usize, w: usize },
    AddChannelBias { a: Var, bias: Var, channels: usize, inner: usize },
    CeRows { logits: Var, targets: Arc<Vec<usize>>, rows: usize, cols: usize },
}

/// Wengert tape: forward values plus enough structure to replay in reverse.
pub struct Graph<T: Scalar> {
    ops: Vec<Op>,
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

const L2_EPS: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires: bool) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.ops.len() - 1)
    }

    /// Constant input; no gradient flows to it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable input; `grad` is populated by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_raw(self.values[v.0].shape().to_vec(), g.clone()))
    }

    // ── op constructors ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.values[a.0].shape();
        let sb = self.values[b.0].shape();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects 2-d operands, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                sa, sb
            )));
        }
        let va = self.values[a.0].values();
        let vb = self.values[b.0].values();
        let out = matmul_raw(va, vb, m, k, n);
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Op::Matmul { a, b, m, k, n }, Tensor::from_raw(vec![m, n], out), req))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose expects 2-d, got {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.values[a.0].values();
        let mut out = vec![T::zero(); v.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v[i * cols + j];
            }
        }
        let req = self.requires[a.0];
        Ok(self.push(Op::Transpose { a, rows, cols }, Tensor::from_raw(vec![cols, rows], out), req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape(a, b, "add")?;
        let out: Vec<T> = self.values[a.0]
            .values()
            .iter()
            .zip(self.values[b.0].values())
            .map(|(&x, &y)| x.add(y))
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Op::Add { a, b }, Tensor::from_raw(shape, out), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape(a, b, "mul")?;
        let out: Vec<T> = self.values[a.0]
            .values()
            .iter()
            .zip(self.values[b.0].values())
            .map(|(&x, &y)| x.mul(y))
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Op::Mul { a, b }, Tensor::from_raw(shape, out), req))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let out: Vec<T> = self.values[a.0].values().iter().map(|&x| x.mul(f)).collect();
        let shape = self.values[a.0].shape().to_vec();
        let req = self.requires[a.0];
        self.push(Op::Scale { a, factor }, Tensor::from_raw(shape, out), req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.values[a.0]
            .values()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        let req = self.requires[a.0];
        self.push(Op::Relu { a }, Tensor::from_raw(shape, out), req)
    }

    /// Arithmetic mean of all elements; rank-0 output.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.values[a.0].values();
        let mut acc = T::zero();
        for &x in v {
            acc = acc.add(x);
        }
        let out = acc.div(T::from_f64(v.len() as f64));
        let req = self.requires[a.0];
        self.push(Op::MeanAll { a }, Tensor::scalar(out), req)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.values[a.0].shape().to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension(format!("mean_axis {} out of range for {:?}", axis, s)));
        }
        let pre: usize = s[..axis].iter().product();
        let ax = s[axis];
        let post: usize = s[axis + 1..].iter().product();
        let v = self.values[a.0].values();
        let inv = T::from_f64(1.0 / ax as f64);
        let mut out = vec![T::zero(); pre * post];
        for p in 0..pre {
            for i in 0..ax {
                let base = (p * ax + i) * post;
                let ob = p * post;
                for q in 0..post {
                    out[ob + q] = out[ob + q].add(v[base + q]);
                }
            }
        }
        for o in out.iter_mut() {
            *o = o.mul(inv);
        }
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let req = self.requires[a.0];
        Ok(self.push(Op::MeanAxis { a, pre, axis: ax, post }, Tensor::from_raw(out_shape, out), req))
    }

    /// Concatenate flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let mut out = Vec::new();
        let mut req = false;
        for &p in parts {
            out.extend_from_slice(self.values[p.0].values());
            req |= self.requires[p.0];
        }
        let n = out.len();
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, Tensor::from_raw(vec![n], out), req))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("stack_rows of zero tensors".into()));
        }
        let cols = self.values[parts[0].0].len();
        let mut out = Vec::with_capacity(parts.len() * cols);
        let mut req = false;
        for &p in parts {
            if self.values[p.0].len() != cols {
                return Err(Error::Dimension(format!(
                    "stack_rows length mismatch: {} vs {}",
                    self.values[p.0].len(),
                    cols
                )));
            }
            out.extend_from_slice(self.values[p.0].values());
            req |= self.requires[p.0];
        }
        Ok(self.push(
            Op::StackRows { parts: parts.to_vec(), cols },
            Tensor::from_raw(vec![parts.len(), cols], out),
            req,
        ))
    }

    /// Divide by `max(l2_norm, 1e-12)`, treating the input as one vector.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let v = self.values[a.0].values();
        let norm = l2_norm(v).max(L2_EPS);
        let inv = T::from_f64(1.0 / norm);
        let out: Vec<T> = v.iter().map(|&x| x.mul(inv)).collect();
        let shape = self.values[a.0].shape().to_vec();
        let req = self.requires[a.0];
        self.push(Op::L2Norm { a }, Tensor::from_raw(shape, out), req)
    }

    /// `out[i] = a[index[i]]`; indices may repeat (backward accumulates).
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if n != index.len() {
            return Err(Error::Dimension(format!(
                "gather shape {:?} wants {} indices, got {}",
                out_shape,
                n,
                index.len()
            )));
        }
        let v = self.values[a.0].values();
        if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
            return Err(Error::Dimension(format!("gather index {} out of range {}", bad, v.len())));
        }
        let out: Vec<T> = index.iter().map(|&i| v[i]).collect();
        let req = self.requires[a.0];
        Ok(self.push(Op::Gather { a, index }, Tensor::from_raw(out_shape, out), req))
    }

    /// Sparse weighted recombination of the input (see [`GatherMap`]).
    pub fn weighted_gather(&mut self, a: Var, map: Arc<GatherMap>, out_shape: Vec<usize>) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if n != map.rows() {
            return Err(Error::Dimension(format!(
                "weighted_gather shape {:?} wants {} rows, map has {}",
                out_shape,
                n,
                map.rows()
            )));
        }
        let v = self.values[a.0].values();
        let mut out = vec![T::zero(); n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for e in map.offsets[i]..map.offsets[i + 1] {
                acc = acc.add(v[map.index[e]].mul(T::from_f64(map.weight[e])));
            }
            *o = acc;
        }
        let req = self.requires[a.0];
        Ok(self.push(Op::WeightedGather { a, map }, Tensor::from_raw(out_shape, out), req))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.values[a.0].reshaped(shape)?;
        let req = self.requires[a.0];
        Ok(self.push(Op::Reshape { a }, t, req))
    }

    /// 2-d cross-correlation with zero same-padding. Input `[C, H, W]`,
    /// kernel `[O, C, k, k]` with odd `k`, output `[O, H, W]`.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let si = self.values[input.0].shape().to_vec();
        let sk = self.values[kernel.0].shape().to_vec();
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d_same expects [C,H,W] and [O,C,k,k], got {:?} and {:?}",
                si, sk
            )));
        }
        let (in_ch, h, w) = (si[0], si[1], si[2]);
        let (out_ch, kc, k, k2) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != in_ch || k != k2 {
            return Err(Error::Dimension(format!(
                "conv kernel {:?} incompatible with input {:?}",
                sk, si
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Dimension(format!("kernel size {} must be odd", k)));
        }
        let x = self.values[input.0].values();
        let kv = self.values[kernel.0].values();
        let out = conv2d_forward(x, kv, in_ch, out_ch, h, w, k);
        let req = self.requires[input.0] || self.requires[kernel.0];
        Ok(self.push(
            Op::Conv2dSame { input, kernel, in_ch, out_ch, h, w, k },
            Tensor::from_raw(vec![out_ch, h, w], out),
            req,
        ))
    }

    /// 2x2 average pooling on `[C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("avg_pool2 expects [C,H,W], got {:?}", s)));
        }
        let (ch, h, w) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Geometry(format!("avg_pool2 needs even extents, got {}x{}", h, w)));
        }
        let v = self.values[a.0].values();
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); ch * oh * ow];
        for c in 0..ch {
            for y in 0..oh {
                for x in 0..ow {
                    let base = c * h * w + 2 * y * w + 2 * x;
                    let s4 = v[base].add(v[base + 1]).add(v[base + w]).add(v[base + w + 1]);
                    out[c * oh * ow + y * ow + x] = s4.mul(quarter);
                }
            }
        }
        let req = self.requires[a.0];
        Ok(self.push(Op::AvgPool2 { a, ch, h, w }, Tensor::from_raw(vec![ch, oh, ow], out), req))
    }

    /// Add `bias[c]` to every element of channel `c`. The input is viewed
    /// as `[channels, inner]` in row-major order.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var, channels: usize) -> Result<Var> {
        let n = self.values[a.0].len();
        if self.values[bias.0].len() != channels || channels == 0 || n % channels != 0 {
            return Err(Error::Dimension(format!(
                "channel bias: {} elements, {} channels, bias len {}",
                n,
                channels,
                self.values[bias.0].len()
            )));
        }
        let inner = n / channels;
        let v = self.values[a.0].values();
        let bv = self.values[bias.0].values();
        let mut out = Vec::with_capacity(n);
        for c in 0..channels {
            let b = bv[c];
            for j in 0..inner {
                out.push(v[c * inner + j].add(b));
            }
        }
        let shape = self.values[a.0].shape().to_vec();
        let req = self.requires[a.0] || self.requires[bias.0];
        Ok(self.push(Op::AddChannelBias { a, bias, channels, inner }, Tensor::from_raw(shape, out), req))
    }

    /// Mean over rows of `-log softmax(row)[target]`, stabilized by
    /// max-subtraction. Rank-0 output.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.values[logits.0].shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("cross_entropy_rows expects 2-d logits, got {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Domain(format!("label {} out of range for {} classes", bad, cols)));
        }
        let v = self.values[logits.0].values();
        let mut acc = 0.0f64;
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            acc += row_ce(row, targets[r]);
        }
        let out = T::from_f64(acc / rows as f64);
        let req = self.requires[logits.0];
        Ok(self.push(
            Op::CeRows { logits, targets: Arc::new(targets.to_vec()), rows, cols },
            Tensor::scalar(out),
            req,
        ))
    }

    fn zip_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let sa = self.values[a.0].shape();
        let sb = self.values[b.0].shape();
        if sa != sb {
            return Err(Error::Dimension(format!("{} shape mismatch: {:?} vs {:?}", what, sa, sb)));
        }
        Ok(())
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar output. Gradients of all
    /// gradient-requiring nodes become available through [`Graph::grad`].
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.values[out.0].len() != 1 {
            return Err(Error::Dimension(format!(
                "backward target must be scalar, got {:?}",
                self.values[out.0].shape()
            )));
        }
        if !self.values[out.0].item().is_finite() {
            return Err(Error::Eval("backward target is non-finite".into()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.requires[out.0] {
            return Ok(());
        }
        self.grads[out.0] = Some(vec![T::one()]);

        for id in (0..=out.0).rev() {
            if self.grads[id].is_none() || !self.requires[id] {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            let op = self.ops[id].clone();
            self.apply_backward(&op, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) -> bool {
        if !self.requires[v.0] {
            return false;
        }
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(vec![T::zero(); self.values[v.0].len()]);
        }
        true
    }

    fn apply_backward(&mut self, op: &Op, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.ensure_grad(*a) {
                    // dA = g . B^T
                    let bv = self.values[b.0].values().to_vec();
                    let da = self.grads[a.0].as_mut().unwrap();
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for kk in 0..k {
                                da[i * k + kk] = da[i * k + kk].add(gij.mul(bv[kk * n + j]));
                            }
                        }
                    }
                }
                if self.ensure_grad(*b) {
                    // dB = A^T . g
                    let av = self.values[a.0].values().to_vec();
                    let db = self.grads[b.0].as_mut().unwrap();
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            for j in 0..n {
                                db[kk * n + j] = db[kk * n + j].add(aik.mul(g[i * n + j]));
                            }
                        }
                    }
                }
            }
            Op::Transpose { a, rows, cols } => {
                if self.ensure_grad(*a) {
                    let da = self.grads[a.0].as_mut().unwrap();
                    for i in 0..*rows {
                        for j in 0..*cols {
                            da[i * cols + j] = da[i * cols + j].add(g[j * rows + i]);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.ensure_grad(*a) {
                    let da = self.grads[a.0].as_mut().unwrap();
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d = d.add(gi);
                    }
                }
                if self.ensure_grad(*b) {
                    let db = self.grads[b.0].as_mut().unwrap();
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d = d.add(gi);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.ensure_grad(*a) {
                    let bv = self.values[b.0].values().to_vec();
                    let da = self.grads[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        da[i] = da[i].add(g[i].mul(bv[i]));
                    }
                }
                if self.ensure_grad(*b) {
                    let av = self.values[a.0].values().to_vec();
                    let db = self.grads[b.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        db[i] = db[i].add(g[i].mul(av[i]));
                    }
                }
            }
            Op::Scale { a, factor } => {
                if self.ensure_grad(*a) {
                    let f = T::from_f64(*factor);
                    let da = self.grads[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        da[i] = da[i].add(g[i].mul(f));
                    }
                }
            }
            Op::Relu { a } => {
                if self.ensure_grad(*a) {
                    let av = self.values[a.0].values().to_vec();
                    let da = self.grads[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        if av[i] > T::zero() {
                            da[i] = da[i].add(g[i]);
                        }
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.ensure_grad(*a) {
                    let da = self.grads[a.0].as_mut().unwrap();
                    let gi = g[0].mul(T::from_f64(1.0 / da.len() as f64));
                    for d in da.iter_mut() {
                        *d = d.add(gi);
                    }
                }
            }
            Op::MeanAxis { a, pre, axis, post } => {
                if self.ensure_grad(*a) {
                    let inv = T::from_f64(1.0 / *axis as f64);
                    let da = self.grads[a.0].as_mut().unwrap();
                    for p in 0..*pre {
                        for i in 0..*axis {
                            let base = (p * axis + i) * post;
                            let ob = p * post;
                            for q in 0..*post {
                                da[base + q] = da[base + q].add(g[ob + q].mul(inv));
                            }
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.values[p.0].len();
                    if self.ensure_grad(p) {
                        let dp = self.grads[p.0].as_mut().unwrap();
                        for i in 0..len {
                            dp[i] = dp[i].add(g[off + i]);
                        }
                    }
                    off += len;
                }
            }
            Op::StackRows { parts, cols } => {
                for (r, &p) in parts.iter().enumerate() {
                    if self.ensure_grad(p) {
                        let dp = self.grads[p.0].as_mut().unwrap();
                        for i in 0..*cols {
                            dp[i] = dp[i].add(g[r * cols + i]);
                        }
                    }
                }
            }
            Op::L2Norm { a } => {
                if self.ensure_grad(*a) {
                    let av = self.values[a.0].values().to_vec();
                    let norm = l2_norm(&av);
                    let da = self.grads[a.0].as_mut().unwrap();
                    if norm < L2_EPS {
                        let inv = T::from_f64(1.0 / L2_EPS);
                        for i in 0..g.len() {
                            da[i] = da[i].add(g[i].mul(inv));
                        }
                    } else {
                        let inv = 1.0 / norm;
                        let mut dot = 0.0f64;
                        for i in 0..g.len() {
                            dot += av[i].to_f64() * inv * g[i].to_f64();
                        }
                        for i in 0..g.len() {
                            let yi = av[i].to_f64() * inv;
                            let d = (g[i].to_f64() - yi * dot) * inv;
                            da[i] = da[i].add(T::from_f64(d));
                        }
                    }
                }
            }
            Op::Gather { a, index } => {
                if self.ensure_grad(*a) {
                    let da = self.grads[a.0].as_mut().unwrap();
                    for (i, &src) in index.iter().enumerate() {
                        da[src] = da[src].add(g[i]);
                    }
                }
            }
            Op::WeightedGather { a, map } => {
                if self.ensure_grad(*a) {
                    let da = self.grads[a.0].as_mut().unwrap();
                    for i in 0..map.rows() {
                        for e in map.offsets[i]..map.offsets[i + 1] {
                            let w = T::from_f64(map.weight[e]);
                            da[map.index[e]] = da[map.index[e]].add(g[i].mul(w));
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if self.ensure_grad(*a) {
                    let da = self.grads[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        da[i] = da[i].add(g[i]);
                    }
                }
            }
            Op::Conv2dSame { input, kernel, in_ch, out_ch, h, w, k } => {
                let (in_ch, out_ch, h, w, k) = (*in_ch, *out_ch, *h, *w, *k);
                if self.ensure_grad(*input) {
                    let kv = self.values[kernel.0].values().to_vec();
                    let di = self.grads[input.0].as_mut().unwrap();
                    conv2d_backward_input(di, g, &kv, in_ch, out_ch, h, w, k);
                }
                if self.ensure_grad(*kernel) {
                    let xv = self.values[input.0].values().to_vec();
                    let dk = self.grads[kernel.0].as_mut().unwrap();
                    conv2d_backward_kernel(dk, g, &xv, in_ch, out_ch, h, w, k);
                }
            }
            Op::AvgPool2 { a, ch, h, w } => {
                if self.ensure_grad(*a) {
                    let (ch, h, w) = (*ch, *h, *w);
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::from_f64(0.25);
                    let da = self.grads[a.0].as_mut().unwrap();
                    for c in 0..ch {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gi = g[c * oh * ow + y * ow + x].mul(quarter);
                                let base = c * h * w + 2 * y * w + 2 * x;
                                da[base] = da[base].add(gi);
                                da[base + 1] = da[base + 1].add(gi);
                                da[base + w] = da[base + w].add(gi);
                                da[base + w + 1] = da[base + w + 1].add(gi);
                            }
                        }
                    }
                }
            }
            Op::AddChannelBias { a, bias, channels, inner } => {
                if self.ensure_grad(*a) {
                    let da = self.grads[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        da[i] = da[i].add(g[i]);
                    }
                }
                if self.ensure_grad(*bias) {
                    let db = self.grads[bias.0].as_mut().unwrap();
                    for c in 0..*channels {
                        let mut acc = T::zero();
                        for j in 0..*inner {
                            acc = acc.add(g[c * inner + j]);
                        }
                        db[c] = db[c].add(acc);
                    }
                }
            }
            Op::CeRows { logits, targets, rows, cols } => {
                if self.ensure_grad(*logits) {
                    let v = self.values[logits.0].values().to_vec();
                    let dl = self.grads[logits.0].as_mut().unwrap();
                    let gscale = g[0].to_f64() / *rows as f64;
                    for r in 0..*rows {
                        let row = &v[r * cols..(r + 1) * cols];
                        let probs = row_softmax(row);
                        for c in 0..*cols {
                            let ind = if c == targets[r] { 1.0 } else { 0.0 };
                            let d = gscale * (probs[c] - ind);
                            dl[r * cols + c] = dl[r * cols + c].add(T::from_f64(d));
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn l2_norm<T: Scalar>(v: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for &x in v {
        let xf = x.to_f64();
        acc += xf * xf;
    }
    acc.sqrt()
}

fn row_ce<T: Scalar>(row: &[T], target: usize) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64()));
    let mut sum = 0.0f64;
    for &x in row {
        sum += (x.to_f64() - m).exp();
    }
    m + sum.ln() - row[target].to_f64()
}

fn row_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64()));
    let exps: Vec<f64> = row.iter().map(|&x| (x.to_f64() - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-major `[m,k] . [k,n]` with ascending-k accumulation per element.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j].add(aik.mul(brow[j]));
            }
        }
    }
    out
}

fn conv2d_forward<T: Scalar>(
    x: &[T],
    kern: &[T],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let p = k / 2;
    let mut out = vec![T::zero(); out_ch * h * w];
    // each output channel is an independent task; accumulation order inside
    // one element is fixed, so results are identical for any thread count
    out.par_chunks_mut(h * w).enumerate().for_each(|(o, plane)| {
        for c in 0..in_ch {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for dy in 0..k {
                for dx in 0..k {
                    let wgt = kern[((o * in_ch + c) * k + dy) * k + dx];
                    // y + dy - p must land in [0, h)
                    let y0 = p.saturating_sub(dy);
                    let y1 = (h + p - dy).min(h);
                    let x0 = p.saturating_sub(dx);
                    let x1 = (w + p - dx).min(w);
                    for y in y0..y1 {
                        let iy = y + dy - p;
                        let src = &xc[iy * w + x0 + dx - p..iy * w + x1 + dx - p];
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = d.add(s.mul(wgt));
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv2d_backward_input<T: Scalar>(
    di: &mut [T],
    g: &[T],
    kern: &[T],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let p = k / 2;
    di.par_chunks_mut(h * w).enumerate().for_each(|(c, dplane)| {
        for o in 0..out_ch {
            let go = &g[o * h * w..(o + 1) * h * w];
            for dy in 0..k {
                for dx in 0..k {
                    let wgt = kern[((o * in_ch + c) * k + dy) * k + dx];
                    let y0 = p.saturating_sub(dy);
                    let y1 = (h + p - dy).min(h);
                    let x0 = p.saturating_sub(dx);
                    let x1 = (w + p - dx).min(w);
                    for y in y0..y1 {
                        let iy = y + dy - p;
                        let grow = &go[y * w + x0..y * w + x1];
                        let drow = &mut dplane[iy * w + x0 + dx - p..iy * w + x1 + dx - p];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = d.add(gv.mul(wgt));
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_backward_kernel<T: Scalar>(
    dk: &mut [T],
    g: &[T],
    x: &[T],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    debug_assert_eq!(dk.len(), out_ch * in_ch * k * k);
    let p = k / 2;
    dk.par_chunks_mut(in_ch * k * k).enumerate().for_each(|(o, dko)| {
        let go = &g[o * h * w..(o + 1) * h * w];
        for c in 0..in_ch {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for dy in 0..k {
                for dx in 0..k {
                    let y0 = p.saturating_sub(dy);
                    let y1 = (h + p - dy).min(h);
                    let x0 = p.saturating_sub(dx);
                    let x1 = (w + p - dx).min(w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let iy = y + dy - p;
                        let grow = &go[y * w + x0..y * w + x1];
                        let xrow = &xc[iy * w + x0 + dx - p..iy * w + x1 + dx - p];
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            acc = acc.add(gv.mul(xv));
                        }
                    }
                    let slot = (c * k + dy) * k + dx;
                    dko[slot] = dko[slot].add(acc);
                }
            }
        }
    });
}
