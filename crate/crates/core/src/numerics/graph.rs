//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::params::ParameterSet;
use crate::numerics::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over every element.
    Mean,
    /// Sum over each row, averaged over rows.
    SumPerRow,
}

enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var },
    Silu(Var),
    Relu(Var),
    TimeEmbed(Var),
    Embedding { table: Var, labels: Vec<usize> },
    Add(Var, Var),
    AddChannels(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    RowAxpby { x: Var, y: Var, a: Vec<T>, b: Vec<T> },
    AvgPool { x: Var, k: usize },
    GlobalMeanPool(Var),
    Reshape(Var),
    Sum(Var),
    SquaredError { pred: Var, target: Var, reduction: Reduction },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Parameter handles created by [`Graph::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}

/// Gradient tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaves: Vec<(String, Var)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn time_frequencies<T: Real>(dim: usize) -> Vec<T> {
    let half = dim / 2;
    (0..half)
        .map(|j| T::of((-(10000f64.ln()) * j as f64 / half as f64).exp()))
        .collect()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Named leaf that receives a gradient.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.leaves.push((name.into(), v));
        v
    }

    /// Registers every parameter as a named leaf.
    pub fn bind(&mut self, params: &ParameterSet<T>) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(name, t.clone())))
            .collect();
        Bound { vars }
    }

    /// `x · w + b` with `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(mismatch("dense", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(mismatch("dense bias", ws, bs));
        }
        let (n, din, dout) = (xs[0], ws[0], ws[1]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * dout);
        for r in 0..n {
            let mut row = bv.to_vec();
            for (i, &xi) in xv[r * din..(r + 1) * din].iter().enumerate() {
                if xi != T::zero() {
                    for (o, &wij) in row.iter_mut().zip(&wv[i * dout..(i + 1) * dout]) {
                        *o += xi * wij;
                    }
                }
            }
            out.extend(row);
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }, tracked))
    }

    /// Stride-1 convolution with zero "same" padding.
    /// `x: [N, H, W, Cin]`, `w: [k, k, Cin, Cout]` with odd `k`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[0] % 2 == 0 || xs[3] != ws[2] {
            return Err(mismatch("conv2d", xs, ws));
        }
        if bs != [ws[3]] {
            return Err(mismatch("conv2d bias", ws, bs));
        }
        let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, co) = (ws[0], ws[3]);
        let pad = k / 2;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * h * wd * co];
        for img in 0..n {
            for oy in 0..h {
                for ox in 0..wd {
                    let o0 = ((img * h + oy) * wd + ox) * co;
                    let pix = &mut out[o0..o0 + co];
                    pix.copy_from_slice(bv);
                    for ky in 0..k {
                        let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = (ox + kx).checked_sub(pad).filter(|&v| v < wd) else {
                                continue;
                            };
                            let x0 = ((img * h + iy) * wd + ix) * ci;
                            let w0 = (ky * k + kx) * ci * co;
                            for c in 0..ci {
                                let xval = xv[x0 + c];
                                if xval == T::zero() {
                                    continue;
                                }
                                let wrow = &wv[w0 + c * co..w0 + (c + 1) * co];
                                for (p, &wij) in pix.iter_mut().zip(wrow) {
                                    *p += xval * wij;
                                }
                            }
                        }
                    }
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let value = Tensor::new(vec![n, h, wd, co], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b }, tracked))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let tracked = self.tracked(x);
        self.push(value, Op::Silu(x), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let tracked = self.tracked(x);
        self.push(value, Op::Relu(x), tracked)
    }

    /// Sinusoidal embedding of per-row scalar timesteps `t: [N]` into `[N, dim]`:
    /// the first half holds `sin(t·f_j)`, the second `cos(t·f_j)` with
    /// `f_j = 10000^(-j/half)`.
    pub fn time_embedding(&mut self, t: Var, dim: usize) -> Result<Var> {
        let ts = self.shape(t);
        if ts.len() != 1 || dim == 0 || dim % 2 != 0 {
            return Err(mismatch("time_embedding", ts, &[dim]));
        }
        let n = ts[0];
        let freqs = time_frequencies::<T>(dim);
        let half = dim / 2;
        let tv = self.value(t).data();
        let mut out = vec![T::zero(); n * dim];
        for r in 0..n {
            for (j, &f) in freqs.iter().enumerate() {
                let a = tv[r] * f;
                out[r * dim + j] = a.sin();
                out[r * dim + half + j] = a.cos();
            }
        }
        let tracked = self.tracked(t);
        let value = Tensor::new(vec![n, dim], out)?;
        Ok(self.push(value, Op::TimeEmbed(t), tracked))
    }

    /// Row lookup `table[labels[n]]` with `table: [classes, D]`.
    pub fn embedding(&mut self, table: Var, labels: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(mismatch("embedding", &ts, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= ts[0]) {
            return Err(Error::InvalidArgument(format!(
                "embedding: label {bad} outside table of {} rows",
                ts[0]
            )));
        }
        let tv = self.value(table);
        let value = tv.select_rows(labels);
        let tracked = self.tracked(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                labels: labels.to_vec(),
            },
            tracked,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    /// Adds a per-row channel vector `c: [N, C]` to every position of
    /// `x: [N, ..., C]`.
    pub fn add_channels(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xs, cs) = (self.shape(x), self.shape(c));
        if xs.len() < 2 || cs.len() != 2 || xs[0] != cs[0] || xs[xs.len() - 1] != cs[1] {
            return Err(mismatch("add_channels", xs, cs));
        }
        let ch = cs[1];
        let row = self.value(x).row_len();
        let cv = self.value(c).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + cv[(i / row) * ch + i % ch])
            .collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(c);
        Ok(self.push(value, Op::AddChannels(x, c), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let tracked = self.tracked(x);
        self.push(value, Op::Scale(x, c), tracked)
    }

    /// Per-row linear combination `a[n]·x[n] + b[n]·y[n]`.
    pub fn row_axpby(&mut self, x: Var, y: Var, a: &[T], b: &[T]) -> Result<Var> {
        let xs = self.shape(x);
        if xs != self.shape(y) {
            return Err(mismatch("row_axpby", xs, self.shape(y)));
        }
        let rows = self.value(x).rows();
        if a.len() != rows || b.len() != rows {
            return Err(mismatch("row_axpby coefficients", xs, &[a.len(), b.len()]));
        }
        let w = self.value(x).row_len();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(self.value(y).data())
            .enumerate()
            .map(|(i, (&p, &q))| a[i / w] * p + b[i / w] * q)
            .collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(y);
        Ok(self.push(
            value,
            Op::RowAxpby {
                x,
                y,
                a: a.to_vec(),
                b: b.to_vec(),
            },
            tracked,
        ))
    }

    /// Non-overlapping `k × k` mean pooling of `[N, H, W, C]`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k == 0 || xs[1] % k != 0 || xs[2] % k != 0 {
            return Err(mismatch("avg_pool", &xs, &[k, k]));
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::of((k * k) as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * oh * ow * c];
        for img in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((img * h + y) * w + xx) * c;
                    let dst = ((img * oh + y / k) * ow + xx / k) * c;
                    for ch in 0..c {
                        out[dst + ch] += xv[src + ch] * inv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, c], out)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::AvgPool { x, k }, tracked))
    }

    /// Mean over all spatial positions: `[N, H, W, C] -> [N, C]`.
    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(mismatch("global_mean_pool", &xs, &[]));
        }
        let (n, c) = (xs[0], xs[3]);
        let spatial = xs[1] * xs[2];
        let inv = T::one() / T::of(spatial as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for img in 0..n {
            for p in 0..spatial {
                for ch in 0..c {
                    out[img * c + ch] += xv[(img * spatial + p) * c + ch] * inv;
                }
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::GlobalMeanPool(x), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Flattens everything after the leading dimension.
    pub fn flatten_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.rows(), t.row_len()];
        self.reshape(x, &shape)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        let tracked = self.tracked(x);
        self.push(value, Op::Sum(x), tracked)
    }

    pub fn squared_error(&mut self, pred: Var, target: Var, reduction: Reduction) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(mismatch("squared_error", self.shape(pred), self.shape(target)));
        }
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        let denom = match reduction {
            Reduction::Mean => self.value(pred).len(),
            Reduction::SumPerRow => self.value(pred).rows(),
        };
        let value = Tensor::scalar(total / T::of(denom.max(1) as f64));
        let tracked = self.tracked(pred) || self.tracked(target);
        Ok(self.push(
            value,
            Op::SquaredError {
                pred,
                target,
                reduction,
            },
            tracked,
        ))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(mismatch("softmax_cross_entropy", ls, &[labels.len()]));
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy: label {bad} with {k} classes"
            )));
        }
        let lv = self.value(logits).data();
        let probs = softmax_rows(lv, k);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            total -= probs[r * k + label].max(T::min_positive_value()).ln();
        }
        let value = Tensor::scalar(total / T::of(n.max(1) as f64));
        let tracked = self.tracked(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Gradients of a scalar root with respect to every named leaf.
    /// Leaves the root does not depend on receive exact zeros.
    pub fn backward(&self, root: Var) -> Result<ParameterSet<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = ParameterSet::new();
        for (name, v) in &self.leaves {
            let value = self.value(*v);
            let data = match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => g,
                None => vec![T::zero(); value.len()],
            };
            out.insert(name.clone(), Tensor::new(value.shape().to_vec(), data)?)?;
        }
        Ok(out)
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.tracked(*w) {
                    let dw = acc(grads, *w, din * dout);
                    for r in 0..n {
                        let gr = &g[r * dout..(r + 1) * dout];
                        for (i, &xi) in xv[r * din..(r + 1) * din].iter().enumerate() {
                            if xi != T::zero() {
                                for (d, &gj) in dw[i * dout..(i + 1) * dout].iter_mut().zip(gr) {
                                    *d += xi * gj;
                                }
                            }
                        }
                    }
                }
                if self.tracked(*b) {
                    let db = acc(grads, *b, dout);
                    for r in 0..n {
                        for (d, &gj) in db.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *d += gj;
                        }
                    }
                }
                if self.tracked(*x) {
                    let dx = acc(grads, *x, n * din);
                    for r in 0..n {
                        let gr = &g[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let dot: T = wv[i * dout..(i + 1) * dout]
                                .iter()
                                .zip(gr)
                                .map(|(&a, &b)| a * b)
                                .sum();
                            dx[r * din + i] += dot;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b } => {
                let xs = self.shape(*x);
                let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
                let ws = self.shape(*w);
                let (k, co) = (ws[0], ws[3]);
                let pad = k / 2;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let (tx, tw) = (self.tracked(*x), self.tracked(*w));
                let mut dw = if tw { Some(vec![T::zero(); wv.len()]) } else { None };
                let mut dx = if tx { Some(vec![T::zero(); xv.len()]) } else { None };
                for img in 0..n {
                    for oy in 0..h {
                        for ox in 0..wd {
                            let o0 = ((img * h + oy) * wd + ox) * co;
                            let gp = &g[o0..o0 + co];
                            for ky in 0..k {
                                let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else {
                                    continue;
                                };
                                for kx in 0..k {
                                    let Some(ix) =
                                        (ox + kx).checked_sub(pad).filter(|&v| v < wd)
                                    else {
                                        continue;
                                    };
                                    let x0 = ((img * h + iy) * wd + ix) * ci;
                                    let w0 = (ky * k + kx) * ci * co;
                                    for c in 0..ci {
                                        let wr = w0 + c * co..w0 + (c + 1) * co;
                                        if let Some(dw) = dw.as_mut() {
                                            let xval = xv[x0 + c];
                                            if xval != T::zero() {
                                                for (d, &gj) in dw[wr.clone()].iter_mut().zip(gp) {
                                                    *d += xval * gj;
                                                }
                                            }
                                        }
                                        if let Some(dx) = dx.as_mut() {
                                            let dot: T = wv[wr]
                                                .iter()
                                                .zip(gp)
                                                .map(|(&a, &b)| a * b)
                                                .sum();
                                            dx[x0 + c] += dot;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = dw {
                    add_into(acc(grads, *w, dw.len()), &dw);
                }
                if let Some(dx) = dx {
                    add_into(acc(grads, *x, dx.len()), &dx);
                }
                if self.tracked(*b) {
                    let db = acc(grads, *b, co);
                    for chunk in g.chunks(co) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx = acc(grads, *x, xv.len());
                for ((d, &v), &gi) in dx.iter_mut().zip(xv).zip(g) {
                    let s = sigmoid(v);
                    *d += gi * s * (T::one() + v * (T::one() - s));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = acc(grads, *x, xv.len());
                for ((d, &v), &gi) in dx.iter_mut().zip(xv).zip(g) {
                    if v > T::zero() {
                        *d += gi;
                    }
                }
            }
            Op::TimeEmbed(t) => {
                let dim = out.shape()[1];
                let half = dim / 2;
                let freqs = time_frequencies::<T>(dim);
                let tv = self.value(*t).data();
                let dt = acc(grads, *t, tv.len());
                for (r, d) in dt.iter_mut().enumerate() {
                    for (j, &f) in freqs.iter().enumerate() {
                        let a = tv[r] * f;
                        *d += f * (a.cos() * g[r * dim + j] - a.sin() * g[r * dim + half + j]);
                    }
                }
            }
            Op::Embedding { table, labels } => {
                let ts = self.shape(*table);
                let width = ts[1];
                let dt = acc(grads, *table, ts[0] * width);
                for (r, &l) in labels.iter().enumerate() {
                    add_into(&mut dt[l * width..(l + 1) * width], &g[r * width..(r + 1) * width]);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.tracked(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddChannels(x, c) => {
                if self.tracked(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if self.tracked(*c) {
                    let cs = self.shape(*c);
                    let ch = cs[1];
                    let row = out.row_len();
                    let dc = acc(grads, *c, cs[0] * ch);
                    for (i, &gi) in g.iter().enumerate() {
                        dc[(i / row) * ch + i % ch] += gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    let da = acc(grads, *a, g.len());
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if self.tracked(*b) {
                    let db = acc(grads, *b, g.len());
                    for ((d, &gi), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * y;
                    }
                }
            }
            Op::Scale(x, c) => {
                let dx = acc(grads, *x, g.len());
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }
            Op::RowAxpby { x, y, a, b } => {
                let w = out.row_len();
                for (v, coef) in [(*x, a), (*y, b)] {
                    if self.tracked(v) {
                        let d = acc(grads, v, g.len());
                        for (i, (di, &gi)) in d.iter_mut().zip(g).enumerate() {
                            *di += coef[i / w] * gi;
                        }
                    }
                }
            }
            Op::AvgPool { x, k } => {
                let xs = self.shape(*x);
                let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / T::of((k * k) as f64);
                let dx = acc(grads, *x, n * h * w * c);
                for img in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let src = ((img * h + y) * w + xx) * c;
                            let dst = ((img * oh + y / k) * ow + xx / k) * c;
                            for ch in 0..c {
                                dx[src + ch] += g[dst + ch] * inv;
                            }
                        }
                    }
                }
            }
            Op::GlobalMeanPool(x) => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[3]);
                let spatial = xs[1] * xs[2];
                let inv = T::one() / T::of(spatial as f64);
                let dx = acc(grads, *x, n * spatial * c);
                for img in 0..n {
                    for p in 0..spatial {
                        for ch in 0..c {
                            dx[(img * spatial + p) * c + ch] += g[img * c + ch] * inv;
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(acc(grads, *x, g.len()), g),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                for d in acc(grads, *x, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::SquaredError {
                pred,
                target,
                reduction,
            } => {
                let pv = self.value(*pred);
                let denom = match reduction {
                    Reduction::Mean => pv.len(),
                    Reduction::SumPerRow => pv.rows(),
                };
                let c = T::of(2.0) * g[0] / T::of(denom.max(1) as f64);
                let tv = self.value(*target).data();
                let diff: Vec<T> = pv.data().iter().zip(tv).map(|(&p, &q)| c * (p - q)).collect();
                if self.tracked(*pred) {
                    add_into(acc(grads, *pred, diff.len()), &diff);
                }
                if self.tracked(*target) {
                    let dt = acc(grads, *target, diff.len());
                    for (d, &v) in dt.iter_mut().zip(&diff) {
                        *d -= v;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::of(labels.len().max(1) as f64);
                let dl = acc(grads, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let target = if j == label { T::one() } else { T::zero() };
                        dl[r * k + j] += scale * (probs[r * k + j] - target);
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise numerically stable softmax of a `[N, k]` buffer.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}
