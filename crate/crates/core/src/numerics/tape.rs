//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter as
//! borrowed leaves, every primitive appends one node, and [`Tape::backward`]
//! walks the nodes once in reverse creation order (which is a reverse
//! topological order, since a node can only reference earlier nodes).

use crate::error::{Error, Result};
use crate::numerics::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Layout, Tensor};

/// Epsilon inside layer-norm's square root. Small enough that normalized
/// rows have unit variance to ~1e-10 for any row with variance above 1e-2.
pub const LAYER_NORM_EPS: f64 = 1e-10;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// How a cross-entropy over several rows is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanPool {
        x: Var,
        group: usize,
    },
    WeightedPool {
        x: Var,
        weights: Var,
        group: usize,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        scale: f64,
    },
    StraightThrough {
        h: Var,
        code: Var,
        to_code: bool,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].needs_grad)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf borrowing the stored tensor.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `x`'s value that blocks gradients (sg[x]).
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    /// `x + b` with `b` (length = cols) broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(x).ndim() != 2 || self.value(b).len() != cols {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let g = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), g))
    }

    /// `x·w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(c);
        let g = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let g = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), g)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length = cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if tx.ndim() != 2 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = tx.rows();
        let (xhat, rstd) = normalize_rows(tx.data(), rows, d);
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for c in 0..d {
                out[r * d + c] = xhat[r * d + c] * gm[c] + bt[c];
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        let cols = t.cols();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let g = self.any_grad(&[x]);
        self.push(out, Op::Softmax(x), g)
    }

    /// Rows of `table` selected by `ids` (embedding lookup / gather).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(ids)?;
        let g = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    fn check_groups(&self, op: &'static str, x: Var, group: usize) -> Result<(usize, usize)> {
        let t = self.value(x);
        if t.ndim() != 2 || group == 0 || t.rows() % group != 0 {
            return Err(Error::shape(op, t.shape(), &[group]));
        }
        Ok((t.rows() / group, t.cols()))
    }

    /// Column-wise max over consecutive blocks of `group` rows:
    /// `(n·group)×d → n×d`. Ties resolve to the earliest row.
    pub fn max_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, d) = self.check_groups("max_pool", x, group)?;
        let t = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * d];
        let mut argmax = vec![0usize; n * d];
        for i in 0..n {
            for r in 0..group {
                let row = i * group + r;
                for c in 0..d {
                    let v = t[row * d + c];
                    if v > out[i * d + c] {
                        out[i * d + c] = v;
                        argmax[i * d + c] = row;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, g))
    }

    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, d) = self.check_groups("mean_pool", x, group)?;
        let t = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for r in 0..group {
                let row = (i * group + r) * d;
                for c in 0..d {
                    out[i * d + c] += t[row + c];
                }
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(vec![n, d], out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::MeanPool { x, group }, g))
    }

    /// `out[i] = Σ_r weights[i, r] · x[i·group + r]` with `weights: n×group`.
    pub fn weighted_pool(&mut self, x: Var, weights: Var) -> Result<Var> {
        let group = self.value(weights).cols();
        let (n, d) = self.check_groups("weighted_pool", x, group)?;
        if self.value(weights).rows() != n {
            return Err(Error::shape("weighted_pool", self.shape(x), self.shape(weights)));
        }
        let t = self.value(x).data();
        let w = self.value(weights).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for r in 0..group {
                let wr = w[i * group + r];
                let row = (i * group + r) * d;
                for c in 0..d {
                    out[i * d + c] += wr * t[row + c];
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let g = self.any_grad(&[x, weights]);
        Ok(self.push(
            out,
            Op::WeightedPool {
                x,
                weights,
                group,
            },
            g,
        ))
    }

    /// Stack 2-D parts with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::invalid("concat_rows of zero parts"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.cols() != cols {
                return Err(Error::shape("concat_rows", &[rows, cols], t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let g = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len().max(1) as f64;
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), g)
    }

    /// Mean (or sum) over rows with `mask[r]` of `−log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, v) = (t.rows(), t.cols());
        if t.ndim() != 2 || targets.len() != rows || mask.len() != rows {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len(), mask.len()]));
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(Error::invalid("cross_entropy with an empty mask"));
        }
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let tgt = targets[r];
            if tgt >= v {
                return Err(Error::invalid(format!("target {tgt} out of range for {v} classes")));
            }
            let row = &t.data()[r * v..(r + 1) * v];
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(row);
            let lse = log_softmax_norm(row);
            loss += lse - row[tgt];
            softmax_in_place(p);
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / active as f64,
            Reduction::Sum => 1.0,
        };
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                scale,
            },
            g,
        ))
    }

    /// Straight-through estimator for vector quantization.
    ///
    /// The forward value is the quantized `code` rows; the backward pass
    /// copies the incoming gradient onto `h` unchanged and, when `to_code`,
    /// also onto `code`.
    ///
    /// With `anchor = Some((h0, code0))` the forward value becomes the
    /// first-order surrogate `h − h0 + code0` (or `h − h0 + code`), which
    /// coincides with `code` at the anchor point and whose exact derivative is
    /// the straight-through rule. Finite-difference checks use this form.
    pub fn straight_through(
        &mut self,
        h: Var,
        code: Var,
        to_code: bool,
        anchor: Option<(&Tensor, &Tensor)>,
    ) -> Result<Var> {
        self.same_shape("straight_through", h, code)?;
        let out = match anchor {
            None => self.value(code).clone(),
            Some((h0, code0)) => {
                let th = self.value(h);
                if h0.shape() != th.shape() || code0.shape() != th.shape() {
                    return Err(Error::shape("straight_through", th.shape(), h0.shape()));
                }
                let base = if to_code { self.value(code) } else { code0 };
                let data = th
                    .data()
                    .iter()
                    .zip(h0.data())
                    .zip(base.data())
                    .map(|((&x, &x0), &c)| x - x0 + c)
                    .collect();
                Tensor::new(th.shape().to_vec(), data)?
            }
        };
        let g = self.any_grad(&[h]) || (to_code && self.any_grad(&[code]));
        Ok(self.push(out, Op::StraightThrough { h, code, to_code }, g))
    }

    /// Multi-head scaled dot-product attention with a strict causal mask.
    /// `q`, `k`, `v` are `S×d`; heads split the columns evenly.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (s, d) = (self.value(q).rows(), self.value(q).cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{d} columns do not split into {heads} heads")));
        }
        let probs = attention_probs(self.value(q), self.value(k), heads);
        let dh = d / heads;
        let vt = self.value(v).data();
        let mut out = vec![0.0; s * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..s {
                let prow = &probs[(h * s + i) * s..(h * s + i + 1) * s];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in prow.iter().enumerate().take(i + 1) {
                    let vrow = &vt[j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![s, d], out)?;
        let g = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            g,
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every parameter of
    /// `store`; parameters the loss does not reach get zero tensors.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut out = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        node: &Node<'_>,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut Gradients,
    ) -> Result<()> {
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = params.get_mut(*id);
                if slot.shape() != gout.shape() {
                    return Err(Error::shape("backward(param)", slot.shape(), gout.shape()));
                }
                slot.add_assign(gout);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs_grad(*a) {
                    let ga = self.grad_slot(grads, *a);
                    gemm(m, n, k, g, Layout::Normal, tb.data(), Layout::Transposed, ga.data_mut(), 1.0);
                }
                if self.needs_grad(*b) {
                    let gb = self.grad_slot(grads, *b);
                    gemm(k, m, n, ta.data(), Layout::Transposed, g, Layout::Normal, gb.data_mut(), 1.0);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, 1.0, g));
                self.accumulate(grads, *b, |d| axpy(d, 1.0, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, 1.0, g));
                self.accumulate(grads, *b, |d| axpy(d, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((x, &gg), &y) in d.iter_mut().zip(g).zip(tb) {
                        *x += gg * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, &gg), &y) in d.iter_mut().zip(g).zip(ta) {
                        *x += gg * y;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |d| axpy(d, 1.0, g));
                let cols = gout.cols();
                self.accumulate(grads, *b, |d| {
                    for row in g.chunks(cols) {
                        axpy(d, 1.0, row);
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |d| axpy(d, *c, g)),
            Op::Relu(x) => {
                let out = node.value.get().data();
                self.accumulate(grads, *x, |d| {
                    for ((x, &gg), &o) in d.iter_mut().zip(g).zip(out) {
                        if o > 0.0 {
                            *x += gg;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = gout.cols();
                let rows = gout.rows();
                let gm = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |dg| {
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                self.accumulate(grads, *beta, |db| {
                    for row in g.chunks(d) {
                        axpy(db, 1.0, row);
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_x = 0.0;
                        for c in 0..d {
                            let dxh = gr[c] * gm[c];
                            mean_dxhat += dxh;
                            mean_dxhat_x += dxh * xr[c];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_x *= inv_d;
                        for c in 0..d {
                            let dxh = gr[c] * gm[c];
                            dx[r * d + c] += rstd[r] * (dxh - mean_dxhat - xr[c] * mean_dxhat_x);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.get().data();
                let cols = gout.cols();
                self.accumulate(grads, *x, |dx| {
                    for ((dxr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &gg), &yy) in dxr.iter_mut().zip(gr).zip(yr) {
                            *d += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let cols = gout.cols();
                self.accumulate(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * cols..(id + 1) * cols], 1.0, &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::MaxPool { x, argmax, .. } => {
                let d = gout.cols();
                self.accumulate(grads, *x, |dx| {
                    for (o, &row) in argmax.iter().enumerate() {
                        dx[row * d + o % d] += g[o];
                    }
                });
            }
            Op::MeanPool { x, group } => {
                let d = gout.cols();
                let inv = 1.0 / *group as f64;
                self.accumulate(grads, *x, |dx| {
                    for (i, gr) in g.chunks(d).enumerate() {
                        for r in 0..*group {
                            let row = (i * group + r) * d;
                            axpy(&mut dx[row..row + d], inv, gr);
                        }
                    }
                });
            }
            Op::WeightedPool { x, weights, group } => {
                let d = gout.cols();
                let tx = self.value(*x).data();
                let tw = self.value(*weights).data();
                self.accumulate(grads, *x, |dx| {
                    for (i, gr) in g.chunks(d).enumerate() {
                        for r in 0..*group {
                            let row = (i * group + r) * d;
                            axpy(&mut dx[row..row + d], tw[i * group + r], gr);
                        }
                    }
                });
                self.accumulate(grads, *weights, |dw| {
                    for (i, gr) in g.chunks(d).enumerate() {
                        for r in 0..*group {
                            let row = (i * group + r) * d;
                            dw[i * group + r] += dot(gr, &tx[row..row + d]);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |dp| axpy(dp, 1.0, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |dx| axpy(dx, 1.0, g)),
            Op::Sum(x) => {
                let s = g[0];
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|v| *v += s));
            }
            Op::Mean(x) => {
                let s = g[0] / self.value(*x).len().max(1) as f64;
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|v| *v += s));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                scale,
            } => {
                let v = self.value(*logits).cols();
                let s = g[0] * scale;
                self.accumulate(grads, *logits, |dl| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut dl[r * v..(r + 1) * v];
                        axpy(row, s, &probs[r * v..(r + 1) * v]);
                        row[targets[r]] -= s;
                    }
                });
            }
            Op::StraightThrough { h, code, to_code } => {
                self.accumulate(grads, *h, |dh| axpy(dh, 1.0, g));
                if *to_code {
                    self.accumulate(grads, *code, |dc| axpy(dc, 1.0, g));
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    probs,
                    g,
                );
                self.accumulate(grads, *q, |d| axpy(d, 1.0, &dq));
                self.accumulate(grads, *k, |d| axpy(d, 1.0, &dk));
                self.accumulate(grads, *v, |d| axpy(d, 1.0, &dv));
            }
        }
        Ok(())
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if self.needs_grad(v) {
            f(self.grad_slot(grads, v).data_mut());
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yy, &xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-row `(x − μ)·rstd` and `rstd = 1/√(var + eps)`.
pub(crate) fn normalize_rows(x: &[f64], rows: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            xhat[r * d + c] = (row[c] - mean) * rs;
        }
    }
    (xhat, rstd)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)`, computed stably.
pub(crate) fn log_softmax_norm(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Causal attention probabilities, laid out `heads × S × S`; entries above the
/// diagonal are exactly zero.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize) -> Vec<f64> {
    let (s, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut probs = vec![0.0; heads * s * s];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..s {
            let qrow = &qd[i * d + off..i * d + off + dh];
            let prow = &mut probs[(h * s + i) * s..(h * s + i) * s + i + 1];
            for (j, p) in prow.iter_mut().enumerate() {
                *p = scale * dot(qrow, &kd[j * d + off..j * d + off + dh]);
            }
            softmax_in_place(prow);
        }
    }
    probs
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (s, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![0.0; s * d];
    let mut dk = vec![0.0; s * d];
    let mut dv = vec![0.0; s * d];
    let mut dscore = vec![0.0; s];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..s {
            let prow = &probs[(h * s + i) * s..(h * s + i) * s + i + 1];
            let go = &gout[i * d + off..i * d + off + dh];
            let mut weighted = 0.0;
            for (j, &p) in prow.iter().enumerate() {
                axpy(&mut dv[j * d + off..j * d + off + dh], p, go);
                let dp = dot(go, &vd[j * d + off..j * d + off + dh]);
                dscore[j] = dp;
                weighted += p * dp;
            }
            for (j, &p) in prow.iter().enumerate() {
                let ds = p * (dscore[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                axpy(&mut dq[i * d + off..i * d + off + dh], ds, &kd[j * d + off..j * d + off + dh]);
                axpy(&mut dk[j * d + off..j * d + off + dh], ds, &qd[i * d + off..i * d + off + dh]);
            }
        }
    }
    (dq, dk, dv)
}
