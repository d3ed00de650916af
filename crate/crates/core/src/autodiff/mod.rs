//! Tape-based reverse-mode differentiation over the tensor primitives.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! execution order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Matrix-valued operations work on a batched matrix view: a tensor of shape
//! `[n,h,w,k]` is read as `n` independent `(h·w) × k` matrices, and matrix
//! results come back as `[n,1,rows,cols]`.

mod gradcheck;
mod param;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{Shape4, Tensor};

pub use gradcheck::{finite_diff_check, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use param::{Gradients, ParamTree, Parameter};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a node on a particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u32,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape(usize),
    Transpose(usize),
    MatMul(usize, usize),
    Softmax(usize),
    Mul(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    WeightedSum3 {
        terms: [usize; 3],
        weights: [usize; 3],
    },
    GlobalMaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(usize),
    Conv1x1 {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv3x3 {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        col: Vec<f64>,
    },
    MaxPool2x2 {
        x: usize,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        span: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Swish(usize),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape.
#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims(s: Shape4) -> (usize, usize) {
    (s.spatial(), s.k())
}

fn scalar_shape() -> Shape4 {
    Shape4::new(1, 1, 1, 1).expect("unit shape")
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("foreign variable");
        self.val(i)
    }

    /// A constant leaf; gradients are never propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_with(t, Op::Leaf, false)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    /// Binds a parameter as a differentiable leaf. Binding the same id twice
    /// returns the existing node.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&i) = self.params.get(p.id()) {
            debug_assert_eq!(self.nodes[i].value.shape(), p.value().shape());
            return Var {
                graph: self.id,
                index: i,
            };
        }
        let v = self.push_with(p.value().clone(), Op::Leaf, true);
        self.params.insert(p.id().to_string(), v.index);
        v
    }

    pub fn reshape(&mut self, x: Var, target: Shape4) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.val(xi).reshape(target)?;
        Ok(self.push(out, Op::Reshape(xi), &[xi]))
    }

    /// Transposes each batch item's `(h·w) × k` matrix view into `[n,1,k,h·w]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.val(xi).shape();
        let (r, c) = matrix_dims(s);
        let mut out = vec![0.0; s.len()];
        for (src, dst) in self.val(xi).data().chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
            kernels::transpose(src, r, c, dst);
        }
        let shape = Shape4::new(s.n(), 1, c, r)?;
        Ok(self.push(Tensor::from_raw(shape, out), Op::Transpose(xi), &[xi]))
    }

    /// Batched matrix product of the `(h·w) × k` views.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ai).shape(), self.val(bi).shape());
        let (ra, ca) = matrix_dims(sa);
        let (rb, cb) = matrix_dims(sb);
        if sa.n() != sb.n() || ca != rb {
            return Err(Error::shape(format!(
                "matmul: {sa} as {}x({ra}x{ca}) vs {sb} as {}x({rb}x{cb})",
                sa.n(),
                sb.n()
            )));
        }
        let mut out = vec![0.0; sa.n() * ra * cb];
        let (ad, bd) = (self.val(ai).data(), self.val(bi).data());
        for n in 0..sa.n() {
            kernels::gemm(
                ra,
                ca,
                cb,
                &ad[n * ra * ca..(n + 1) * ra * ca],
                false,
                &bd[n * rb * cb..(n + 1) * rb * cb],
                false,
                &mut out[n * ra * cb..(n + 1) * ra * cb],
                false,
            );
        }
        let shape = Shape4::new(sa.n(), 1, ra, cb)?;
        Ok(self.push(Tensor::from_raw(shape, out), Op::MatMul(ai, bi), &[ai, bi]))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.val(xi).shape();
        let mut out = self.val(xi).data().to_vec();
        kernels::softmax_rows_inplace(&mut out, s.k());
        Ok(self.push(Tensor::from_raw(s, out), Op::Softmax(xi), &[xi]))
    }

    fn same_shape(&self, op: &str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{op}: {sa} vs {sb}")));
        }
        Ok(())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ai, bi)?;
        let out: Vec<f64> = self
            .val(ai)
            .data()
            .iter()
            .zip(self.val(bi).data())
            .map(|(x, y)| x * y)
            .collect();
        let s = self.val(ai).shape();
        Ok(self.push(Tensor::from_raw(s, out), Op::Mul(ai, bi), &[ai, bi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ai, bi)?;
        let out: Vec<f64> = self
            .val(ai)
            .data()
            .iter()
            .zip(self.val(bi).data())
            .map(|(x, y)| x + y)
            .collect();
        let s = self.val(ai).shape();
        Ok(self.push(Tensor::from_raw(s, out), Op::Add(ai, bi), &[ai, bi]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out: Vec<f64> = self.val(xi).data().iter().map(|v| v * c).collect();
        let s = self.val(xi).shape();
        Ok(self.push(Tensor::from_raw(s, out), Op::Scale(xi, c), &[xi]))
    }

    fn scalar_of(&self, i: usize, what: &str) -> Result<f64> {
        let t = self.val(i);
        if t.len() != 1 {
            return Err(Error::shape(format!("{what} must be a scalar, got {}", t.shape())));
        }
        Ok(t.data()[0])
    }

    /// `w1·a + w2·b + w3·c` with scalar-valued weight nodes.
    pub fn weighted_sum3(&mut self, terms: [Var; 3], weights: [Var; 3]) -> Result<Var> {
        let t = [self.idx(terms[0])?, self.idx(terms[1])?, self.idx(terms[2])?];
        let w = [self.idx(weights[0])?, self.idx(weights[1])?, self.idx(weights[2])?];
        self.same_shape("weighted_sum3", t[0], t[1])?;
        self.same_shape("weighted_sum3", t[0], t[2])?;
        let ws = [
            self.scalar_of(w[0], "fusion weight")?,
            self.scalar_of(w[1], "fusion weight")?,
            self.scalar_of(w[2], "fusion weight")?,
        ];
        let (a, b, c) = (self.val(t[0]).data(), self.val(t[1]).data(), self.val(t[2]).data());
        let out: Vec<f64> = (0..a.len())
            .map(|i| ws[0] * a[i] + ws[1] * b[i] + ws[2] * c[i])
            .collect();
        let s = self.val(t[0]).shape();
        let inputs = [t[0], t[1], t[2], w[0], w[1], w[2]];
        Ok(self.push(
            Tensor::from_raw(s, out),
            Op::WeightedSum3 { terms: t, weights: w },
            &inputs,
        ))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.val(xi).shape();
        let (out, argmax) = kernels::global_max_pool(self.val(xi).data(), s);
        let shape = Shape4::new(s.n(), 1, 1, s.k())?;
        Ok(self.push(Tensor::from_raw(shape, out), Op::GlobalMaxPool { x: xi, argmax }, &[xi]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.val(xi).shape();
        let out = kernels::global_avg_pool(self.val(xi).data(), s);
        let shape = Shape4::new(s.n(), 1, 1, s.k())?;
        Ok(self.push(Tensor::from_raw(shape, out), Op::GlobalAvgPool(xi), &[xi]))
    }

    /// `weight` is `[1,1,k_in,k_out]`, `bias` is `[1,1,1,k_out]`.
    pub fn conv1x1(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(weight)?, self.idx(bias)?);
        let (s, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if ws.n() != 1 || ws.h() != 1 || ws.w() != s.k() || bs.len() != ws.k() {
            return Err(Error::shape(format!(
                "conv1x1: input {s}, weight {ws}, bias {bs}"
            )));
        }
        let rows = s.n() * s.spatial();
        let mut out = vec![0.0; rows * ws.k()];
        kernels::gemm(
            rows,
            ws.w(),
            ws.k(),
            self.val(xi).data(),
            false,
            self.val(wi).data(),
            false,
            &mut out,
            false,
        );
        kernels::add_row_bias(&mut out, self.val(bi).data());
        let shape = s.with_k(ws.k())?;
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Conv1x1 { x: xi, w: wi, b: bi },
            &[xi, wi, bi],
        ))
    }

    /// `weight` is `[3,3,k_in,k_out]`, `bias` is `[1,1,1,k_out]`; zero "same" padding.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(weight)?, self.idx(bias)?);
        let (s, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if ws.n() != 3 || ws.h() != 3 || ws.w() != s.k() || bs.len() != ws.k() {
            return Err(Error::shape(format!(
                "conv3x3: input {s}, weight {ws}, bias {bs}"
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(format!("conv3x3: stride must be 1 or 2, got {stride}")));
        }
        let geom = ConvGeom::new(s, stride);
        let col = kernels::im2col(self.val(xi).data(), &geom);
        let mut out = vec![0.0; geom.rows() * ws.k()];
        kernels::gemm(
            geom.rows(),
            geom.patch(),
            ws.k(),
            &col,
            false,
            self.val(wi).data(),
            false,
            &mut out,
            false,
        );
        kernels::add_row_bias(&mut out, self.val(bi).data());
        let shape = Shape4::new(s.n(), geom.oh, geom.ow, ws.k())?;
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Conv3x3 {
                x: xi,
                w: wi,
                b: bi,
                geom,
                col,
            },
            &[xi, wi, bi],
        ))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.val(xi).shape();
        if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
            return Err(Error::shape(format!("maxpool2x2: spatial extents of {s} must be even")));
        }
        let (out, argmax) = kernels::maxpool2x2(self.val(xi).data(), s);
        let shape = Shape4::new(s.n(), s.h() / 2, s.w() / 2, s.k())?;
        Ok(self.push(Tensor::from_raw(shape, out), Op::MaxPool2x2 { x: xi, argmax }, &[xi]))
    }

    /// Channel-axis layer normalization; `gamma`/`beta` are `[1,1,1,k]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let k = self.value(x).shape().k();
        self.norm_over(x, gamma, beta, eps, k, "layer_norm")
    }

    /// Layer normalization over each whole sample (all of `h`, `w` and `k`),
    /// with the per-channel affine map of [`Graph::layer_norm`].
    pub fn sample_layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.value(x).shape();
        self.norm_over(x, gamma, beta, eps, s.h() * s.w() * s.k(), "sample_layer_norm")
    }

    fn norm_over(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, span: usize, name: &str) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let s = self.val(xi).shape();
        if self.val(gi).len() != s.k() || self.val(bi).len() != s.k() {
            return Err(Error::shape(format!(
                "{name}: input {s}, gamma {}, beta {}",
                self.val(gi).shape(),
                self.val(bi).shape()
            )));
        }
        let out = kernels::layer_norm(
            self.val(xi).data(),
            s.k(),
            span,
            self.val(gi).data(),
            self.val(bi).data(),
            eps,
        );
        Ok(self.push(
            Tensor::from_raw(s, out.y),
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                span,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            &[xi, gi, bi],
        ))
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out: Vec<f64> = self
            .val(xi)
            .data()
            .iter()
            .map(|&v| v * kernels::sigmoid(v))
            .collect();
        let s = self.val(xi).shape();
        Ok(self.push(Tensor::from_raw(s, out), Op::Swish(xi), &[xi]))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let total = self.val(xi).data().iter().sum();
        Ok(self.push(Tensor::from_raw(scalar_shape(), vec![total]), Op::Sum(xi), &[xi]))
    }

    /// Mean categorical cross-entropy of `[n,1,1,c]` logits, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let s = self.val(li).shape();
        if s.h() != 1 || s.w() != 1 {
            return Err(Error::shape(format!("cross_entropy: logits must be [n,1,1,c], got {s}")));
        }
        if labels.len() != s.n() {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                s.n()
            )));
        }
        let c = s.k();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.val(li).data();
        let mut probs = z.to_vec();
        kernels::softmax_rows_inplace(&mut probs, c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| log_sum_exp(&z[i * c..(i + 1) * c]) - z[i * c + l])
            .sum::<f64>()
            / s.n() as f64;
        Ok(self.push(
            Tensor::from_raw(scalar_shape(), vec![loss]),
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            &[li],
        ))
    }

    /// Reverse sweep from a scalar node. Every bound parameter appears in the
    /// result; parameters with no path to `loss` get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.val(li).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {}",
                self.val(li).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }

        let mut by_id = BTreeMap::new();
        for (id, &i) in &self.params {
            let shape = self.val(i).shape();
            let grad = match grads.get_mut(i).and_then(Option::take) {
                Some(g) => Tensor::from_raw(shape, g),
                None => Tensor::zeros(shape),
            };
            by_id.insert(id.clone(), grad);
        }
        Ok(Gradients::from_map(by_id))
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Transpose(x) => {
                // forward mapped (r×c) -> (c×r); undo by transposing (c×r) back.
                let s = out.shape();
                let (r, c) = matrix_dims(s);
                let mut dx = vec![0.0; g.len()];
                for (src, dst) in g.chunks_exact(r * c).zip(dx.chunks_exact_mut(r * c)) {
                    kernels::transpose(src, r, c, dst);
                }
                accumulate(grads, *x, dx);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (ra, ca) = matrix_dims(sa);
                let cb = sb.k();
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                if self.wants(*a) {
                    let mut da = vec![0.0; ad.len()];
                    for n in 0..sa.n() {
                        kernels::gemm(
                            ra,
                            cb,
                            ca,
                            &g[n * ra * cb..(n + 1) * ra * cb],
                            false,
                            &bd[n * ca * cb..(n + 1) * ca * cb],
                            true,
                            &mut da[n * ra * ca..(n + 1) * ra * ca],
                            false,
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bd.len()];
                    for n in 0..sa.n() {
                        kernels::gemm(
                            ca,
                            ra,
                            cb,
                            &ad[n * ra * ca..(n + 1) * ra * ca],
                            true,
                            &g[n * ra * cb..(n + 1) * ra * cb],
                            false,
                            &mut db[n * ca * cb..(n + 1) * ca * cb],
                            false,
                        );
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Softmax(x) => {
                let k = out.shape().k();
                let mut dx = vec![0.0; g.len()];
                for ((y, gy), d) in out
                    .data()
                    .chunks_exact(k)
                    .zip(g.chunks_exact(k))
                    .zip(dx.chunks_exact_mut(k))
                {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..k {
                        d[c] = y[c] * (gy[c] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(self.val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(self.val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::WeightedSum3 { terms, weights } => {
                for (t, w) in terms.iter().zip(weights) {
                    let wv = self.val(*w).data()[0];
                    if self.wants(*t) {
                        accumulate(grads, *t, g.iter().map(|v| v * wv).collect());
                    }
                    if self.wants(*w) {
                        let dw = g.iter().zip(self.val(*t).data()).map(|(a, b)| a * b).sum();
                        accumulate(grads, *w, vec![dw]);
                    }
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.val(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.val(*x).shape();
                let (hw, k) = (s.spatial(), s.k());
                let inv = 1.0 / hw as f64;
                let mut dx = vec![0.0; s.len()];
                for n in 0..s.n() {
                    let gn = &g[n * k..(n + 1) * k];
                    for p in 0..hw {
                        let row = &mut dx[(n * hw + p) * k..(n * hw + p + 1) * k];
                        for (d, gv) in row.iter_mut().zip(gn) {
                            *d = gv * inv;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Conv1x1 { x, w, b } => {
                let s = self.val(*x).shape();
                let ws = self.val(*w).shape();
                let (rows, kin, kout) = (s.n() * s.spatial(), ws.w(), ws.k());
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * kin];
                    kernels::gemm(rows, kout, kin, g, false, self.val(*w).data(), true, &mut dx, false);
                    accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; kin * kout];
                    kernels::gemm(kin, rows, kout, self.val(*x).data(), true, g, false, &mut dw, false);
                    accumulate(grads, *w, dw);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, kernels::col_sums(g, kout));
                }
            }
            Op::Conv3x3 { x, w, b, geom, col } => {
                let kout = self.val(*w).shape().k();
                let (rows, patch) = (geom.rows(), geom.patch());
                if self.wants(*x) {
                    let mut dcol = vec![0.0; rows * patch];
                    kernels::gemm(rows, kout, patch, g, false, self.val(*w).data(), true, &mut dcol, false);
                    accumulate(grads, *x, kernels::col2im(&dcol, geom));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; patch * kout];
                    kernels::gemm(patch, rows, kout, col, true, g, false, &mut dw, false);
                    accumulate(grads, *w, dw);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, kernels::col_sums(g, kout));
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                let mut dx = vec![0.0; self.val(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                span,
                xhat,
                inv_std,
            } => {
                let k = out.shape().k();
                let span = *span;
                let gam = self.val(*gamma).data();
                if self.wants(*x) {
                    let inv_n = 1.0 / span as f64;
                    let mut dx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gy = &g[r * span..(r + 1) * span];
                        let xh = &xhat[r * span..(r + 1) * span];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for i in 0..span {
                            let d = gy[i] * gam[i % k];
                            mean_d += d;
                            mean_dx += d * xh[i];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for i in 0..span {
                            dx[r * span + i] = is * (gy[i] * gam[i % k] - mean_d - xh[i] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; k];
                    for (gy, xh) in g.chunks_exact(k).zip(xhat.chunks_exact(k)) {
                        for c in 0..k {
                            dg[c] += gy[c] * xh[c];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, kernels::col_sums(g, k));
                }
            }
            Op::Swish(x) => {
                let d = g
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(gv, &v)| {
                        let s = kernels::sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.val(*x).len()]),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * c + l] -= scale;
                }
                accumulate(grads, *logits, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, d: Vec<f64>) {
    match &mut grads[i] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&d) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
