//! Reverse-mode differentiation over an append-only tape.
//!
//! Every op appends one node holding its forward value plus whatever it needs
//! for the backward pass. Nodes only reference earlier nodes, so a single
//! reverse sweep visits them in topological order.

use indexmap::IndexMap;

use crate::error::{dim_err, param_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{GradRecord, ParamStore};
use crate::tensor::{gelu_grad_scalar, gelu_scalar, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub(crate) const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Gelu(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    MeanSpatial(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    MaxRelative {
        x: Var,
        /// Winning source node per output element, within its sample.
        argmax: Vec<u32>,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

/// Neighbor lists for one batch: `indices[b]` is row-major `[N × J]`.
#[derive(Clone, Copy, Debug)]
pub struct Gather<'a> {
    pub indices: &'a [Vec<usize>],
    pub per_node: usize,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar w.r.t. every node that required one.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records for backward.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            recording: true,
        }
    }

    /// Forward-only evaluation; `backward` on it is a state error.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        name: &str,
    ) -> Result<Var> {
        value.ensure_finite(name)?;
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store
            .entry(name)
            .ok_or_else(|| param_err!("unknown parameter {name}"))?;
        let v = self.leaf(entry.tensor.clone(), entry.requires_grad)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg, "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg, "sum")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg, "matmul")
    }

    /// Affine map over the last axis: `x[..., cin] · w[cin×cout] + b[cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w), self.shape(b));
        let cin = *xs.last().expect("rank ≥ 1");
        if ws.len() != 2 || ws[0] != cin || bs != [ws[1]] {
            return Err(dim_err!(
                "linear: input {xs:?}, weight {ws:?}, bias {bs:?} are inconsistent"
            ));
        }
        let cout = ws[1];
        let rows = self.value(x).len() / cin;
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b).data());
        }
        kernels::gemm(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            cin,
            cout,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let v = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(v, Op::Linear { x, w, b }, rg, "linear")
    }

    /// NHWC convolution; `w` is `[kh,kw,cin,cout]`, or `[kh,kw,1,c]` when depthwise.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        depthwise: bool,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding, depthwise)?;
        if self.shape(b) != [geom.cout] {
            return Err(dim_err!("conv bias must be [{}]", geom.cout));
        }
        let out = kernels::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let v = Tensor::from_vec(&geom.out_shape(), out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(v, Op::Conv { x, w, b, geom }, rg, "conv2d")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg, "gelu")
    }

    /// Per-channel standardization over every leading axis with a learned affine.
    ///
    /// With `running = None` batch statistics are used and returned; otherwise
    /// the given (mean, var) are treated as constants.
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
    ) -> Result<(Var, Option<NormStats<T>>)> {
        let c = *self.shape(x).last().expect("rank ≥ 1");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!("norm affine must be [{c}]"));
        }
        let xv = self.value(x).data();
        let m = xv.len() / c;
        let eps = T::of(NORM_EPS);
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(dim_err!("running statistics must be [{c}]"));
                }
                (rm.data().to_vec(), rv.data().to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0f64; c];
                for row in xv.chunks_exact(c) {
                    for (acc, &v) in mean.iter_mut().zip(row) {
                        *acc += v.f64();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0f64; c];
                for row in xv.chunks_exact(c) {
                    for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v.f64() - mu;
                        *acc += d * d;
                    }
                }
                let biased: Vec<T> = var.iter().map(|&s| T::of(s / m as f64)).collect();
                let unbiased = var
                    .iter()
                    .map(|&s| T::of(if m > 1 { s / (m - 1) as f64 } else { 0.0 }))
                    .collect();
                let mean_t: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();
                let stats = NormStats {
                    mean: mean_t.clone(),
                    var: unbiased,
                };
                (mean_t, biased, Some(stats))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bt[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let v = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let training = stats.is_some();
        let var = self.push(
            v,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
            "norm",
        )?;
        Ok((var, stats))
    }

    /// Mean over all axes between the first (batch) and last (channel).
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(dim_err!("mean_spatial needs [B, ..., C], got {s:?}"));
        }
        let (b, c) = (s[0], s[s.len() - 1]);
        let n = self.value(x).len() / (b * c);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for row in xv[bi * n * c..(bi + 1) * n * c].chunks_exact(c) {
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            let inv = T::one() / T::of(n as f64);
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        let v = Tensor::from_vec(&[b, c], out)?;
        let rg = self.rg(x);
        self.push(v, Op::MeanSpatial(x), rg, "mean_spatial")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg, "reshape")
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| param_err!("concat of nothing"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for p in parts {
            let s = self.shape(*p);
            if &s[..s.len() - 1] != lead {
                return Err(dim_err!("concat: leading extents differ"));
            }
        }
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| *self.shape(*p).last().unwrap())
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let v = Tensor::from_vec(&shape, out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// Max-relative aggregation over gathered nodes of the same sample:
    /// `out[b,i,:] = max_j x[b, idx[i,j], :] − x[b,i,:]` for `x[B,N,C]`.
    /// Ties go to the lowest `j`.
    pub fn max_relative(&mut self, x: Var, gather: Gather<'_>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err!("max_relative needs [B,N,C], got {s:?}"));
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let j = gather.per_node;
        if j == 0 {
            return Err(param_err!("max_relative over an empty set"));
        }
        if gather.indices.len() != b || gather.indices.iter().any(|v| v.len() != n * j) {
            return Err(dim_err!("neighbor lists do not match [{b},{n}]×{j}"));
        }
        if gather.indices.iter().flatten().any(|&k| k >= n) {
            return Err(param_err!("neighbor index out of range"));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * n * c];
        let mut argmax = vec![0u32; b * n * c];
        for bi in 0..b {
            let base = bi * n * c;
            let idx = &gather.indices[bi];
            for i in 0..n {
                let o = base + i * c;
                let nbrs = &idx[i * j..(i + 1) * j];
                let first = nbrs[0];
                out[o..o + c].copy_from_slice(&xv[base + first * c..base + (first + 1) * c]);
                argmax[o..o + c].iter_mut().for_each(|a| *a = first as u32);
                for &src in &nbrs[1..] {
                    let row = &xv[base + src * c..base + (src + 1) * c];
                    for ch in 0..c {
                        if row[ch] > out[o + ch] {
                            out[o + ch] = row[ch];
                            argmax[o + ch] = src as u32;
                        }
                    }
                }
                for ch in 0..c {
                    out[o + ch] = out[o + ch] - xv[o + ch];
                }
            }
        }
        let v = Tensor::from_vec(&s, out)?;
        let rg = self.rg(x);
        self.push(v, Op::MaxRelative { x, argmax }, rg, "max_relative")
    }

    /// Mean binary cross-entropy with logits over every element.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(dim_err!(
                "targets {:?} do not match logits {:?}",
                targets.shape(),
                self.shape(logits)
            ));
        }
        let z = self.value(logits).data();
        let mut acc = 0.0f64;
        for (&zi, &yi) in z.iter().zip(targets.data()) {
            let (zf, yf) = (zi.f64(), yi.f64());
            acc += zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p();
        }
        let v = Tensor::scalar(T::of(acc / z.len() as f64));
        let rg = self.rg(logits);
        self.push(
            v,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
            "bce_with_logits",
        )
    }

    /// Softmax cross-entropy against (possibly soft) target rows, averaged over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() {
            return Err(dim_err!(
                "softmax cross-entropy needs [B,K] logits and matching targets, got {s:?} and {:?}",
                targets.shape()
            ));
        }
        let (b, k) = (s[0], s[1]);
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * k);
        let mut acc = 0.0f64;
        for (row, y) in z.chunks_exact(k).zip(targets.data().chunks_exact(k)) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let lse = mx + row.iter().map(|v| (v.f64() - mx).exp()).sum::<f64>().ln();
            for (&zi, &yi) in row.iter().zip(y) {
                let logp = zi.f64() - lse;
                acc -= yi.f64() * logp;
                probs.push(T::of(logp.exp()));
            }
        }
        let v = Tensor::scalar(T::of(acc / b as f64));
        let rg = self.rg(logits);
        self.push(
            v,
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.clone(),
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn grads(&self, loss: Var) -> Result<Grads<T>> {
        if !self.recording {
            return Err(Error::State(
                "backward on a tape that was not recording".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called before any forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(dim_err!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Gradients for every learnable parameter in `store`; parameters the
    /// loss does not depend on get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<GradRecord<T>> {
        let grads = self.grads(loss)?;
        let mut out = IndexMap::new();
        for (name, entry) in store.iter() {
            if !entry.requires_grad {
                continue;
            }
            let g = self
                .params
                .get(name)
                .and_then(|&v| grads.wrt(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(entry.tensor.shape()));
            out.insert(name.to_string(), g);
        }
        Ok(GradRecord::from_map(out))
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, gd, T::one()));
                self.acc(grads, *b, |d| axpy(d, gd, T::one()));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, gd, T::one()));
                self.acc(grads, *b, |d| axpy(d, gd, -T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(bv) {
                        *d = *d + g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(av) {
                        *d = *d + g * x;
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |d| axpy(d, gd, *s)),
            Op::Sum(a) => {
                let g0 = gd[0];
                self.acc(grads, *a, |d| d.iter_mut().for_each(|v| *v = *v + g0));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.acc(grads, *a, |d| kernels::gemm_nt(gd, bv.data(), d, m, n, k));
                self.acc(grads, *b, |d| kernels::gemm_tn(av.data(), gd, d, m, k, n));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / cin;
                self.acc(grads, *x, |d| {
                    kernels::gemm_nt(gd, wv.data(), d, rows, cout, cin)
                });
                self.acc(grads, *w, |d| {
                    kernels::gemm_tn(xv.data(), gd, d, rows, cin, cout)
                });
                self.acc(grads, *b, |d| {
                    for row in gd.chunks_exact(cout) {
                        axpy(d, row, T::one());
                    }
                });
            }
            Op::Conv { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.rg(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = self.rg(*b).then(|| vec![T::zero(); geom.cout]);
                kernels::conv_backward(
                    geom,
                    xv,
                    wv,
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, part) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(part) = part {
                        self.acc(grads, v, |d| axpy(d, &part, T::one()));
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, &g), &xi) in d.iter_mut().zip(gd).zip(xv) {
                        *d = *d + g * gelu_grad_scalar(xi);
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] = sum_g[j] + grow[j];
                        sum_gx[j] = sum_gx[j] + grow[j] * hrow[j];
                    }
                }
                self.acc(grads, *gamma, |d| axpy(d, &sum_gx, T::one()));
                self.acc(grads, *beta, |d| axpy(d, &sum_g, T::one()));
                self.acc(grads, *x, |d| {
                    let mf = T::of(m as f64);
                    for ((drow, grow), hrow) in d
                        .chunks_exact_mut(c)
                        .zip(gd.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for j in 0..c {
                            let dxhat = grow[j] * gam[j];
                            let v = if *training {
                                inv_std[j] / mf
                                    * (mf * dxhat
                                        - gam[j] * sum_g[j]
                                        - hrow[j] * gam[j] * sum_gx[j])
                            } else {
                                dxhat * inv_std[j]
                            };
                            drow[j] = drow[j] + v;
                        }
                    }
                });
            }
            Op::MeanSpatial(x) => {
                let s = self.shape(*x);
                let (b, c) = (s[0], s[s.len() - 1]);
                let n = self.value(*x).len() / (b * c);
                let inv = T::one() / T::of(n as f64);
                self.acc(grads, *x, |d| {
                    for bi in 0..b {
                        let grow = &gd[bi * c..(bi + 1) * c];
                        for drow in d[bi * n * c..(bi + 1) * n * c].chunks_exact_mut(c) {
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv = *dv + gv * inv;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, gd, T::one())),
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| *self.shape(*p).last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    self.acc(grads, *p, |d| {
                        for (drow, grow) in d.chunks_exact_mut(w).zip(gd.chunks_exact(total)) {
                            axpy(drow, &grow[offset..offset + w], T::one());
                        }
                    });
                    offset += w;
                }
            }
            Op::MaxRelative { x, argmax } => {
                let s = self.shape(*x);
                let (b, n, c) = (s[0], s[1], s[2]);
                self.acc(grads, *x, |d| {
                    for bi in 0..b {
                        let base = bi * n * c;
                        for i in 0..n {
                            for ch in 0..c {
                                let o = base + i * c + ch;
                                let src = argmax[o] as usize;
                                d[base + src * c + ch] = d[base + src * c + ch] + gd[o];
                                d[o] = d[o] - gd[o];
                            }
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = gd[0] / T::of(z.len() as f64);
                self.acc(grads, *logits, |d| {
                    for ((d, &zi), &yi) in d.iter_mut().zip(z).zip(targets.data()) {
                        let sig = T::one() / (T::one() + (-zi).exp());
                        *d = *d + (sig - yi) * scale;
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
            } => {
                let k = targets.shape()[1];
                let b = targets.shape()[0];
                let scale = gd[0] / T::of(b as f64);
                self.acc(grads, *logits, |d| {
                    for ((drow, prow), yrow) in d
                        .chunks_exact_mut(k)
                        .zip(probs.chunks_exact(k))
                        .zip(targets.data().chunks_exact(k))
                    {
                        let mass: T = yrow.iter().copied().sum();
                        for j in 0..k {
                            drow[j] = drow[j] + (prow[j] * mass - yrow[j]) * scale;
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(slot.data_mut());
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}
