//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! gradients into every node that requires them. Tapes are built per step and
//! dropped afterwards.
//!
//! ```
//! use tokprune::autodiff::Tape;
//! use tokprune::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, -2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
//! ```

use crate::error::{dim_err, Error, Result};
use crate::tensor::{self, gemm, MatRef, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    ScaleRows(Var, Var),
    Softmax {
        x: Var,
        w: Option<Var>,
        exps: Vec<f64>,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Recip(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Broadcast(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => dim_err(format!("expected a matrix, got shape {s:?}")),
        }
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, op)
    }

    // ----- linear algebra -------------------------------------------------

    /// `a · b` for an `m×k` and a `k×p` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for an `m×k` and a `p×k` matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a)?;
        let (br, bc) = self.matrix_dims(b)?;
        let (kb, p) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return dim_err(format!("matmul inner dimensions {k} and {kb} differ"));
        }
        let out = if trans_b {
            tensor::matmul_rm_t(self.data(a), self.data(b), m, k, p)
        } else {
            tensor::matmul_rm(self.data(a), self.data(b), m, k, p)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, p], out)?, rg, Op::MatMul { a, b, trans_b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x)?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, rg, Op::Transpose(x)))
    }

    // ----- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: impl Fn(Var, Var) -> Op) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddConst(x), |v| v + c)
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return dim_err("add_const shape mismatch");
        }
        let data = self.data(x).iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::AddConst(x)))
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.nodes[s.0].value.is_scalar() {
            return dim_err("mul_scalar expects a scalar multiplier");
        }
        let c = self.item(s);
        let t = &self.nodes[x.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, rg, Op::MulScalar(x, s)))
    }

    /// Scales row `i` of an `n×d` matrix by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(x)?;
        if self.nodes[w.0].value.len() != n {
            return dim_err("scale_rows weight length must equal row count");
        }
        let xs = self.data(x);
        let ws = self.data(w);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = xs[i * d + j] * ws[i];
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(vec![n, d], out)?, rg, Op::ScaleRows(x, w)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), tensor::gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), tensor::sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    /// `ln(1 + eˣ)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), tensor::softplus)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    // ----- normalizations -------------------------------------------------

    /// Row-wise softmax of a matrix, stabilized by the per-row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax where column `j` is weighted by `w[j]` before the
    /// row is renormalized. Weight 0 removes the key exactly.
    pub fn weighted_softmax_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        self.softmax_impl(x, Some(w))
    }

    fn softmax_impl(&mut self, x: Var, w: Option<Var>) -> Result<Var> {
        let (n, m) = self.matrix_dims(x)?;
        if let Some(w) = w {
            if self.nodes[w.0].value.len() != m {
                return dim_err("softmax key weights must match column count");
            }
        }
        let xs = self.data(x);
        let ws = w.map(|w| self.data(w));
        let mut out = vec![0.0; n * m];
        let mut exps = vec![0.0; n * m];
        let mut norms = vec![0.0; n];
        for r in 0..n {
            norms[r] = tensor::weighted_softmax_row(
                &xs[r * m..(r + 1) * m],
                ws,
                &mut out[r * m..(r + 1) * m],
                &mut exps[r * m..(r + 1) * m],
            )?;
        }
        let rg = match w {
            Some(w) => self.rg(&[x, w]),
            None => self.rg(&[x]),
        };
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::Softmax { x, w, exps, norms }))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.nodes[x.0].value.cols();
        if self.nodes[gamma.0].value.len() != d || self.nodes[beta.0].value.len() != d {
            return dim_err("layer norm parameters must match the last axis");
        }
        if eps <= 0.0 {
            return Err(Error::Input("layer norm eps must be positive".into()));
        }
        let (y, xhat, rstd) = tensor::layer_norm_rows(self.data(x), d, self.data(gamma), self.data(beta), eps);
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    // ----- reductions and reshaping ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Picks rows (first-axis entries) in the given order; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.gather_rows(idx)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat of zero tensors".into()));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.matrix_dims(p)?);
        }
        let n = dims[0].0;
        if dims.iter().any(|&(r, _)| r != n) {
            return dim_err("concat_cols row counts differ");
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &(_, c)) in parts.iter().zip(&dims) {
            let src = self.data(p);
            for r in 0..n {
                out[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![n, total], out)?, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.matrix_dims(x)?;
        if start >= end || end > c {
            return dim_err(format!("column range {start}..{end} invalid for {c} columns"));
        }
        let w = end - start;
        let src = self.data(x);
        let mut out = vec![0.0; n * w];
        for r in 0..n {
            out[r * w..(r + 1) * w].copy_from_slice(&src[r * c + start..r * c + end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, w], out)?, rg, Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Repeats a scalar node into a tensor of the given shape.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if !self.nodes[x.0].value.is_scalar() {
            return dim_err("only scalars can be broadcast");
        }
        let value = Tensor::filled(shape, self.item(x));
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Broadcast(x)))
    }

    // ----- backward --------------------------------------------------------

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    /// Calling it twice without [`Tape::zero_grads`] adds the gradients again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = node.value.cols();
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    // dA = dC · Bᵀ (or dC · B when C = A·Bᵀ)
                    let bview = if *trans_b {
                        MatRef::rm(bd, k)
                    } else {
                        MatRef::rm_t(bd, p)
                    };
                    gemm(m, p, k, MatRef::rm(g, p), bview, 1.0, s);
                });
                acc(*b, &mut |s| {
                    if *trans_b {
                        // dB = dCᵀ · A, shape p×k
                        gemm(p, m, k, MatRef::rm_t(g, p), MatRef::rm(ad, k), 1.0, s);
                    } else {
                        // dB = Aᵀ · dC, shape k×p
                        gemm(k, m, p, MatRef::rm_t(ad, k), MatRef::rm(g, p), 1.0, s);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |s| {
                    for a in 0..r {
                        for b in 0..c {
                            s[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] * bd[k]));
                acc(*b, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] * ad[k]));
            }
            Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)),
            Op::AddConst(x) | Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::MulScalar(x, sc) => {
                let c = self.item(*sc);
                let xd = self.data(*x);
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c));
                acc(*sc, &mut |s| s[0] += g.iter().zip(xd).map(|(g, x)| g * x).sum::<f64>());
            }
            Op::ScaleRows(x, w) => {
                let d = node.value.cols();
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc(*x, &mut |s| {
                    for (k, v) in s.iter_mut().enumerate() {
                        *v += g[k] * wd[k / d];
                    }
                });
                acc(*w, &mut |s| {
                    for (r, v) in s.iter_mut().enumerate() {
                        *v += (0..d).map(|c| g[r * d + c] * xd[r * d + c]).sum::<f64>();
                    }
                });
            }
            Op::Softmax { x, w, exps, norms } => {
                let m = node.value.cols();
                let n = norms.len();
                let dots: Vec<f64> = (0..n)
                    .map(|r| (0..m).map(|c| g[r * m + c] * out[r * m + c]).sum())
                    .collect();
                acc(*x, &mut |s| {
                    for r in 0..n {
                        for c in 0..m {
                            let k = r * m + c;
                            s[k] += out[k] * (g[k] - dots[r]);
                        }
                    }
                });
                if let Some(w) = w {
                    acc(*w, &mut |s| {
                        for r in 0..n {
                            for c in 0..m {
                                let k = r * m + c;
                                s[c] += exps[k] / norms[r] * (g[k] - dots[r]);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let rows = rstd.len();
                let gm = self.data(*gamma);
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        let base = r * d;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g[base + c] * gm[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[base + c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = g[base + c] * gm[c];
                            s[base + c] += rstd[r] * (dh - mean_dh - xhat[base + c] * mean_dh_h);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k % d] += gk * xhat[k];
                    }
                });
                acc(*beta, &mut |s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k % d] += gk;
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    (0..s.len()).for_each(|k| s[k] += g[k] * tensor::gelu_grad(xd[k]))
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |s| {
                (0..s.len()).for_each(|k| s[k] += g[k] * out[k] * (1.0 - out[k]))
            }),
            Op::Exp(x) => acc(*x, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] * out[k])),
            Op::Ln(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] / xd[k]));
            }
            Op::Softplus(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    (0..s.len()).for_each(|k| s[k] += g[k] * tensor::sigmoid(xd[k]))
                });
            }
            Op::Recip(x) => acc(*x, &mut |s| (0..s.len()).for_each(|k| s[k] -= g[k] * out[k] * out[k])),
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        if xd[k] > *lo && xd[k] < *hi {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::GatherRows { x, idx } => {
                let src = &self.nodes[x.0].value;
                let cols = if src.shape().len() == 1 { 1 } else { src.cols() };
                acc(*x, &mut |s| {
                    for (o, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            s[i * cols + c] += g[o * cols + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let n = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.cols();
                    acc(p, &mut |s| {
                        for r in 0..n {
                            for j in 0..c {
                                s[r * c + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.nodes[x.0].value.cols();
                let w = node.value.cols();
                let n = node.value.rows();
                acc(*x, &mut |s| {
                    for r in 0..n {
                        for j in 0..w {
                            s[r * c + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::Broadcast(x) => acc(*x, &mut |s| s[0] += g.iter().sum::<f64>()),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
