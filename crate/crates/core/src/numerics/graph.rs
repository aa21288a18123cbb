//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op as a node holding its output value.
//! Parameter leaves read straight from a borrowed [`ParamStore`], so building
//! a graph never copies weights. [`Graph::backward`] walks the tape in
//! reverse and returns the gradient of each parameter that was touched.

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

pub const LN_EPS: f32 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRows { x: Var, row: Var },
    Scale(Var, f32),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: Vec<f32>, hi: Vec<f32> },
    Min(Var, Var),
    Max(Var, Var),
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, offset: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    StackLast(Vec<Var>),
    SliceOuter { x: Var, start: usize },
    MaxRows { x: Var, argmax: Vec<usize> },
    MeanRows(Var),
    Reshape(Var),
    Pick { x: Var, idx: Vec<usize> },
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation over a borrowed parameter store.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    track: bool,
}

impl<'a> Graph<'a> {
    /// A graph whose parameter leaves require gradients.
    pub fn new(store: &'a ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), track: true }
    }

    /// A graph used only for forward evaluation; `backward` always fails.
    pub fn no_grad(store: &'a ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), track: false }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.store.get(id).value,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Input, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Tensor::default(), op: Op::Param(id), requires_grad: self.track });
        Var(self.nodes.len() - 1)
    }

    /// Copies a value out of the graph as a constant input.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    /// `x·W (+ b)` applied over the last dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return shape_err(format!("linear {:?} x {:?}", xs, ws));
        }
        let (a, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return shape_err(format!("bias {:?} for width {}", self.shape(b), n));
            }
        }
        let rows = self.value(x).len() / a;
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            a,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched product of `[B,n,k]` with `[B,k,m]` (or `[B,m,k]ᵀ`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("bmm {:?} x {:?}", sa, sb));
        }
        let (batch, n, k) = (sa[0], sa[1], sa[2]);
        let (kb, m) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err(format!("bmm inner {:?} x {:?}", sa, sb));
        }
        let mut out = vec![0.0; batch * n * m];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            gemm(
                n,
                k,
                m,
                &av[t * n * k..(t + 1) * n * k],
                false,
                &bv[t * k * m..(t + 1) * k * m],
                trans_b,
                &mut out[t * n * m..(t + 1) * n * m],
                0.0,
            );
        }
        let value = Tensor::new(vec![batch, n, m], out)?;
        Ok(self.push(value, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{} {:?} vs {:?}", name, self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn unary(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let data = self.value(x).data().iter().map(|v| f(*v)).collect();
        Tensor::new(self.shape(x).to_vec(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "min", f32::min)?;
        Ok(self.push(v, Op::Min(a, b), &[a, b]))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "max", f32::max)?;
        Ok(self.push(v, Op::Max(a, b), &[a, b]))
    }

    /// Adds a `[B,1,d]` row to every row of a `[B,N,d]` tensor.
    pub fn add_rows(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sx.len() != 3 || sr != [sx[0], 1, sx[2]] {
            return shape_err(format!("add_rows {:?} + {:?}", sx, sr));
        }
        let (n, d) = (sx[1], sx[2]);
        let mut out = self.value(x).data().to_vec();
        let r = self.value(row).data();
        for (t, block) in out.chunks_exact_mut(n * d).enumerate() {
            let rt = &r[t * d..(t + 1) * d];
            for line in block.chunks_exact_mut(d) {
                line.iter_mut().zip(rt).for_each(|(o, v)| *o += v);
            }
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(value, Op::AddRows { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let v = self.unary(x, |a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.unary(x, |a| a.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.unary(x, f32::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.unary(x, f32::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.unary(x, f32::ln);
        self.push(v, Op::Ln(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.unary(x, f32::abs);
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.unary(x, |a| a * a);
        self.push(v, Op::Square(x), &[x])
    }

    /// Elementwise clamp into `[lo_i, hi_i]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: Vec<f32>, hi: Vec<f32>) -> Result<Var> {
        let len = self.value(x).len();
        if lo.len() != len || hi.len() != len {
            return shape_err("clamp bounds length");
        }
        let data = self.value(x).data().iter().zip(lo.iter().zip(&hi)).map(|(v, (l, h))| v.max(*l).min(*h)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Clamp { x, lo, hi }, &[x]))
    }

    /// Softmax over the last dimension. Entries whose `mask` flag is `true`
    /// get probability exactly zero; a row with every entry masked is an error.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return shape_err(format!("mask length {} for {:?}", m.len(), xv.shape()));
            }
        }
        let width = xv.last_dim();
        let mut out = vec![0.0f32; xv.len()];
        for (r, (row, dst)) in xv.data().chunks_exact(width).zip(out.chunks_exact_mut(width)).enumerate() {
            let mrow = mask.map(|m| &m[r * width..(r + 1) * width]);
            let open = |j: usize| mrow.is_none_or(|m| !m[j]);
            let mut peak = f32::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if open(j) && *v > peak {
                    peak = *v;
                }
            }
            if peak == f32::NEG_INFINITY {
                return Err(Error::FullyMasked { row: r });
            }
            let mut total = 0.0f32;
            for (j, v) in row.iter().enumerate() {
                if open(j) {
                    let e = (v - peak).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            let inv = 1.0 / total;
            dst.iter_mut().for_each(|e| *e *= inv);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Layer normalization over the last dimension followed by `gain`/`offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d < 2 || self.shape(gain) != [d] || self.shape(offset) != [d] {
            return shape_err(format!("layer_norm width {}", d));
        }
        let xv = self.value(x).data();
        let (g, o) = (self.value(gain).data(), self.value(offset).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0f32; xv.len()];
        let mut inv_std = vec![0.0f32; rows];
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + o[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, offset, xhat, inv_std }, &[x, gain, offset]))
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let w = self.value(x).last_dim();
        if start + len > w || len == 0 {
            return shape_err(format!("slice {}..{} of width {}", start, start + len, w));
        }
        let mut out = Vec::with_capacity(self.value(x).len() / w * len);
        for row in self.value(x).data().chunks_exact(w) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SliceLast { x, start }, &[x]))
    }

    /// Concatenation along the last dimension.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for v in xs {
            let s = self.shape(*v);
            if &s[..s.len() - 1] != lead {
                return shape_err(format!("concat {:?} with {:?}", first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatLast(xs.to_vec()), xs))
    }

    /// Stacks equal-shape tensors along a new trailing dimension.
    pub fn stack_last(&mut self, xs: &[Var]) -> Result<Var> {
        let shape = self.shape(xs[0]).to_vec();
        if xs.iter().any(|v| self.shape(*v) != shape.as_slice()) {
            return shape_err("stack of unequal shapes");
        }
        let len = self.value(xs[0]).len();
        let k = xs.len();
        let mut out = vec![0.0; len * k];
        for (c, v) in xs.iter().enumerate() {
            for (i, val) in self.value(*v).data().iter().enumerate() {
                out[i * k + c] = *val;
            }
        }
        let mut new_shape = shape;
        new_shape.push(k);
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::StackLast(xs.to_vec()), xs))
    }

    /// Entries `start..start+len` along the first dimension.
    pub fn slice_outer(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] || len == 0 {
            return shape_err(format!("slice_outer {}..{} of {:?}", start, start + len, s));
        }
        let inner: usize = s[1..].iter().product();
        let out = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SliceOuter { x, start }, &[x]))
    }

    fn rows3(&self, x: Var, name: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] == 0 {
            return shape_err(format!("{} expects [B,N,d], got {:?}", name, s));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Column-wise max over the node axis: `[B,N,d] → [B,1,d]`.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (b, n, d) = self.rows3(x, "max_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![f32::NEG_INFINITY; b * d];
        let mut argmax = vec![0usize; b * d];
        for t in 0..b {
            for i in 0..n {
                for j in 0..d {
                    let v = xv[(t * n + i) * d + j];
                    if v > out[t * d + j] {
                        out[t * d + j] = v;
                        argmax[t * d + j] = i;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, 1, d], out)?;
        Ok(self.push(value, Op::MaxRows { x, argmax }, &[x]))
    }

    /// Column-wise mean over the node axis: `[B,N,d] → [B,1,d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (b, n, d) = self.rows3(x, "mean_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for t in 0..b {
            for i in 0..n {
                for j in 0..d {
                    out[t * d + j] += xv[(t * n + i) * d + j];
                }
            }
        }
        let inv = 1.0 / n as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![b, 1, d], out)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// For a `[R,C]` tensor, picks column `idx[r]` of each row → `[R]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|i| *i >= s[1]) {
            return shape_err(format!("pick {} indices from {:?}", idx.len(), s));
        }
        let c = s[1];
        let xv = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, i)| xv[r * c + i]).collect();
        let value = Tensor::new(vec![idx.len()], out)?;
        Ok(self.push(value, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().map(|v| *v as f64).sum::<f64>() / xv.len().max(1) as f64;
        self.push(Tensor::scalar(m as f32), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| *v as f64).sum::<f64>();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("loss must be scalar, got {:?}", self.shape(loss)));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.entries.iter_mut().find(|(p, _)| p == id) {
                    Some((_, g)) => g.iter_mut().zip(&dy).for_each(|(a, b)| *a += b),
                    None => out.entries.push((*id, dy)),
                },
                Op::Linear { x, w, b } => {
                    let (a, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                    let rows = dy.len() / n;
                    if self.nodes[x.0].requires_grad {
                        let g = slot(&mut grads, *x, rows * a);
                        gemm(rows, n, a, &dy, false, self.value(*w).data(), true, g, 1.0);
                    }
                    if self.nodes[w.0].requires_grad {
                        let g = slot(&mut grads, *w, a * n);
                        gemm(a, rows, n, self.value(*x).data(), true, &dy, false, g, 1.0);
                    }
                    if let Some(b) = b {
                        if self.nodes[b.0].requires_grad {
                            let g = slot(&mut grads, *b, n);
                            for row in dy.chunks_exact(n) {
                                g.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (batch, n, k) = (sa[0], sa[1], sa[2]);
                    let m = if *trans_b { sb[1] } else { sb[2] };
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.nodes[a.0].requires_grad {
                        let g = slot(&mut grads, *a, batch * n * k);
                        for t in 0..batch {
                            // dA = dC · Bᵀ  (B stored k×m) or dC · B (B stored m×k)
                            gemm(
                                n,
                                m,
                                k,
                                &dy[t * n * m..(t + 1) * n * m],
                                false,
                                &bv[t * k * m..(t + 1) * k * m],
                                !*trans_b,
                                &mut g[t * n * k..(t + 1) * n * k],
                                1.0,
                            );
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let g = slot(&mut grads, *b, batch * k * m);
                        for t in 0..batch {
                            let dct = &dy[t * n * m..(t + 1) * n * m];
                            let at = &av[t * n * k..(t + 1) * n * k];
                            let gt = &mut g[t * k * m..(t + 1) * k * m];
                            if *trans_b {
                                // dB (m×k) = dCᵀ · A
                                gemm(m, n, k, dct, true, at, false, gt, 1.0);
                            } else {
                                // dB (k×m) = Aᵀ · dC
                                gemm(k, n, m, at, true, dct, false, gt, 1.0);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, self, *a, &dy, |d, _| d);
                    acc(&mut grads, self, *b, &dy, |d, _| d);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, self, *a, &dy, |d, _| d);
                    acc(&mut grads, self, *b, &dy, |d, _| -d);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.nodes[a.0].requires_grad {
                        let g = slot(&mut grads, *a, dy.len());
                        for i in 0..dy.len() {
                            g[i] += dy[i] * bv[i];
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let g = slot(&mut grads, *b, dy.len());
                        for i in 0..dy.len() {
                            g[i] += dy[i] * av[i];
                        }
                    }
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    // ties route the gradient to the first operand
                    let first: Vec<bool> =
                        av.iter().zip(bv).map(|(x, y)| if is_min { x <= y } else { x >= y }).collect();
                    if self.nodes[a.0].requires_grad {
                        let g = slot(&mut grads, *a, dy.len());
                        for i in 0..dy.len() {
                            if first[i] {
                                g[i] += dy[i];
                            }
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let g = slot(&mut grads, *b, dy.len());
                        for i in 0..dy.len() {
                            if !first[i] {
                                g[i] += dy[i];
                            }
                        }
                    }
                }
                Op::AddRows { x, row } => {
                    acc(&mut grads, self, *x, &dy, |d, _| d);
                    if self.nodes[row.0].requires_grad {
                        let s = self.shape(*x);
                        let (n, d) = (s[1], s[2]);
                        let g = slot(&mut grads, *row, s[0] * d);
                        for (t, block) in dy.chunks_exact(n * d).enumerate() {
                            let gt = &mut g[t * d..(t + 1) * d];
                            for line in block.chunks_exact(d) {
                                gt.iter_mut().zip(line).for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                }
                Op::Scale(x, s) => acc(&mut grads, self, *x, &dy, |d, _| d * s),
                Op::Relu(x) => acc(&mut grads, self, *x, &dy, |d, v| if v > 0.0 { d } else { 0.0 }),
                Op::Tanh(x) => {
                    let y = node.value.data();
                    if self.nodes[x.0].requires_grad {
                        let g = slot(&mut grads, *x, dy.len());
                        for i in 0..dy.len() {
                            g[i] += dy[i] * (1.0 - y[i] * y[i]);
                        }
                    }
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    if self.nodes[x.0].requires_grad {
                        let g = slot(&mut grads, *x, dy.len());
                        for i in 0..dy.len() {
                            g[i] += dy[i] * y[i];
                        }
                    }
                }
                Op::Ln(x) => acc(&mut grads, self, *x, &dy, |d, v| d / v),
                Op::Abs(x) => acc(&mut grads, self, *x, &dy, |d, v| {
                    if v > 0.0 {
                        d
                    } else if v < 0.0 {
                        -d
                    } else {
                        0.0
                    }
                }),
                Op::Square(x) => acc(&mut grads, self, *x, &dy, |d, v| 2.0 * v * d),
                Op::Clamp { x, lo, hi } => {
                    if self.nodes[x.0].requires_grad {
                        let xv = self.value(*x).data();
                        let g = slot(&mut grads, *x, dy.len());
                        for i in 0..dy.len() {
                            if xv[i] > lo[i] && xv[i] < hi[i] {
                                g[i] += dy[i];
                            }
                        }
                    }
                }
                Op::Softmax { x } => {
                    if self.nodes[x.0].requires_grad {
                        let y = node.value.data();
                        let w = node.value.last_dim();
                        let g = slot(&mut grads, *x, dy.len());
                        for ((yr, dr), gr) in y.chunks_exact(w).zip(dy.chunks_exact(w)).zip(g.chunks_exact_mut(w)) {
                            let dot: f32 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for j in 0..w {
                                gr[j] += yr[j] * (dr[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, offset, xhat, inv_std } => {
                    let d = node.value.last_dim();
                    let gv = self.value(*gain).data();
                    if self.nodes[x.0].requires_grad {
                        let g = slot(&mut grads, *x, dy.len());
                        let mut dxhat = vec![0.0f32; d];
                        for (r, is) in inv_std.iter().enumerate() {
                            let dr = &dy[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxhat[j] = dr[j] * gv[j];
                            }
                            let m1 = dxhat.iter().sum::<f32>() / d as f32;
                            let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                            for j in 0..d {
                                g[r * d + j] += is * (dxhat[j] - m1 - hr[j] * m2);
                            }
                        }
                    }
                    if self.nodes[gain.0].requires_grad {
                        let g = slot(&mut grads, *gain, d);
                        for (dr, hr) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                g[j] += dr[j] * hr[j];
                            }
                        }
                    }
                    if self.nodes[offset.0].requires_grad {
                        let g = slot(&mut grads, *offset, d);
                        for dr in dy.chunks_exact(d) {
                            g.iter_mut().zip(dr).for_each(|(a, v)| *a += v);
                        }
                    }
                }
                Op::SliceLast { x, start } => {
                    if self.nodes[x.0].requires_grad {
                        let w = self.value(*x).last_dim();
                        let len = node.value.last_dim();
                        let g = slot(&mut grads, *x, self.value(*x).len());
                        for (gr, dr) in g.chunks_exact_mut(w).zip(dy.chunks_exact(len)) {
                            gr[*start..start + len].iter_mut().zip(dr).for_each(|(a, v)| *a += v);
                        }
                    }
                }
                Op::ConcatLast(xs) => {
                    let total = node.value.last_dim();
                    let rows = dy.len() / total;
                    let mut offset = 0;
                    for v in xs {
                        let w = self.value(*v).last_dim();
                        if self.nodes[v.0].requires_grad {
                            let g = slot(&mut grads, *v, rows * w);
                            for r in 0..rows {
                                let src = &dy[r * total + offset..r * total + offset + w];
                                g[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, s)| *a += s);
                            }
                        }
                        offset += w;
                    }
                }
                Op::StackLast(xs) => {
                    let k = xs.len();
                    for (c, v) in xs.iter().enumerate() {
                        if self.nodes[v.0].requires_grad {
                            let len = dy.len() / k;
                            let g = slot(&mut grads, *v, len);
                            for i in 0..len {
                                g[i] += dy[i * k + c];
                            }
                        }
                    }
                }
                Op::SliceOuter { x, start } => {
                    if self.nodes[x.0].requires_grad {
                        let total = self.value(*x).len();
                        let inner = total / self.shape(*x)[0];
                        let g = slot(&mut grads, *x, total);
                        let off = start * inner;
                        g[off..off + dy.len()].iter_mut().zip(&dy).for_each(|(a, v)| *a += v);
                    }
                }
                Op::MaxRows { x, argmax } => {
                    if self.nodes[x.0].requires_grad {
                        let s = self.shape(*x);
                        let (n, d) = (s[1], s[2]);
                        let g = slot(&mut grads, *x, self.value(*x).len());
                        for (k, i) in argmax.iter().enumerate() {
                            let (t, j) = (k / d, k % d);
                            g[(t * n + i) * d + j] += dy[k];
                        }
                    }
                }
                Op::MeanRows(x) => {
                    if self.nodes[x.0].requires_grad {
                        let s = self.shape(*x);
                        let (b, n, d) = (s[0], s[1], s[2]);
                        let inv = 1.0 / n as f32;
                        let g = slot(&mut grads, *x, b * n * d);
                        for t in 0..b {
                            for i in 0..n {
                                for j in 0..d {
                                    g[(t * n + i) * d + j] += dy[t * d + j] * inv;
                                }
                            }
                        }
                    }
                }
                Op::Reshape(x) => acc(&mut grads, self, *x, &dy, |d, _| d),
                Op::Pick { x, idx } => {
                    if self.nodes[x.0].requires_grad {
                        let c = self.shape(*x)[1];
                        let g = slot(&mut grads, *x, self.value(*x).len());
                        for (r, i) in idx.iter().enumerate() {
                            g[r * c + i] += dy[r];
                        }
                    }
                }
                Op::Mean(x) => {
                    let len = self.value(*x).len();
                    let s = dy[0] / len as f32;
                    acc(&mut grads, self, *x, &vec![s; len], |d, _| d);
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    acc(&mut grads, self, *x, &vec![dy[0]; len], |d, _| d);
                }
            }
        }
        out.entries.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Accumulates `f(dy_i, x_i)` into the gradient of `x`.
fn acc(grads: &mut [Option<Vec<f32>>], graph: &Graph<'_>, x: Var, dy: &[f32], f: impl Fn(f32, f32) -> f32) {
    if !graph.nodes[x.0].requires_grad {
        return;
    }
    let xv = graph.value(x).data();
    let g = slot(grads, x, dy.len());
    for i in 0..dy.len() {
        g[i] += f(dy[i], xv[i]);
    }
}
