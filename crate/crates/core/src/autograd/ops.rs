//! Elementwise, shape and reduction operations.

use super::graph::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Tensor};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Source strides aligned to `out`, zero on broadcast axes.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + n - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn walk_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let n = out.len();
    let mut idx = vec![0usize; n];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..n).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Graph {
    fn binary(&self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let Some(out_shape) = broadcast_shape(va.shape(), vb.shape()) else {
            return shape_err(format!(
                "cannot broadcast {:?} with {:?}",
                va.shape(),
                vb.shape()
            ));
        };
        let sa = broadcast_strides(va.shape(), &out_shape);
        let sb = broadcast_strides(vb.shape(), &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        let (da, db) = (va.data(), vb.data());
        if va.shape() == vb.shape() {
            for ((o, x), y) in out.iter_mut().zip(da).zip(db) {
                *o = match op {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                };
            }
        } else {
            walk_broadcast(&out_shape, &sa, &sb, |o, i, j| {
                out[o] = match op {
                    Binary::Add => da[i] + db[j],
                    Binary::Sub => da[i] - db[j],
                    Binary::Mul => da[i] * db[j],
                };
            });
        }
        let value = Tensor::from_parts(out_shape.clone(), out);
        Ok(self.custom(&[a, b], value, move |ctx| {
            let (xa, xb) = (&ctx.inputs[0], &ctx.inputs[1]);
            let g = ctx.grad.data();
            let mut ga = vec![0.0; xa.numel()];
            let mut gb = vec![0.0; xb.numel()];
            let (da, db) = (xa.data(), xb.data());
            walk_broadcast(&out_shape, &sa, &sb, |o, i, j| match op {
                Binary::Add => {
                    ga[i] += g[o];
                    gb[j] += g[o];
                }
                Binary::Sub => {
                    ga[i] += g[o];
                    gb[j] -= g[o];
                }
                Binary::Mul => {
                    ga[i] += g[o] * db[j];
                    gb[j] += g[o] * da[i];
                }
            });
            vec![
                Some(Tensor::from_parts(xa.shape().to_vec(), ga)),
                Some(Tensor::from_parts(xb.shape().to_vec(), gb)),
            ]
        }))
    }

    /// Broadcasting addition (numpy rules).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative given input and output.
    pub fn unary(
        &self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.custom(&[x], value, move |ctx| {
            let data = ctx
                .grad
                .data()
                .iter()
                .zip(ctx.inputs[0].data())
                .zip(ctx.output.data())
                .map(|((g, &xi), &yi)| g * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), data))]
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let in_shape = v.shape().to_vec();
        let out = (*v).clone().reshape(shape)?;
        Ok(self.custom(&[x], out, move |ctx| {
            vec![Some(Tensor::from_parts(
                in_shape.clone(),
                ctx.grad.data().to_vec(),
            ))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut seen = vec![false; v.ndim()];
        if axes.len() != v.ndim() || axes.iter().any(|&a| a >= v.ndim() || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("invalid permutation {:?} for {:?}", axes, v.shape()));
        }
        let out = permute_tensor(&v, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.custom(&[x], out, move |ctx| {
            vec![Some(permute_tensor(ctx.grad, &inverse))]
        }))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let Some(first) = values.first() else {
            return shape_err("concat of zero tensors");
        };
        let shape0 = first.shape().to_vec();
        if axis >= shape0.len() {
            return shape_err(format!("concat axis {axis} out of range for {:?}", shape0));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != shape0.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != shape0[i])
            {
                return shape_err(format!("concat of {:?} with {:?}", shape0, s));
            }
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = shape0.clone();
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        Ok(self.custom(xs, value, move |ctx| {
            let g = ctx.grad.data();
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &s) in grads.iter_mut().zip(&sizes) {
                    gi.extend_from_slice(&g[off..off + s * inner]);
                    off += s * inner;
                }
            }
            grads
                .into_iter()
                .zip(ctx.inputs)
                .map(|(d, x)| Some(Tensor::from_parts(x.shape().to_vec(), d)))
                .collect()
        }))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!(
                "slice [{start}, {}) on axis {axis} of {:?}",
                start + len,
                shape
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.custom(&[x], value, move |ctx| {
            let mut g = vec![0.0; shape.iter().product()];
            let src = ctx.grad.data();
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                g[base..base + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), g))]
        }))
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, 1.0)
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = self.value(x).shape().get(axis).copied().unwrap_or(1).max(1);
        self.reduce_axis(x, axis, 1.0 / n as f64)
    }

    fn reduce_axis(&self, x: Var, axis: usize, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return shape_err(format!("reduce axis {axis} out of range for {:?}", shape));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for k in 0..dim {
                let row = &d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= factor);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.custom(&[x], value, move |ctx| {
            let src = ctx.grad.data();
            let mut g = vec![0.0; shape.iter().product()];
            for o in 0..outer {
                for k in 0..dim {
                    let dst = &mut g[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                    for (a, b) in dst.iter_mut().zip(&src[o * inner..(o + 1) * inner]) {
                        *a = b * factor;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), g))]
        }))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        self.custom(&[x], Tensor::scalar(v.sum()), move |ctx| {
            vec![Some(Tensor::full(&shape, ctx.grad.item()))]
        })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let Some(&n) = v.shape().last() else {
            return shape_err("softmax of a 0-d tensor");
        };
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.custom(&[x], value, move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut gi = vec![0.0; y.len()];
            for ((dst, yr), gr) in gi.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &yy), &gg) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = yy * (gg - dot);
                }
            }
            vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), gi))]
        }))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0) {
            return shape_err(format!("matmul {:?} x {:?}", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, va.data(), false, vb.data(), false, 0.0, &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.custom(&[a, b], value, move |ctx| {
            let (xa, xb) = (&ctx.inputs[0], &ctx.inputs[1]);
            let g = ctx.grad.data();
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, 1.0, g, false, xb.data(), true, 0.0, &mut ga);
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, 1.0, xa.data(), true, g, false, 0.0, &mut gb);
            vec![
                Some(Tensor::from_parts(vec![m, k], ga)),
                Some(Tensor::from_parts(vec![k, n], gb)),
            ]
        }))
    }

    /// Batched `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 3 || vb.ndim() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(1) {
            return shape_err(format!("bmm {:?} x {:?}", va.shape(), vb.shape()));
        }
        let (bs, m, k, n) = (va.dim(0), va.dim(1), va.dim(2), vb.dim(2));
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                1.0,
                &va.data()[i * m * k..],
                false,
                &vb.data()[i * k * n..],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::from_parts(vec![bs, m, n], out);
        Ok(self.custom(&[a, b], value, move |ctx| {
            let (xa, xb) = (&ctx.inputs[0], &ctx.inputs[1]);
            let g = ctx.grad.data();
            let mut ga = vec![0.0; bs * m * k];
            let mut gb = vec![0.0; bs * k * n];
            for i in 0..bs {
                let gi = &g[i * m * n..];
                gemm(m, n, k, 1.0, gi, false, &xb.data()[i * k * n..], true, 0.0, &mut ga[i * m * k..(i + 1) * m * k]);
                gemm(k, m, n, 1.0, &xa.data()[i * m * k..], true, gi, false, 0.0, &mut gb[i * k * n..(i + 1) * k * n]);
            }
            vec![
                Some(Tensor::from_parts(vec![bs, m, k], ga)),
                Some(Tensor::from_parts(vec![bs, k, n], gb)),
            ]
        }))
    }

    /// Affine map over the last axis: `x [.., k] . w [k, n] (+ b [n])`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x);
        let Some(&k) = shape.last() else {
            return shape_err("linear on a 0-d tensor");
        };
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, k])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let n = self.shape(y)[1];
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(n);
        self.reshape(y, &out_shape)
    }

    /// Picks rows along axis 1: `x [b, t, c]`, `rows[b]` indices -> `[b, k, c]`.
    pub fn gather_rows(&self, x: Var, rows: &[Vec<usize>]) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 3 || rows.len() != v.dim(0) {
            return shape_err(format!("gather_rows on {:?} with {} index rows", v.shape(), rows.len()));
        }
        let (bs, t, c) = (v.dim(0), v.dim(1), v.dim(2));
        let k = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != k || r.iter().any(|&i| i >= t)) {
            return shape_err("gather_rows indices ragged or out of range");
        }
        let mut out = Vec::with_capacity(bs * k * c);
        for (b, r) in rows.iter().enumerate() {
            for &i in r {
                out.extend_from_slice(&v.data()[(b * t + i) * c..(b * t + i + 1) * c]);
            }
        }
        let value = Tensor::from_parts(vec![bs, k, c], out);
        let rows = rows.to_vec();
        Ok(self.custom(&[x], value, move |ctx| {
            let mut g = vec![0.0; bs * t * c];
            let src = ctx.grad.data();
            for (b, r) in rows.iter().enumerate() {
                for (j, &i) in r.iter().enumerate() {
                    let dst = &mut g[(b * t + i) * c..(b * t + i + 1) * c];
                    for (a, s) in dst.iter_mut().zip(&src[(b * k + j) * c..(b * k + j + 1) * c]) {
                        *a += s;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![bs, t, c], g))]
        }))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn permute_tensor(v: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = v.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = contiguous_strides(in_shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; out_shape.len()];
    let mut out = vec![0.0; v.numel()];
    let d = v.data();
    walk_broadcast(&out_shape, &src_strides, &zero, |o, i, _| out[o] = d[i]);
    Tensor::from_parts(out_shape, out)
}
