//! Fused 2-D convolution, average pooling and batch normalization over
//! `[batch, channels, height, width]` tensors.

use super::graph::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Tensor};

/// Upper bound on im2col buffer entries per chunk (about 32 MB of `f64`).
const COL_BUDGET: usize = 4 << 20;

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.ckk() * self.w).max(1)).clamp(1, self.h)
    }

    /// Fills `col` (`ckk x rows*w`) for output rows `r0..r0+rows`, zero padded.
    fn im2col(&self, x: &[f64], r0: usize, rows: usize, col: &mut [f64]) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let p = rows * self.w;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut col[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for r in 0..rows {
                        let y = (r0 + r + ki) as isize - ph as isize;
                        let dst = &mut row[r * self.w..(r + 1) * self.w];
                        if y < 0 || y >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (xo, d) in dst.iter_mut().enumerate() {
                            let xi = xo as isize + kj as isize - pw as isize;
                            *d = if xi < 0 || xi >= self.w as isize { 0.0 } else { src[xi as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into the input gradient plane set.
    fn col2im(&self, col: &[f64], r0: usize, rows: usize, dx: &mut [f64]) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let p = rows * self.w;
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &col[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for r in 0..rows {
                        let y = (r0 + r + ki) as isize - ph as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (xo, &v) in row[r * self.w..(r + 1) * self.w].iter().enumerate() {
                            let xi = xo as isize + kj as isize - pw as isize;
                            if xi >= 0 && xi < self.w as isize {
                                dst[xi as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Stride-1 "same" convolution with odd kernels: `x [b, c, h, w]`,
    /// `weight [o, c, kh, kw]`, `bias [o]` -> `[b, o, h, w]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(weight), self.value(bias));
        if vx.ndim() != 4 || vw.ndim() != 4 || vw.dim(1) != vx.dim(1) || vb.shape() != [vw.dim(0)] {
            return shape_err(format!(
                "conv2d input {:?}, weight {:?}, bias {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            ));
        }
        if vw.dim(2) % 2 == 0 || vw.dim(3) % 2 == 0 {
            return shape_err(format!("conv2d kernel {:?} must be odd", &vw.shape()[2..]));
        }
        let bs = vx.dim(0);
        let geo = ConvGeom {
            c: vx.dim(1),
            h: vx.dim(2),
            w: vx.dim(3),
            o: vw.dim(0),
            kh: vw.dim(2),
            kw: vw.dim(3),
        };
        let hw = geo.h * geo.w;
        let rpc = geo.rows_per_chunk();
        let mut out = vec![0.0; bs * geo.o * hw];
        let mut col = vec![0.0; geo.ckk() * rpc * geo.w];
        let mut tmp = vec![0.0; geo.o * rpc * geo.w];
        for b in 0..bs {
            let xs = &vx.data()[b * geo.c * hw..(b + 1) * geo.c * hw];
            let os = &mut out[b * geo.o * hw..(b + 1) * geo.o * hw];
            let mut r0 = 0;
            while r0 < geo.h {
                let rows = rpc.min(geo.h - r0);
                let p = rows * geo.w;
                geo.im2col(xs, r0, rows, &mut col);
                gemm(geo.o, geo.ckk(), p, 1.0, vw.data(), false, &col, false, 0.0, &mut tmp);
                for oc in 0..geo.o {
                    let bias = vb.data()[oc];
                    let dst = &mut os[oc * hw + r0 * geo.w..oc * hw + r0 * geo.w + p];
                    for (d, s) in dst.iter_mut().zip(&tmp[oc * p..(oc + 1) * p]) {
                        *d = s + bias;
                    }
                }
                r0 += rows;
            }
        }
        let value = Tensor::from_parts(vec![bs, geo.o, geo.h, geo.w], out);
        Ok(self.custom(&[x, weight, bias], value, move |ctx| {
            let (xv, wv) = (&ctx.inputs[0], &ctx.inputs[1]);
            let g = ctx.grad.data();
            let mut dx = vec![0.0; xv.numel()];
            let mut dw = vec![0.0; wv.numel()];
            let mut db = vec![0.0; geo.o];
            let mut col = vec![0.0; geo.ckk() * rpc * geo.w];
            let mut gchunk = vec![0.0; geo.o * rpc * geo.w];
            for b in 0..bs {
                let xs = &xv.data()[b * geo.c * hw..(b + 1) * geo.c * hw];
                let gs = &g[b * geo.o * hw..(b + 1) * geo.o * hw];
                let dxs = &mut dx[b * geo.c * hw..(b + 1) * geo.c * hw];
                for (oc, acc) in db.iter_mut().enumerate() {
                    *acc += gs[oc * hw..(oc + 1) * hw].iter().sum::<f64>();
                }
                let mut r0 = 0;
                while r0 < geo.h {
                    let rows = rpc.min(geo.h - r0);
                    let p = rows * geo.w;
                    for oc in 0..geo.o {
                        gchunk[oc * p..(oc + 1) * p]
                            .copy_from_slice(&gs[oc * hw + r0 * geo.w..oc * hw + r0 * geo.w + p]);
                    }
                    geo.im2col(xs, r0, rows, &mut col);
                    // dW += dY . col^T
                    gemm(geo.o, p, geo.ckk(), 1.0, &gchunk, false, &col, true, 1.0, &mut dw);
                    // dcol = W^T . dY
                    gemm(geo.ckk(), geo.o, p, 1.0, wv.data(), true, &gchunk, false, 0.0, &mut col);
                    geo.col2im(&col, r0, rows, dxs);
                    r0 += rows;
                }
            }
            vec![
                Some(Tensor::from_parts(xv.shape().to_vec(), dx)),
                Some(Tensor::from_parts(wv.shape().to_vec(), dw)),
                Some(Tensor::from_parts(vec![geo.o], db)),
            ]
        }))
    }

    /// Non-overlapping average pooling over the last two axes; trailing rows and
    /// columns that do not fill a window are dropped.
    pub fn avg_pool2d(&self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 4 || kh == 0 || kw == 0 || v.dim(2) < kh || v.dim(3) < kw {
            return shape_err(format!("avg_pool2d ({kh}, {kw}) on {:?}", v.shape()));
        }
        if kh == 1 && kw == 1 {
            return Ok(x);
        }
        let (bs, c, h, w) = (v.dim(0), v.dim(1), v.dim(2), v.dim(3));
        let (oh, ow) = (h / kh, w / kw);
        let scale = 1.0 / (kh * kw) as f64;
        let mut out = vec![0.0; bs * c * oh * ow];
        let d = v.data();
        for plane in 0..bs * c {
            let src = &d[plane * h * w..];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for a in 0..kh {
                        for b in 0..kw {
                            s += src[(i * kh + a) * w + j * kw + b];
                        }
                    }
                    dst[i * ow + j] = s * scale;
                }
            }
        }
        let value = Tensor::from_parts(vec![bs, c, oh, ow], out);
        Ok(self.custom(&[x], value, move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![0.0; bs * c * h * w];
            for plane in 0..bs * c {
                let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = src[i * ow + j] * scale;
                        for a in 0..kh {
                            for b in 0..kw {
                                dst[(i * kh + a) * w + j * kw + b] = gv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![bs, c, h, w], dx))]
        }))
    }

    /// Per-channel batch normalization of `x [b, c, h, w]`.
    ///
    /// With `running = None` the batch statistics are used and returned as
    /// `(mean, biased variance, unbiased variance)` so the caller can update its
    /// running estimates; otherwise the supplied `(mean, var)` are treated as
    /// constants.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm2d(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let v = self.value(x);
        if v.ndim() != 4 || self.shape(gamma) != [v.dim(1)] || self.shape(beta) != [v.dim(1)] {
            return shape_err(format!("batch_norm2d on {:?}", v.shape()));
        }
        let (bs, c, hw) = (v.dim(0), v.dim(1), v.dim(2) * v.dim(3));
        let n = (bs * hw) as f64;
        let d = v.data();
        let (mean, var, batch_stats) = match running {
            Some((m, s)) => {
                if m.len() != c || s.len() != c {
                    return shape_err("batch_norm2d running statistics length");
                }
                (m.to_vec(), s.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..bs {
                        s += d[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / n;
                    let mut q = 0.0;
                    for b in 0..bs {
                        q += d[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|x| (x - m) * (x - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / n;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v })
                    .collect();
                (mean.clone(), var, Some((mean, unbiased)))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for b in 0..bs {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    let xh = (d[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv.data()[ch] * xh + bv.data()[ch];
                }
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        let train = running.is_none();
        let shape = v.shape().to_vec();
        let var = self.custom(&[x, gamma, beta], value, move |ctx| {
            let g = ctx.grad.data();
            let gam = ctx.inputs[1].data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..bs {
                for ch in 0..c {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let mut dx = vec![0.0; g.len()];
            for b in 0..bs {
                for ch in 0..c {
                    let k = gam[ch] * inv_std[ch];
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        dx[i] = if train {
                            k * (g[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(shape.clone(), dx)),
                Some(Tensor::from_parts(vec![c], dgamma)),
                Some(Tensor::from_parts(vec![c], dbeta)),
            ]
        });
        Ok((var, batch_stats))
    }
}
