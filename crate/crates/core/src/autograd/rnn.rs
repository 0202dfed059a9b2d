//! Single-direction GRU over a whole sequence as one tape node.
//!
//! Gate layout follows the common `(reset, update, new)` convention:
//!
//! ```text
//! r = σ(x W_ir + b_ir + h W_hr + b_hr)
//! z = σ(x W_iz + b_iz + h W_hz + b_hz)
//! n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
//! h' = (1 - z) ⊙ n + z ⊙ h
//! ```

use super::graph::{Graph, Var};
use super::ops::sigmoid;
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Tensor};

/// Tape handles of one direction's weights: `w_ih [d, 3h]`, `w_hh [h, 3h]`,
/// `b_ih [3h]`, `b_hh [3h]`.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

impl Graph {
    /// Runs the GRU over `x [b, t, d]` from a zero state, forwards in time or,
    /// with `reverse`, backwards. Returns the hidden state at every step,
    /// `[b, t, h]`, aligned with the input frames.
    pub fn gru(&self, x: Var, weights: GruWeights, reverse: bool) -> Result<Var> {
        let vx = self.value(x);
        let (wi, wh, bi, bh) = (
            self.value(weights.w_ih),
            self.value(weights.w_hh),
            self.value(weights.b_ih),
            self.value(weights.b_hh),
        );
        if vx.ndim() != 3 || wh.ndim() != 2 {
            return shape_err(format!("gru input {:?}", vx.shape()));
        }
        let (bs, t, d) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let h = wh.dim(0);
        let g3 = 3 * h;
        if wi.shape() != [d, g3] || wh.shape() != [h, g3] || bi.shape() != [g3] || bh.shape() != [g3] {
            return shape_err(format!(
                "gru weights w_ih {:?}, w_hh {:?}, b_ih {:?}, b_hh {:?} for input width {d}",
                wi.shape(),
                wh.shape(),
                bi.shape(),
                bh.shape()
            ));
        }

        // Input contributions for all frames at once: [b*t, 3h].
        let mut gi = vec![0.0; bs * t * g3];
        gemm(bs * t, d, g3, 1.0, vx.data(), false, wi.data(), false, 0.0, &mut gi);
        for row in gi.chunks_mut(g3) {
            for (a, b) in row.iter_mut().zip(bi.data()) {
                *a += b;
            }
        }

        // Saved per step (indexed by frame): r, z, n, (h W_hn + b_hn), h_prev.
        let mut r_s = vec![0.0; bs * t * h];
        let mut z_s = vec![0.0; bs * t * h];
        let mut n_s = vec![0.0; bs * t * h];
        let mut ghn_s = vec![0.0; bs * t * h];
        let mut hprev_s = vec![0.0; bs * t * h];
        let mut out = vec![0.0; bs * t * h];
        let mut state = vec![0.0; bs * h];
        let mut gh = vec![0.0; bs * g3];
        for s in 0..t {
            let ti = if reverse { t - 1 - s } else { s };
            gemm(bs, h, g3, 1.0, &state, false, wh.data(), false, 0.0, &mut gh);
            for b in 0..bs {
                let gir = &gi[(b * t + ti) * g3..(b * t + ti + 1) * g3];
                let ghr = &mut gh[b * g3..(b + 1) * g3];
                for (a, c) in ghr.iter_mut().zip(bh.data()) {
                    *a += c;
                }
                let base = (b * t + ti) * h;
                for j in 0..h {
                    let r = sigmoid(gir[j] + ghr[j]);
                    let z = sigmoid(gir[h + j] + ghr[h + j]);
                    let n = (gir[2 * h + j] + r * ghr[2 * h + j]).tanh();
                    let hp = state[b * h + j];
                    let hn = (1.0 - z) * n + z * hp;
                    r_s[base + j] = r;
                    z_s[base + j] = z;
                    n_s[base + j] = n;
                    ghn_s[base + j] = ghr[2 * h + j];
                    hprev_s[base + j] = hp;
                    out[base + j] = hn;
                    state[b * h + j] = hn;
                }
            }
        }

        let value = Tensor::from_parts(vec![bs, t, h], out);
        let inputs = [x, weights.w_ih, weights.w_hh, weights.b_ih, weights.b_hh];
        Ok(self.custom(&inputs, value, move |ctx| {
            let xv = &ctx.inputs[0];
            let wiv = &ctx.inputs[1];
            let whv = &ctx.inputs[2];
            let g = ctx.grad.data();
            let mut dgi = vec![0.0; bs * t * g3];
            let mut dwh = vec![0.0; h * g3];
            let mut dbh = vec![0.0; g3];
            let mut dh_next = vec![0.0; bs * h];
            let mut dgh = vec![0.0; bs * g3];
            let mut hprev = vec![0.0; bs * h];
            for s in (0..t).rev() {
                let ti = if reverse { t - 1 - s } else { s };
                for b in 0..bs {
                    let base = (b * t + ti) * h;
                    for j in 0..h {
                        let k = base + j;
                        let dh = g[k] + dh_next[b * h + j];
                        let (r, z, n, ghn, hp) = (r_s[k], z_s[k], n_s[k], ghn_s[k], hprev_s[k]);
                        let dn = dh * (1.0 - z);
                        let dz = dh * (hp - n);
                        let dn_pre = dn * (1.0 - n * n);
                        let dr = dn_pre * ghn;
                        let dr_pre = dr * r * (1.0 - r);
                        let dz_pre = dz * z * (1.0 - z);
                        let gi_row = (b * t + ti) * g3;
                        dgi[gi_row + j] = dr_pre;
                        dgi[gi_row + h + j] = dz_pre;
                        dgi[gi_row + 2 * h + j] = dn_pre;
                        dgh[b * g3 + j] = dr_pre;
                        dgh[b * g3 + h + j] = dz_pre;
                        dgh[b * g3 + 2 * h + j] = dn_pre * r;
                        // direct path through the update gate
                        dh_next[b * h + j] = dh * z;
                        hprev[b * h + j] = hp;
                    }
                }
                for row in dgh.chunks(g3) {
                    for (a, v) in dbh.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                gemm(h, bs, g3, 1.0, &hprev, true, &dgh, false, 1.0, &mut dwh);
                gemm(bs, g3, h, 1.0, &dgh, false, whv.data(), true, 1.0, &mut dh_next);
            }
            let mut dwi = vec![0.0; d * g3];
            gemm(d, bs * t, g3, 1.0, xv.data(), true, &dgi, false, 0.0, &mut dwi);
            let mut dx = vec![0.0; bs * t * d];
            gemm(bs * t, g3, d, 1.0, &dgi, false, wiv.data(), true, 0.0, &mut dx);
            let mut dbi = vec![0.0; g3];
            for row in dgi.chunks(g3) {
                for (a, v) in dbi.iter_mut().zip(row) {
                    *a += v;
                }
            }
            vec![
                Some(Tensor::from_parts(vec![bs, t, d], dx)),
                Some(Tensor::from_parts(vec![d, g3], dwi)),
                Some(Tensor::from_parts(vec![h, g3], dwh)),
                Some(Tensor::from_parts(vec![g3], dbi)),
                Some(Tensor::from_parts(vec![g3], dbh)),
            ]
        }))
    }
}
