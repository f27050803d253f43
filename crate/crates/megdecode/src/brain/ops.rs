//! Batched numeric primitives for the brain module.
//!
//! All activations are (batch, channel, time) with time contiguous, so the
//! inner loops run over whole time rows. Every op here is smooth, which keeps
//! the finite-difference gradient check meaningful for the whole network.

use crate::error::{MegError, Result};

/// Dense (B, C, T) activation tensor, row-major with time innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTensor {
    pub data: Vec<f64>,
    pub b: usize,
    pub c: usize,
    pub t: usize,
}

impl BatchTensor {
    pub fn zeros(b: usize, c: usize, t: usize) -> Self {
        BatchTensor { data: vec![0.0; b * c * t], b, c, t }
    }

    pub fn from_vec(b: usize, c: usize, t: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != b * c * t {
            return Err(MegError::Shape(format!(
                "{} values for a {b}x{c}x{t} tensor",
                data.len()
            )));
        }
        Ok(BatchTensor { data, b, c, t })
    }

    #[inline]
    pub fn row(&self, i: usize, ch: usize) -> &[f64] {
        let start = (i * self.c + ch) * self.t;
        &self.data[start..start + self.t]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize, ch: usize) -> &mut [f64] {
        let start = (i * self.c + ch) * self.t;
        &mut self.data[start..start + self.t]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// y[.., o, t] = bias[o] + Σ_i Σ_k w[o,i,k] · x[.., i, t + (k−1)·dilation],
/// zero-padded so T is preserved. Weights are [out][in][k], kernel size 3.
pub fn conv1d_same(x: &BatchTensor, w: &[f64], bias: &[f64], c_out: usize, dilation: usize) -> BatchTensor {
    let (b, c_in, t) = (x.b, x.c, x.t);
    debug_assert_eq!(w.len(), c_out * c_in * 3);
    debug_assert_eq!(bias.len(), c_out);
    let mut y = BatchTensor::zeros(b, c_out, t);
    let d = dilation as i64;
    for i in 0..b {
        for o in 0..c_out {
            let out = y.row_mut(i, o);
            out.fill(bias[o]);
            for ci in 0..c_in {
                let xin = x.row(i, ci);
                for k in 0..3usize {
                    let wk = w[(o * c_in + ci) * 3 + k];
                    if wk == 0.0 {
                        continue;
                    }
                    let off = (k as i64 - 1) * d;
                    // y[t] += wk · x[t + off] over valid t
                    let t0 = (-off).max(0) as usize;
                    let t1 = (t as i64).min(t as i64 - off).max(0) as usize;
                    if t1 <= t0 {
                        continue;
                    }
                    let src = (t0 as i64 + off) as usize;
                    for (dst, s) in out[t0..t1].iter_mut().zip(&xin[src..src + (t1 - t0)]) {
                        *dst += wk * s;
                    }
                }
            }
        }
    }
    y
}

/// Gradients of `conv1d_same` for input, weights, and bias.
pub fn conv1d_same_backward(
    x: &BatchTensor,
    w: &[f64],
    c_out: usize,
    dilation: usize,
    dy: &BatchTensor,
    dx: &mut BatchTensor,
    dw: &mut [f64],
    dbias: &mut [f64],
) {
    let (b, c_in, t) = (x.b, x.c, x.t);
    let d = dilation as i64;
    for i in 0..b {
        for o in 0..c_out {
            let dyo = dy.row(i, o);
            dbias[o] += dyo.iter().sum::<f64>();
            for ci in 0..c_in {
                let xin = x.row(i, ci);
                let dxin = dx.row_mut(i, ci);
                for k in 0..3usize {
                    let off = (k as i64 - 1) * d;
                    let t0 = (-off).max(0) as usize;
                    let t1 = (t as i64).min(t as i64 - off).max(0) as usize;
                    if t1 <= t0 {
                        continue;
                    }
                    let src = (t0 as i64 + off) as usize;
                    let n = t1 - t0;
                    // dw[o,i,k] += Σ_t dy[t]·x[t+off]
                    let mut acc = 0.0;
                    for (g, s) in dyo[t0..t1].iter().zip(&xin[src..src + n]) {
                        acc += g * s;
                    }
                    dw[(o * c_in + ci) * 3 + k] += acc;
                    // dx[t+off] += w·dy[t]
                    let wk = w[(o * c_in + ci) * 3 + k];
                    if wk != 0.0 {
                        for (g, s) in dxin[src..src + n].iter_mut().zip(&dyo[t0..t1]) {
                            *g += wk * s;
                        }
                    }
                }
            }
        }
    }
}

/// Pointwise (1×1) channel mixing: y[.., o, t] = b[o] + Σ_i w[o,i]·x[.., i, t].
pub fn channel_linear(x: &BatchTensor, w: &[f64], bias: Option<&[f64]>, c_out: usize) -> BatchTensor {
    let (b, c_in, t) = (x.b, x.c, x.t);
    debug_assert_eq!(w.len(), c_out * c_in);
    let mut y = BatchTensor::zeros(b, c_out, t);
    for i in 0..b {
        for o in 0..c_out {
            let out = y.row_mut(i, o);
            if let Some(bias) = bias {
                out.fill(bias[o]);
            }
            for ci in 0..c_in {
                let wk = w[o * c_in + ci];
                if wk == 0.0 {
                    continue;
                }
                for (dst, s) in out.iter_mut().zip(x.row(i, ci)) {
                    *dst += wk * s;
                }
            }
        }
    }
    y
}

pub fn channel_linear_backward(
    x: &BatchTensor,
    w: &[f64],
    c_out: usize,
    dy: &BatchTensor,
    dx: &mut BatchTensor,
    dw: &mut [f64],
    dbias: Option<&mut [f64]>,
) {
    let (b, c_in, _) = (x.b, x.c, x.t);
    if let Some(dbias) = dbias {
        for i in 0..b {
            for o in 0..c_out {
                dbias[o] += dy.row(i, o).iter().sum::<f64>();
            }
        }
    }
    for i in 0..b {
        for o in 0..c_out {
            let dyo = dy.row(i, o);
            for ci in 0..c_in {
                let mut acc = 0.0;
                for (g, s) in dyo.iter().zip(x.row(i, ci)) {
                    acc += g * s;
                }
                dw[o * c_in + ci] += acc;
                let wk = w[o * c_in + ci];
                if wk != 0.0 {
                    for (g, s) in dx.row_mut(i, ci).iter_mut().zip(dyo) {
                        *g += wk * s;
                    }
                }
            }
        }
    }
}

/// GELU, tanh form. The closed-form derivative below matches it exactly,
/// which an erf-based approximation would not.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn gelu_tensor(x: &BatchTensor) -> BatchTensor {
    let mut y = x.clone();
    for v in y.data.iter_mut() {
        *v = gelu(*v);
    }
    y
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated linear unit over channels: the first half gates through the sigmoid
/// of the second half, (B, 2D, T) → (B, D, T).
pub fn glu(x: &BatchTensor) -> Result<BatchTensor> {
    if x.c % 2 != 0 {
        return Err(MegError::Shape(format!(
            "glu needs an even channel count, got {}",
            x.c
        )));
    }
    let d = x.c / 2;
    let mut y = BatchTensor::zeros(x.b, d, x.t);
    for i in 0..x.b {
        for ch in 0..d {
            let a = x.row(i, ch);
            let g = x.row(i, d + ch);
            for ((out, &av), &gv) in y.row_mut(i, ch).iter_mut().zip(a).zip(g) {
                *out = av * sigmoid(gv);
            }
        }
    }
    Ok(y)
}

pub fn glu_backward(x: &BatchTensor, dy: &BatchTensor, dx: &mut BatchTensor) {
    let d = x.c / 2;
    for i in 0..x.b {
        for ch in 0..d {
            for t in 0..x.t {
                let av = x.row(i, ch)[t];
                let gv = x.row(i, d + ch)[t];
                let s = sigmoid(gv);
                let g = dy.row(i, ch)[t];
                dx.row_mut(i, ch)[t] += g * s;
                dx.row_mut(i, d + ch)[t] += g * av * s * (1.0 - s);
            }
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: BatchTensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Population (biased) batch variance.
    pub batch_var: Vec<f64>,
}

/// Train-mode batch norm: statistics over (batch, time) per channel.
pub fn batchnorm_train(x: &BatchTensor, gamma: &[f64], beta: &[f64]) -> (BatchTensor, BnCache) {
    let (b, c, t) = (x.b, x.c, x.t);
    let n = (b * t) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for i in 0..b {
        for ch in 0..c {
            mean[ch] += x.row(i, ch).iter().sum::<f64>();
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for i in 0..b {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += x.row(i, ch).iter().map(|&v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = BatchTensor::zeros(b, c, t);
    let mut y = BatchTensor::zeros(b, c, t);
    for i in 0..b {
        for ch in 0..c {
            let (m, is, g, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let src = x.row(i, ch);
            let xh = xhat.row_mut(i, ch);
            for (dst, &v) in xh.iter_mut().zip(src) {
                *dst = (v - m) * is;
            }
            for (dst, &h) in y.row_mut(i, ch).iter_mut().zip(xh.iter()) {
                *dst = g * h + be;
            }
        }
    }
    (y, BnCache { xhat, inv_std, batch_mean: mean, batch_var: var })
}

/// Eval-mode batch norm using running statistics.
pub fn batchnorm_eval(
    x: &BatchTensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> BatchTensor {
    let mut y = BatchTensor::zeros(x.b, x.c, x.t);
    for i in 0..x.b {
        for ch in 0..x.c {
            let is = 1.0 / (running_var[ch] + BN_EPS).sqrt();
            let (m, g, be) = (running_mean[ch], gamma[ch], beta[ch]);
            for (dst, &v) in y.row_mut(i, ch).iter_mut().zip(x.row(i, ch)) {
                *dst = g * (v - m) * is + be;
            }
        }
    }
    y
}

/// Backward through train-mode batch norm.
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &[f64],
    dy: &BatchTensor,
    dx: &mut BatchTensor,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let (b, c, t) = (dy.b, dy.c, dy.t);
    let n = (b * t) as f64;
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..b {
            for (&g, &h) in dy.row(i, ch).iter().zip(cache.xhat.row(i, ch)) {
                sum_dy += g;
                sum_dy_xhat += g * h;
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch] / n;
        for i in 0..b {
            let dyr = dy.row(i, ch);
            let xhr = cache.xhat.row(i, ch);
            let dxr = dx.row_mut(i, ch);
            for k in 0..t {
                dxr[k] += scale * (n * dyr[k] - sum_dy - xhr[k] * sum_dy_xhat);
            }
        }
    }
}

/// In-place softmax over a slice.
pub fn softmax(row: &mut [f64]) {
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

/// Given p = softmax(s) and upstream dp, accumulates ds = p ⊙ (dp − p·dp).
pub fn softmax_backward(p: &[f64], dp: &[f64], ds: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    for ((d, &pv), &gv) in ds.iter_mut().zip(p).zip(dp) {
        *d += pv * (gv - dot);
    }
}
