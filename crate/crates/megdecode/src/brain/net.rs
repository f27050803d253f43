//! Forward and reverse passes of the brain module.
//!
//! The forward pass in training mode retains every activation needed for an
//! exact reverse pass; nothing here mutates parameters, so finite-difference
//! probes see a pure function. Running BN statistics are folded in separately
//! via `update_running_stats`.

use crate::brain::ops::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, channel_linear, channel_linear_backward,
    conv1d_same, conv1d_same_backward, gelu, gelu_grad, gelu_tensor, glu, glu_backward, softmax,
    softmax_backward, BatchTensor, BnCache, BN_MOMENTUM,
};
use crate::brain::{AggParams, BrainModuleConfig, BrainModuleParams, ATTENTION_HIDDEN};
use crate::datastore::SensorLayout;
use crate::error::{MegError, Result};
use crate::linalg::Mat;

/// Layer-norm epsilon for the output heads.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// 2-D Fourier design matrix over sensor coordinates: row i holds
/// cos 2π(k·xᵢ + l·yᵢ) for all (k, l) followed by the matching sines.
pub fn fourier_design(layout: &SensorLayout, fourier_k: usize) -> Vec<f64> {
    let k2 = fourier_k * fourier_k;
    let mut phi = vec![0.0; layout.positions.len() * 2 * k2];
    for (i, &[x, y]) in layout.positions.iter().enumerate() {
        let row = &mut phi[i * 2 * k2..(i + 1) * 2 * k2];
        for k in 0..fourier_k {
            for l in 0..fourier_k {
                let arg = std::f64::consts::TAU * (k as f64 * x + l as f64 * y);
                row[k * fourier_k + l] = arg.cos();
                row[k2 + k * fourier_k + l] = arg.sin();
            }
        }
    }
    phi
}

/// Softmax-normalized attention weights (c_att × c_in) from Fourier scores.
fn attention_weights_from(coef: &[f64], phi: &[f64], c_att: usize, c_in: usize) -> Vec<f64> {
    let m = phi.len() / c_in;
    let mut w = vec![0.0; c_att * c_in];
    for j in 0..c_att {
        let cj = &coef[j * m..(j + 1) * m];
        let row = &mut w[j * c_in..(j + 1) * c_in];
        for (i, slot) in row.iter_mut().enumerate() {
            let pi = &phi[i * m..(i + 1) * m];
            *slot = cj.iter().zip(pi).map(|(&a, &b)| a * b).sum();
        }
        softmax(row);
    }
    w
}

/// Standalone spatial attention: scores from the layout's Fourier features,
/// softmax over input sensors, weighted mixdown per time step. Returns the
/// output and the attention weights.
pub fn spatial_attention_forward(
    x: &BatchTensor,
    layout: &SensorLayout,
    coef: &[f64],
    c_att: usize,
    fourier_k: usize,
) -> Result<(BatchTensor, Vec<f64>)> {
    if layout.positions.len() != x.c {
        return Err(MegError::Shape(format!(
            "layout has {} sensors but input has {} channels",
            layout.positions.len(),
            x.c
        )));
    }
    if coef.len() != c_att * 2 * fourier_k * fourier_k {
        return Err(MegError::Shape(format!(
            "{} attention coefficients for c_att={c_att}, K={fourier_k}",
            coef.len()
        )));
    }
    let phi = fourier_design(layout, fourier_k);
    let w = attention_weights_from(coef, &phi, c_att, x.c);
    Ok((channel_linear(x, &w, None, c_att), w))
}

/// y[b] = M_{s_b} · x[b], one c×c matrix per subject, no bias.
fn subject_linear(x: &BatchTensor, w: &[f64], subjects: &[usize]) -> BatchTensor {
    let c = x.c;
    let mut y = BatchTensor::zeros(x.b, c, x.t);
    for i in 0..x.b {
        let m = &w[subjects[i] * c * c..(subjects[i] + 1) * c * c];
        for o in 0..c {
            let out = y.row_mut(i, o);
            for ci in 0..c {
                let wk = m[o * c + ci];
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

fn subject_linear_backward(
    x: &BatchTensor,
    w: &[f64],
    subjects: &[usize],
    dy: &BatchTensor,
    dx: &mut BatchTensor,
    dw: &mut [f64],
) {
    let c = x.c;
    for i in 0..x.b {
        let base = subjects[i] * c * c;
        for o in 0..c {
            let dyo = dy.row(i, o);
            for ci in 0..c {
                let mut acc = 0.0;
                for (g, s) in dyo.iter().zip(x.row(i, ci)) {
                    acc += g * s;
                }
                dw[base + o * c + ci] += acc;
                let wk = w[base + o * c + ci];
                if wk != 0.0 {
                    for (g, s) in dx.row_mut(i, ci).iter_mut().zip(dyo) {
                        *g += wk * s;
                    }
                }
            }
        }
    }
}

/// Per-row non-affine layer norm; returns x̂ and 1/σ per row.
fn layer_norm_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let f = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut inv_std = vec![0.0; x.rows];
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / f;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / f;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for (dst, &v) in xhat.row_mut(i).iter_mut().zip(row) {
            *dst = (v - mean) * inv;
        }
    }
    (xhat, inv_std)
}

fn layer_norm_rows_backward(xhat: &Mat, inv_std: &[f64], dxhat: &Mat, dx: &mut Mat) {
    let f = xhat.cols as f64;
    for i in 0..xhat.rows {
        let xr = xhat.row(i);
        let gr = dxhat.row(i);
        let s1: f64 = gr.iter().sum();
        let s2: f64 = gr.iter().zip(xr).map(|(&g, &h)| g * h).sum();
        let scale = inv_std[i] / f;
        for ((d, &g), &h) in dx.row_mut(i).iter_mut().zip(gr).zip(xr) {
            *d += scale * (f * g - s1 - h * s2);
        }
    }
}

/// y[i] = W·g[i] + b with W out×in row-major.
fn linear_rows(g: &Mat, w: &[f64], bias: &[f64], out_dim: usize) -> Mat {
    let f_in = g.cols;
    let mut y = Mat::zeros(g.rows, out_dim);
    for i in 0..g.rows {
        let src = g.row(i);
        let dst = y.row_mut(i);
        for (o, slot) in dst.iter_mut().enumerate() {
            let wr = &w[o * f_in..(o + 1) * f_in];
            let mut acc = bias[o];
            for (&a, &b) in wr.iter().zip(src) {
                acc += a * b;
            }
            *slot = acc;
        }
    }
    y
}

fn linear_rows_backward(
    g: &Mat,
    w: &[f64],
    out_dim: usize,
    dy: &Mat,
    dg: &mut Mat,
    dw: &mut [f64],
    dbias: &mut [f64],
) {
    let f_in = g.cols;
    for i in 0..g.rows {
        let src = g.row(i);
        let dyr = dy.row(i);
        for o in 0..out_dim {
            let gsc = dyr[o];
            if gsc == 0.0 {
                continue;
            }
            dbias[o] += gsc;
            let wr = &w[o * f_in..(o + 1) * f_in];
            let dwr = &mut dw[o * f_in..(o + 1) * f_in];
            let dgr = dg.row_mut(i);
            for f in 0..f_in {
                dwr[f] += gsc * src[f];
                dgr[f] += gsc * wr[f];
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub input: BatchTensor,
    pub bn1: BnCache,
    pub bn1_out: BatchTensor,
    pub r1: BatchTensor,
    pub bn2: BnCache,
    pub bn2_out: BatchTensor,
    pub r2: BatchTensor,
    /// conv3 output, pre-GLU.
    pub c3: BatchTensor,
    pub out: BatchTensor,
    pub skip1: bool,
}

#[derive(Debug, Clone)]
pub enum AggTrace {
    MeanPool,
    Affine,
    Attention {
        /// tanh of the hidden map, (B, H, T).
        tanh_h: BatchTensor,
        /// softmax weights over time, B×T.
        alpha: Mat,
    },
}

#[derive(Debug, Clone)]
pub struct HeadLayerTrace {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
    /// GELU output, the linear layer's input.
    pub g: Mat,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub layers: Vec<HeadLayerTrace>,
}

/// Everything the reverse pass needs, captured by `forward_train`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub attn_w: Vec<f64>,
    pub x: BatchTensor,
    pub sa: BatchTensor,
    pub post: BatchTensor,
    pub subjects: Vec<usize>,
    pub blocks: Vec<BlockTrace>,
    pub p1_pre: BatchTensor,
    pub p1_act: BatchTensor,
    pub proj_out: BatchTensor,
    pub agg: AggTrace,
    pub pooled: Mat,
    pub heads: Vec<HeadTrace>,
    pub outputs: Vec<Mat>,
}

pub struct BrainModule {
    pub config: BrainModuleConfig,
    pub params: BrainModuleParams,
    phi: Vec<f64>,
}

impl BrainModule {
    pub fn new(
        config: BrainModuleConfig,
        params: BrainModuleParams,
        layout: &SensorLayout,
    ) -> Result<Self> {
        config.validate()?;
        if layout.positions.len() != config.c_in {
            return Err(MegError::Shape(format!(
                "layout has {} sensors but config.c_in is {}",
                layout.positions.len(),
                config.c_in
            )));
        }
        let reference = BrainModuleParams::zeros(&config)?;
        for ((name, have), (_, want)) in params.learnable().iter().zip(reference.learnable()) {
            if have.len() != want.len() {
                return Err(MegError::Shape(format!(
                    "parameter {name} has {} values, config implies {}",
                    have.len(),
                    want.len()
                )));
            }
        }
        if params.learnable().len() != reference.learnable().len() {
            return Err(MegError::Shape("parameter set does not match config".into()));
        }
        let phi = fourier_design(layout, config.fourier_k);
        Ok(BrainModule { config, params, phi })
    }

    /// Softmaxed spatial attention weights, c_att × c_in.
    pub fn attention_weights(&self) -> Vec<f64> {
        attention_weights_from(&self.params.attn_coef, &self.phi, self.config.c_att, self.config.c_in)
    }

    fn check_input(&self, x: &BatchTensor, subjects: &[usize]) -> Result<()> {
        if x.b == 0 {
            return Err(MegError::Shape("empty batch".into()));
        }
        if x.c != self.config.c_in || x.t != self.config.t {
            return Err(MegError::Shape(format!(
                "input is {}x{}x{}, model expects channels {} and {} timesteps",
                x.b, x.c, x.t, self.config.c_in, self.config.t
            )));
        }
        if subjects.len() != x.b {
            return Err(MegError::Shape(format!(
                "{} subject ids for a batch of {}",
                subjects.len(),
                x.b
            )));
        }
        if let Some(&s) = subjects.iter().find(|&&s| s >= self.config.n_subjects) {
            return Err(MegError::Invalid(format!(
                "subject {s} out of range (n_subjects={})",
                self.config.n_subjects
            )));
        }
        if !x.is_finite() {
            return Err(MegError::NonFinite("non-finite values in module input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &BatchTensor, subjects: &[usize], mode: Mode) -> Result<Vec<Mat>> {
        match mode {
            Mode::Train => self.forward_train(x, subjects).map(|(outs, _)| outs),
            Mode::Eval => self.forward_eval(x, subjects),
        }
    }

    pub fn forward_train(
        &self,
        x: &BatchTensor,
        subjects: &[usize],
    ) -> Result<(Vec<Mat>, ForwardTrace)> {
        self.check_input(x, subjects)?;
        let p = &self.params;
        let cfg = &self.config;

        let attn_w = self.attention_weights();
        let sa = channel_linear(x, &attn_w, None, cfg.c_att);
        let post = channel_linear(&sa, &p.post_w, Some(&p.post_b), cfg.c_att);
        let subj = subject_linear(&post, &p.subject_w, subjects);

        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        let mut cur = subj;
        for (k, bp) in p.blocks.iter().enumerate() {
            let (dil1, dil2) = cfg.dilations(k);
            let skip1 = cur.c == cfg.d;
            let n1 = conv1d_same(&cur, &bp.conv1_w, &bp.conv1_b, cfg.d, dil1);
            let (bn1_out, bn1) = batchnorm_train(&n1, &bp.bn1.gamma, &bp.bn1.beta);
            let mut r1 = gelu_tensor(&bn1_out);
            if skip1 {
                for (dst, &s) in r1.data.iter_mut().zip(&cur.data) {
                    *dst += s;
                }
            }
            let n2 = conv1d_same(&r1, &bp.conv2_w, &bp.conv2_b, cfg.d, dil2);
            let (bn2_out, bn2) = batchnorm_train(&n2, &bp.bn2.gamma, &bp.bn2.beta);
            let mut r2 = gelu_tensor(&bn2_out);
            for (dst, &s) in r2.data.iter_mut().zip(&r1.data) {
                *dst += s;
            }
            let c3 = conv1d_same(&r2, &bp.conv3_w, &bp.conv3_b, 2 * cfg.d, 1);
            let mut out = glu(&c3)?;
            for (dst, &s) in out.data.iter_mut().zip(&r2.data) {
                *dst += s;
            }
            blocks.push(BlockTrace {
                input: cur,
                bn1,
                bn1_out,
                r1,
                bn2,
                bn2_out,
                r2,
                c3,
                out: out.clone(),
                skip1,
            });
            cur = out;
        }

        let p1_pre = channel_linear(&cur, &p.proj1_w, Some(&p.proj1_b), 2 * cfg.d);
        let p1_act = gelu_tensor(&p1_pre);
        let proj_out = channel_linear(&p1_act, &p.proj2_w, Some(&p.proj2_b), cfg.f_proj);

        let (pooled, agg) = self.aggregate(&proj_out)?;

        let mut heads = Vec::with_capacity(p.heads.len());
        let mut outputs = Vec::with_capacity(p.heads.len());
        for (head, f_out) in p.heads.iter().zip(cfg.head_dims()) {
            let mut layers = Vec::with_capacity(head.layers.len());
            let mut curm = pooled.clone();
            for (l, (w, b)) in head.layers.iter().enumerate() {
                let (xhat, inv_std) = layer_norm_rows(&curm);
                let mut g = xhat.clone();
                for v in g.data.iter_mut() {
                    *v = gelu(*v);
                }
                let out_dim = if l + 1 == head.layers.len() { f_out } else { cfg.f_proj };
                let next = linear_rows(&g, w, b, out_dim);
                layers.push(HeadLayerTrace { xhat, inv_std, g });
                curm = next;
            }
            heads.push(HeadTrace { layers });
            outputs.push(curm);
        }

        let trace = ForwardTrace {
            attn_w,
            x: x.clone(),
            sa,
            post,
            subjects: subjects.to_vec(),
            blocks,
            p1_pre,
            p1_act,
            proj_out,
            agg,
            pooled,
            heads,
            outputs: outputs.clone(),
        };
        Ok((outputs, trace))
    }

    pub fn forward_eval(&self, x: &BatchTensor, subjects: &[usize]) -> Result<Vec<Mat>> {
        self.check_input(x, subjects)?;
        let p = &self.params;
        let cfg = &self.config;

        let attn_w = self.attention_weights();
        let sa = channel_linear(x, &attn_w, None, cfg.c_att);
        let post = channel_linear(&sa, &p.post_w, Some(&p.post_b), cfg.c_att);
        let mut cur = subject_linear(&post, &p.subject_w, subjects);
        for (k, bp) in p.blocks.iter().enumerate() {
            let (dil1, dil2) = cfg.dilations(k);
            let skip1 = cur.c == cfg.d;
            let n1 = conv1d_same(&cur, &bp.conv1_w, &bp.conv1_b, cfg.d, dil1);
            let bn1_out = batchnorm_eval(
                &n1,
                &bp.bn1.gamma,
                &bp.bn1.beta,
                &bp.bn1.running_mean,
                &bp.bn1.running_var,
            );
            let mut r1 = gelu_tensor(&bn1_out);
            if skip1 {
                for (dst, &s) in r1.data.iter_mut().zip(&cur.data) {
                    *dst += s;
                }
            }
            let n2 = conv1d_same(&r1, &bp.conv2_w, &bp.conv2_b, cfg.d, dil2);
            let bn2_out = batchnorm_eval(
                &n2,
                &bp.bn2.gamma,
                &bp.bn2.beta,
                &bp.bn2.running_mean,
                &bp.bn2.running_var,
            );
            let mut r2 = gelu_tensor(&bn2_out);
            for (dst, &s) in r2.data.iter_mut().zip(&r1.data) {
                *dst += s;
            }
            let c3 = conv1d_same(&r2, &bp.conv3_w, &bp.conv3_b, 2 * cfg.d, 1);
            let mut out = glu(&c3)?;
            for (dst, &s) in out.data.iter_mut().zip(&r2.data) {
                *dst += s;
            }
            cur = out;
        }
        let p1_pre = channel_linear(&cur, &p.proj1_w, Some(&p.proj1_b), 2 * cfg.d);
        let p1_act = gelu_tensor(&p1_pre);
        let proj_out = channel_linear(&p1_act, &p.proj2_w, Some(&p.proj2_b), cfg.f_proj);
        let (pooled, _) = self.aggregate(&proj_out)?;

        let mut outputs = Vec::with_capacity(p.heads.len());
        for (head, f_out) in p.heads.iter().zip(cfg.head_dims()) {
            let mut curm = pooled.clone();
            for (l, (w, b)) in head.layers.iter().enumerate() {
                let (xhat, _) = layer_norm_rows(&curm);
                let mut g = xhat;
                for v in g.data.iter_mut() {
                    *v = gelu(*v);
                }
                let out_dim = if l + 1 == head.layers.len() { f_out } else { cfg.f_proj };
                curm = linear_rows(&g, w, b, out_dim);
            }
            outputs.push(curm);
        }
        Ok(outputs)
    }

    /// (B, F, T) → B×F plus whatever the reverse pass needs.
    fn aggregate(&self, y: &BatchTensor) -> Result<(Mat, AggTrace)> {
        let (b, f, t) = (y.b, y.c, y.t);
        if t == 0 {
            return Err(MegError::Shape("cannot aggregate zero timesteps".into()));
        }
        let mut pooled = Mat::zeros(b, f);
        match &self.params.agg {
            AggParams::MeanPool => {
                for i in 0..b {
                    for ch in 0..f {
                        *pooled.at_mut(i, ch) = y.row(i, ch).iter().sum::<f64>() / t as f64;
                    }
                }
                Ok((pooled, AggTrace::MeanPool))
            }
            AggParams::Affine { w, b: bias } => {
                for i in 0..b {
                    for ch in 0..f {
                        let row = y.row(i, ch);
                        let mut acc = bias[0];
                        for (&wt, &v) in w.iter().zip(row) {
                            acc += wt * v;
                        }
                        *pooled.at_mut(i, ch) = acc;
                    }
                }
                Ok((pooled, AggTrace::Affine))
            }
            AggParams::Attention { w, b: bias, v } => {
                let h = ATTENTION_HIDDEN;
                let mut tanh_h = BatchTensor::zeros(b, h, t);
                let mut alpha = Mat::zeros(b, t);
                for i in 0..b {
                    for hh in 0..h {
                        let wr = &w[hh * f..(hh + 1) * f];
                        let dst = tanh_h.row_mut(i, hh);
                        dst.fill(bias[hh]);
                        for (ch, &wv) in wr.iter().enumerate() {
                            if wv == 0.0 {
                                continue;
                            }
                            for (d, &s) in dst.iter_mut().zip(y.row(i, ch)) {
                                *d += wv * s;
                            }
                        }
                        for d in dst.iter_mut() {
                            *d = d.tanh();
                        }
                    }
                    let score = alpha.row_mut(i);
                    for hh in 0..h {
                        let vh = v[hh];
                        for (s, &th) in score.iter_mut().zip(tanh_h.row(i, hh)) {
                            *s += vh * th;
                        }
                    }
                    softmax(score);
                    for ch in 0..f {
                        let mut acc = 0.0;
                        for (&a, &s) in alpha.row(i).iter().zip(y.row(i, ch)) {
                            acc += a * s;
                        }
                        *pooled.at_mut(i, ch) = acc;
                    }
                }
                Ok((pooled, AggTrace::Attention { tanh_h, alpha }))
            }
        }
    }

    /// Exact reverse pass. `upstream` holds ∂L/∂output for each head; returns
    /// parameter gradients (as a params-shaped container) and ∂L/∂input.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        upstream: &[Mat],
    ) -> Result<(BrainModuleParams, BatchTensor)> {
        let p = &self.params;
        let cfg = &self.config;
        if upstream.len() != p.heads.len() {
            return Err(MegError::Shape(format!(
                "{} upstream gradients for {} heads",
                upstream.len(),
                p.heads.len()
            )));
        }
        let (b, t) = (trace.x.b, trace.x.t);
        let mut grads = BrainModuleParams::zeros(cfg)?;
        // zeros() puts BN buffers at identity; gradients accumulate zeros
        for blk in grads.blocks.iter_mut() {
            blk.bn1.running_mean.fill(0.0);
            blk.bn1.running_var.fill(0.0);
            blk.bn2.running_mean.fill(0.0);
            blk.bn2.running_var.fill(0.0);
            blk.bn1.gamma.fill(0.0);
            blk.bn2.gamma.fill(0.0);
        }

        // heads
        let head_dims = cfg.head_dims();
        let mut dpooled = Mat::zeros(b, cfg.f_proj);
        for (h, ((head, htrace), dout)) in
            p.heads.iter().zip(&trace.heads).zip(upstream).enumerate()
        {
            let f_out = head_dims[h];
            let ghead = &mut grads.heads[h];
            if dout.rows != b {
                return Err(MegError::Shape("upstream gradient batch mismatch".into()));
            }
            let want_cols = if head.layers.is_empty() { cfg.f_proj } else { f_out };
            if dout.cols != want_cols {
                return Err(MegError::Shape(format!(
                    "upstream gradient has {} columns, expected {want_cols}",
                    dout.cols
                )));
            }
            let mut dcur = dout.clone();
            for (l, ((w, _), lt)) in head.layers.iter().zip(&htrace.layers).enumerate().rev() {
                let out_dim = if l + 1 == head.layers.len() { f_out } else { cfg.f_proj };
                let (dw, db) = &mut ghead.layers[l];
                let mut dg = Mat::zeros(b, cfg.f_proj);
                linear_rows_backward(&lt.g, w, out_dim, &dcur, &mut dg, dw, db);
                // GELU on xhat
                for (d, &h) in dg.data.iter_mut().zip(&lt.xhat.data) {
                    *d *= gelu_grad(h);
                }
                let mut dprev = Mat::zeros(b, cfg.f_proj);
                layer_norm_rows_backward(&lt.xhat, &lt.inv_std, &dg, &mut dprev);
                dcur = dprev;
            }
            for (acc, &g) in dpooled.data.iter_mut().zip(&dcur.data) {
                *acc += g;
            }
        }

        // temporal aggregation
        let mut dproj = BatchTensor::zeros(b, cfg.f_proj, t);
        match (&p.agg, &trace.agg) {
            (AggParams::MeanPool, AggTrace::MeanPool) => {
                let inv = 1.0 / t as f64;
                for i in 0..b {
                    for ch in 0..cfg.f_proj {
                        let g = dpooled.at(i, ch) * inv;
                        for d in dproj.row_mut(i, ch).iter_mut() {
                            *d += g;
                        }
                    }
                }
            }
            (AggParams::Affine { w, .. }, AggTrace::Affine) => {
                let (dw, db) = match &mut grads.agg {
                    AggParams::Affine { w, b } => (w, b),
                    _ => unreachable!(),
                };
                for i in 0..b {
                    for ch in 0..cfg.f_proj {
                        let g = dpooled.at(i, ch);
                        if g == 0.0 {
                            continue;
                        }
                        db[0] += g;
                        let src = trace.proj_out.row(i, ch);
                        let dst = dproj.row_mut(i, ch);
                        for k in 0..t {
                            dw[k] += g * src[k];
                            dst[k] += g * w[k];
                        }
                    }
                }
            }
            (AggParams::Attention { w, v, .. }, AggTrace::Attention { tanh_h, alpha }) => {
                let h = ATTENTION_HIDDEN;
                let (dw, db, dv) = match &mut grads.agg {
                    AggParams::Attention { w, b, v } => (w, b, v),
                    _ => unreachable!(),
                };
                for i in 0..b {
                    // pooled[i,ch] = Σ_t α[t]·y[i,ch,t]
                    let mut dalpha = vec![0.0; t];
                    for ch in 0..cfg.f_proj {
                        let g = dpooled.at(i, ch);
                        if g == 0.0 {
                            continue;
                        }
                        let src = trace.proj_out.row(i, ch);
                        let dst = dproj.row_mut(i, ch);
                        let ar = alpha.row(i);
                        for k in 0..t {
                            dalpha[k] += g * src[k];
                            dst[k] += g * ar[k];
                        }
                    }
                    let mut dscore = vec![0.0; t];
                    softmax_backward(alpha.row(i), &dalpha, &mut dscore);
                    // score[t] = Σ_h v[h]·tanh_h[i,h,t]
                    for hh in 0..h {
                        let thr = tanh_h.row(i, hh);
                        let mut dpre_sum = 0.0;
                        let wr = &w[hh * cfg.f_proj..(hh + 1) * cfg.f_proj];
                        let dwr = &mut dw[hh * cfg.f_proj..(hh + 1) * cfg.f_proj];
                        for k in 0..t {
                            dv[hh] += dscore[k] * thr[k];
                            let dpre = dscore[k] * v[hh] * (1.0 - thr[k] * thr[k]);
                            if dpre == 0.0 {
                                continue;
                            }
                            dpre_sum += dpre;
                            for ch in 0..cfg.f_proj {
                                dwr[ch] += dpre * trace.proj_out.row(i, ch)[k];
                                dproj.row_mut(i, ch)[k] += dpre * wr[ch];
                            }
                        }
                        db[hh] += dpre_sum;
                    }
                }
            }
            _ => return Err(MegError::Shape("aggregation trace does not match params".into())),
        }

        // final projection
        let mut dp1_act = BatchTensor::zeros(b, 2 * cfg.d, t);
        channel_linear_backward(
            &trace.p1_act,
            &p.proj2_w,
            cfg.f_proj,
            &dproj,
            &mut dp1_act,
            &mut grads.proj2_w,
            Some(&mut grads.proj2_b),
        );
        for (d, &pre) in dp1_act.data.iter_mut().zip(&trace.p1_pre.data) {
            *d *= gelu_grad(pre);
        }
        let last_out = &trace.blocks.last().expect("n_blocks >= 1").out;
        let mut dcur = BatchTensor::zeros(b, cfg.d, t);
        channel_linear_backward(
            last_out,
            &p.proj1_w,
            2 * cfg.d,
            &dp1_act,
            &mut dcur,
            &mut grads.proj1_w,
            Some(&mut grads.proj1_b),
        );

        // blocks in reverse
        for (k, (bp, bt)) in p.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let (dil1, dil2) = cfg.dilations(k);
            // out = glu(c3) + r2
            let mut dc3 = BatchTensor::zeros(b, 2 * cfg.d, t);
            glu_backward(&bt.c3, &dcur, &mut dc3);
            let gblk = &mut grads.blocks[k];
            let mut dr2 = dcur; // skip contribution
            conv1d_same_backward(
                &bt.r2,
                &bp.conv3_w,
                2 * cfg.d,
                1,
                &dc3,
                &mut dr2,
                &mut gblk.conv3_w,
                &mut gblk.conv3_b,
            );
            // r2 = gelu(bn2_out) + r1
            let mut dbn2_out = dr2.clone();
            for (d, &pre) in dbn2_out.data.iter_mut().zip(&bt.bn2_out.data) {
                *d *= gelu_grad(pre);
            }
            let mut dn2 = BatchTensor::zeros(b, cfg.d, t);
            batchnorm_backward(
                &bt.bn2,
                &bp.bn2.gamma,
                &dbn2_out,
                &mut dn2,
                &mut gblk.bn2.gamma,
                &mut gblk.bn2.beta,
            );
            let mut dr1 = dr2; // skip contribution
            conv1d_same_backward(
                &bt.r1,
                &bp.conv2_w,
                cfg.d,
                dil2,
                &dn2,
                &mut dr1,
                &mut gblk.conv2_w,
                &mut gblk.conv2_b,
            );
            // r1 = gelu(bn1_out) (+ input if skip1)
            let mut dbn1_out = dr1.clone();
            for (d, &pre) in dbn1_out.data.iter_mut().zip(&bt.bn1_out.data) {
                *d *= gelu_grad(pre);
            }
            let mut dn1 = BatchTensor::zeros(b, cfg.d, t);
            batchnorm_backward(
                &bt.bn1,
                &bp.bn1.gamma,
                &dbn1_out,
                &mut dn1,
                &mut gblk.bn1.gamma,
                &mut gblk.bn1.beta,
            );
            let mut dinput = if bt.skip1 { dr1 } else { BatchTensor::zeros(b, bt.input.c, t) };
            conv1d_same_backward(
                &bt.input,
                &bp.conv1_w,
                cfg.d,
                dil1,
                &dn1,
                &mut dinput,
                &mut gblk.conv1_w,
                &mut gblk.conv1_b,
            );
            dcur = dinput;
        }

        // subject layers
        let mut dpost = BatchTensor::zeros(b, cfg.c_att, t);
        subject_linear_backward(
            &trace.post,
            &p.subject_w,
            &trace.subjects,
            &dcur,
            &mut dpost,
            &mut grads.subject_w,
        );

        // post-attention linear
        let mut dsa = BatchTensor::zeros(b, cfg.c_att, t);
        channel_linear_backward(
            &trace.sa,
            &p.post_w,
            cfg.c_att,
            &dpost,
            &mut dsa,
            &mut grads.post_w,
            Some(&mut grads.post_b),
        );

        // spatial attention: mixdown, then softmax rows, then Fourier scores
        let mut dattn_w = vec![0.0; cfg.c_att * cfg.c_in];
        let mut dx = BatchTensor::zeros(b, cfg.c_in, t);
        channel_linear_backward(
            &trace.x,
            &trace.attn_w,
            cfg.c_att,
            &dsa,
            &mut dx,
            &mut dattn_w,
            None,
        );
        let m = 2 * cfg.fourier_k * cfg.fourier_k;
        for j in 0..cfg.c_att {
            let pr = &trace.attn_w[j * cfg.c_in..(j + 1) * cfg.c_in];
            let dpr = &dattn_w[j * cfg.c_in..(j + 1) * cfg.c_in];
            let mut dscore = vec![0.0; cfg.c_in];
            softmax_backward(pr, dpr, &mut dscore);
            let dcoef = &mut grads.attn_coef[j * m..(j + 1) * m];
            for (i, &ds) in dscore.iter().enumerate() {
                if ds == 0.0 {
                    continue;
                }
                let pi = &self.phi[i * m..(i + 1) * m];
                for (dc, &ph) in dcoef.iter_mut().zip(pi) {
                    *dc += ds * ph;
                }
            }
        }

        Ok((grads, dx))
    }

    /// Folds the batch statistics captured in a training trace into the
    /// running BN buffers (unbiased variance, momentum update).
    pub fn update_running_stats(&mut self, trace: &ForwardTrace) {
        let n = (trace.x.b * trace.x.t) as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (bp, bt) in self.params.blocks.iter_mut().zip(&trace.blocks) {
            for (bn, cache) in [(&mut bp.bn1, &bt.bn1), (&mut bp.bn2, &bt.bn2)] {
                for (rm, &bm) in bn.running_mean.iter_mut().zip(&cache.batch_mean) {
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * bm;
                }
                for (rv, &bv) in bn.running_var.iter_mut().zip(&cache.batch_var) {
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * bv * unbias;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brain::{build, Aggregation, HeadLayout};
    use approx::assert_abs_diff_eq;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_layout(c_in: usize, seed: u64) -> SensorLayout {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels: Vec<String> = (0..c_in).map(|i| format!("MEG{i:03}")).collect();
        let positions: Vec<[f64; 2]> =
            (0..c_in).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        SensorLayout::new(channels, positions).unwrap()
    }

    fn random_input(rng: &mut ChaCha8Rng, b: usize, c: usize, t: usize) -> BatchTensor {
        let data: Vec<f64> = (0..b * c * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        BatchTensor::from_vec(b, c, t, data).unwrap()
    }

    fn tiny_config() -> BrainModuleConfig {
        BrainModuleConfig {
            c_in: 6,
            c_att: 5,
            d: 8,
            n_blocks: 2,
            f_proj: 16,
            t: 12,
            fourier_k: 2,
            n_subjects: 3,
            aggregation: Aggregation::Attention,
            head_blocks: 2,
            f_out: 4,
            head_layout: HeadLayout::ClipAndMse,
            f_out_mse: Some(3),
        }
    }

    #[test]
    fn shape_trace_matches_published_table() {
        let config = BrainModuleConfig::default();
        let params = build(&config, 0).unwrap();
        let layout = grid_layout(272, 1);
        let module = BrainModule::new(config, params, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(&mut rng, 1, 272, 181);
        let (outputs, trace) = module.forward_train(&x, &[0]).unwrap();
        assert_eq!((trace.sa.c, trace.sa.t), (270, 181));
        assert_eq!((trace.post.c, trace.post.t), (270, 181));
        assert_eq!((trace.blocks[0].input.c, trace.blocks[0].input.t), (270, 181));
        assert_eq!((trace.blocks[0].out.c, trace.blocks[0].out.t), (320, 181));
        assert_eq!((trace.blocks[1].out.c, trace.blocks[1].out.t), (320, 181));
        assert_eq!((trace.p1_act.c, trace.p1_act.t), (640, 181));
        assert_eq!((trace.proj_out.c, trace.proj_out.t), (2048, 181));
        assert_eq!((trace.pooled.rows, trace.pooled.cols), (1, 2048));
        assert_eq!(outputs.len(), 1);
        assert_eq!((outputs[0].rows, outputs[0].cols), (1, 768));
        assert!(outputs[0].data.iter().all(|v| v.is_finite()));
        assert!(!trace.blocks[0].skip1);
        assert!(trace.blocks[1].skip1);
    }

    #[test]
    fn attention_rows_are_convex_weights() {
        let config = tiny_config();
        let params = build(&config, 3).unwrap();
        let layout = grid_layout(config.c_in, 4);
        let module = BrainModule::new(config.clone(), params, &layout).unwrap();
        let w = module.attention_weights();
        for j in 0..config.c_att {
            let row = &w[j * config.c_in..(j + 1) * config.c_in];
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_coefficients_give_channel_mean() {
        let c_in = 5;
        let layout = grid_layout(c_in, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_input(&mut rng, 2, c_in, 6);
        let coef = vec![0.0; 3 * 2 * 4];
        let (y, w) = spatial_attention_forward(&x, &layout, &coef, 3, 2).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / c_in as f64).abs() < 1e-12));
        for i in 0..2 {
            for t in 0..6 {
                let mean: f64 =
                    (0..c_in).map(|ch| x.row(i, ch)[t]).sum::<f64>() / c_in as f64;
                for j in 0..3 {
                    assert_abs_diff_eq!(y.row(i, j)[t], mean, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_input_channel_is_replicated() {
        let layout = grid_layout(1, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_input(&mut rng, 1, 1, 7);
        let coef: Vec<f64> = (0..4 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y, _) = spatial_attention_forward(&x, &layout, &coef, 4, 3).unwrap();
        for j in 0..4 {
            for t in 0..7 {
                assert_abs_diff_eq!(y.row(0, j)[t], x.row(0, 0)[t], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn spatial_attention_matches_brute_force() {
        let (c_in, c_att, k) = (4, 3, 2);
        let layout = grid_layout(c_in, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let coef: Vec<f64> = (0..c_att * 2 * k * k).map(|_| rng.random_range(-1.5..1.5)).collect();
        let x = random_input(&mut rng, 1, c_in, 5);
        let (y, _) = spatial_attention_forward(&x, &layout, &coef, c_att, k).unwrap();

        // direct reimplementation from the definition
        let m = 2 * k * k;
        for j in 0..c_att {
            let mut scores = vec![0.0; c_in];
            for (i, score) in scores.iter_mut().enumerate() {
                let [px, py] = layout.positions[i];
                for kk in 0..k {
                    for ll in 0..k {
                        let arg = std::f64::consts::TAU * (kk as f64 * px + ll as f64 * py);
                        *score += coef[j * m + kk * k + ll] * arg.cos();
                        *score += coef[j * m + k * k + kk * k + ll] * arg.sin();
                    }
                }
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for t in 0..5 {
                let want: f64 =
                    (0..c_in).map(|i| exps[i] / z * x.row(0, i)[t]).sum();
                assert_abs_diff_eq!(y.row(0, j)[t], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_affine_aggregation_blocks_input_signal() {
        let config = BrainModuleConfig {
            aggregation: Aggregation::Affine,
            head_layout: HeadLayout::ClipOnly,
            head_blocks: 1,
            f_out_mse: None,
            ..tiny_config()
        };
        let params = build(&config, 20).unwrap();
        let layout = grid_layout(config.c_in, 21);
        let module = BrainModule::new(config.clone(), params, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x1 = random_input(&mut rng, 2, config.c_in, config.t);
        let x2 = random_input(&mut rng, 2, config.c_in, config.t);
        let y1 = module.forward_eval(&x1, &[0, 1]).unwrap();
        let y2 = module.forward_eval(&x2, &[0, 1]).unwrap();
        for (a, b) in y1[0].data.iter().zip(&y2[0].data) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // and the input gradient is exactly zero
        let (_, trace) = module.forward_train(&x1, &[0, 1]).unwrap();
        let upstream = vec![Mat::from_vec(2, config.f_out, vec![1.0; 2 * config.f_out]).unwrap()];
        let (_, dx) = module.backward(&trace, &upstream).unwrap();
        assert!(dx.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_attention_scores_equal_mean_pool() {
        let mut config = tiny_config();
        config.aggregation = Aggregation::Attention;
        let mut params = build(&config, 30).unwrap();
        // v = 0 makes every score zero → uniform softmax
        if let AggParams::Attention { v, .. } = &mut params.agg {
            v.fill(0.0);
        }
        let layout = grid_layout(config.c_in, 31);
        let module = BrainModule::new(config.clone(), params.clone(), &layout).unwrap();

        let mut mean_cfg = config.clone();
        mean_cfg.aggregation = Aggregation::MeanPool;
        let mut mean_params = params;
        mean_params.agg = AggParams::MeanPool;
        let mean_module = BrainModule::new(mean_cfg, mean_params, &layout).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = random_input(&mut rng, 3, config.c_in, config.t);
        let subjects = [0, 2, 1];
        let (ya, _) = module.forward_train(&x, &subjects).unwrap();
        let (ym, _) = mean_module.forward_train(&x, &subjects).unwrap();
        for (head_a, head_m) in ya.iter().zip(&ym) {
            for (a, b) in head_a.data.iter().zip(&head_m.data) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn mean_pool_with_single_timestep_is_identity() {
        let config = BrainModuleConfig {
            t: 1,
            aggregation: Aggregation::MeanPool,
            ..tiny_config()
        };
        let params = build(&config, 40).unwrap();
        let layout = grid_layout(config.c_in, 41);
        let module = BrainModule::new(config.clone(), params, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random_input(&mut rng, 2, config.c_in, 1);
        let (_, trace) = module.forward_train(&x, &[0, 1]).unwrap();
        for i in 0..2 {
            for ch in 0..config.f_proj {
                assert_abs_diff_eq!(
                    trace.pooled.at(i, ch),
                    trace.proj_out.row(i, ch)[0],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn unknown_subject_and_bad_shapes_are_rejected() {
        let config = tiny_config();
        let params = build(&config, 50).unwrap();
        let layout = grid_layout(config.c_in, 51);
        let module = BrainModule::new(config.clone(), params, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x = random_input(&mut rng, 1, config.c_in, config.t);
        assert!(module.forward_eval(&x, &[config.n_subjects]).is_err());
        assert!(module.forward_eval(&x, &[0, 1]).is_err());
        let bad_t = random_input(&mut rng, 1, config.c_in, config.t + 1);
        assert!(module.forward_eval(&bad_t, &[0]).is_err());
        let bad_c = random_input(&mut rng, 1, config.c_in + 1, config.t);
        assert!(module.forward_eval(&bad_c, &[0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let config = tiny_config();
        let params = build(&config, 60).unwrap();
        let layout = grid_layout(config.c_in, 61);
        let module = BrainModule::new(config.clone(), params, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let x = random_input(&mut rng, 2, config.c_in, config.t);
        let (outputs, trace) = module.forward_train(&x, &[0, 2]).unwrap();
        let upstream: Vec<Mat> =
            outputs.iter().map(|o| Mat::zeros(o.rows, o.cols)).collect();
        let (grads, dx) = module.backward(&trace, &upstream).unwrap();
        for (name, slice) in grads.learnable() {
            assert!(slice.iter().all(|&v| v == 0.0), "nonzero gradient in {name}");
        }
        assert!(dx.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_subjects_get_zero_gradient() {
        let config = tiny_config();
        let params = build(&config, 70).unwrap();
        let layout = grid_layout(config.c_in, 71);
        let module = BrainModule::new(config.clone(), params, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let x = random_input(&mut rng, 2, config.c_in, config.t);
        let (outputs, trace) = module.forward_train(&x, &[1, 1]).unwrap();
        let upstream: Vec<Mat> = outputs
            .iter()
            .map(|o| {
                Mat::from_vec(o.rows, o.cols, (0..o.data.len()).map(|i| 0.1 * i as f64).collect())
                    .unwrap()
            })
            .collect();
        let (grads, _) = module.backward(&trace, &upstream).unwrap();
        let c2 = config.c_att * config.c_att;
        for s in [0, 2] {
            assert!(grads.subject_w[s * c2..(s + 1) * c2].iter().all(|&v| v == 0.0));
        }
        assert!(grads.subject_w[c2..2 * c2].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn running_stats_update_uses_unbiased_variance() {
        let config = tiny_config();
        let params = build(&config, 80).unwrap();
        let layout = grid_layout(config.c_in, 81);
        let mut module = BrainModule::new(config.clone(), params, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let x = random_input(&mut rng, 2, config.c_in, config.t);
        let (_, trace) = module.forward_train(&x, &[0, 1]).unwrap();
        let before = module.params.blocks[0].bn1.running_var[0];
        assert_eq!(before, 1.0);
        module.update_running_stats(&trace);
        let n = (2 * config.t) as f64;
        let want = 0.9 + 0.1 * trace.blocks[0].bn1.batch_var[0] * n / (n - 1.0);
        assert_abs_diff_eq!(module.params.blocks[0].bn1.running_var[0], want, epsilon = 1e-12);
        let want_mean = 0.1 * trace.blocks[0].bn1.batch_mean[0];
        assert_abs_diff_eq!(module.params.blocks[0].bn1.running_mean[0], want_mean, epsilon = 1e-12);
    }

    /// The module's master numerical check: every parameter gradient and the
    /// input gradient match central finite differences.
    #[test]
    fn backward_matches_finite_differences() {
        let config = tiny_config();
        let base = build(&config, 90).unwrap();
        let layout = grid_layout(config.c_in, 91);
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let x = random_input(&mut rng, 3, config.c_in, config.t);
        let subjects = [0, 2, 1];
        let u: Vec<Mat> = config
            .head_dims()
            .iter()
            .map(|&f| {
                Mat::from_vec(3, f, (0..3 * f).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let objective = |params: &BrainModuleParams, x: &BatchTensor| -> f64 {
            let module = BrainModule::new(config.clone(), params.clone(), &layout).unwrap();
            let (outs, _) = module.forward_train(x, &subjects).unwrap();
            outs.iter()
                .zip(&u)
                .map(|(o, w)| o.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };

        let module = BrainModule::new(config.clone(), base.clone(), &layout).unwrap();
        let (_, trace) = module.forward_train(&x, &subjects).unwrap();
        let (grads, dx) = module.backward(&trace, &u).unwrap();

        let eps = 1e-4;
        let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-6);

        let grad_list = grads.learnable();
        let names: Vec<String> = grad_list.iter().map(|(n, _)| n.clone()).collect();
        let analytic: Vec<Vec<f64>> = grad_list.iter().map(|(_, s)| s.to_vec()).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = analytic[ti].len();
            for idx in 0..len {
                let mut pp = base.clone();
                pp.learnable_mut()[ti].1[idx] += eps;
                let mut pm = base.clone();
                pm.learnable_mut()[ti].1[idx] -= eps;
                let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * eps);
                let a = analytic[ti][idx];
                assert!(
                    rel(a, fd) < 1e-4,
                    "{name}[{idx}]: analytic {a}, finite-diff {fd}"
                );
            }
        }
        for idx in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let fd = (objective(&base, &xp) - objective(&base, &xm)) / (2.0 * eps);
            assert!(
                rel(dx.data[idx], fd) < 1e-4,
                "input[{idx}]: analytic {}, finite-diff {fd}",
                dx.data[idx]
            );
        }
    }

    #[test]
    fn backward_matches_finite_differences_affine_mean_variants() {
        for (agg, head_blocks) in
            [(Aggregation::Affine, 1), (Aggregation::MeanPool, 0)]
        {
            let config = BrainModuleConfig {
                aggregation: agg,
                head_blocks,
                head_layout: HeadLayout::ClipOnly,
                f_out: if head_blocks == 0 { 16 } else { 4 },
                f_out_mse: None,
                n_blocks: 1,
                ..tiny_config()
            };
            let mut base = build(&config, 100).unwrap();
            // the affine aggregation initializes at zero, which would hide
            // downstream gradients; give it signal
            if let AggParams::Affine { w, b } = &mut base.agg {
                let mut rng = ChaCha8Rng::seed_from_u64(101);
                for v in w.iter_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
                b[0] = 0.2;
            }
            let layout = grid_layout(config.c_in, 102);
            let mut rng = ChaCha8Rng::seed_from_u64(103);
            let x = random_input(&mut rng, 2, config.c_in, config.t);
            let subjects = [2, 0];
            let f = config.head_dims()[0];
            let u = vec![Mat::from_vec(
                2,
                f,
                (0..2 * f).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()];
            let objective = |params: &BrainModuleParams, x: &BatchTensor| -> f64 {
                let module = BrainModule::new(config.clone(), params.clone(), &layout).unwrap();
                let (outs, _) = module.forward_train(x, &subjects).unwrap();
                outs[0].data.iter().zip(&u[0].data).map(|(a, b)| a * b).sum()
            };
            let module = BrainModule::new(config.clone(), base.clone(), &layout).unwrap();
            let (_, trace) = module.forward_train(&x, &subjects).unwrap();
            let (grads, _) = module.backward(&trace, &u).unwrap();

            let eps = 1e-4;
            let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
            let grad_list = grads.learnable();
            for ti in 0..grad_list.len() {
                let (name, slice) = &grad_list[ti];
                for idx in 0..slice.len() {
                    let mut pp = base.clone();
                    pp.learnable_mut()[ti].1[idx] += eps;
                    let mut pm = base.clone();
                    pm.learnable_mut()[ti].1[idx] -= eps;
                    let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * eps);
                    assert!(
                        rel(slice[idx], fd) < 1e-4,
                        "{name}[{idx}] ({agg:?}): analytic {}, finite-diff {fd}",
                        slice[idx]
                    );
                }
            }
        }
    }

    #[test]
    fn eval_mode_differs_from_train_mode_after_stats_update() {
        let config = tiny_config();
        let params = build(&config, 110).unwrap();
        let layout = grid_layout(config.c_in, 111);
        let mut module = BrainModule::new(config.clone(), params, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(112);
        let x = random_input(&mut rng, 2, config.c_in, config.t);
        let (train_out, trace) = module.forward_train(&x, &[0, 1]).unwrap();
        module.update_running_stats(&trace);
        let eval_out = module.forward(&x, &[0, 1], Mode::Eval).unwrap();
        // same shapes, different normalization statistics
        assert_eq!(train_out[0].rows, eval_out[0].rows);
        assert_eq!(train_out[0].cols, eval_out[0].cols);
        let diff: f64 = train_out[0]
            .data
            .iter()
            .zip(&eval_out[0].data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9);
    }
}
