//! Reconstruction-quality metrics: pixelwise correlation, SSIM, 2-way
//! identification against embedding providers, and the block-based example
//! selection used for qualitative figures.

use crate::error::{MegError, Result};
use crate::linalg::{pearson, Mat};
use crate::windows::WindowReport;

/// SSIM stabilizers for unit dynamic range.
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_WIN: usize = 11;
pub const DEFAULT_PIXCORR_SIDE: usize = 64;

/// Grayscale image, row-major, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(MegError::Shape("empty image".into()));
        }
        if data.len() != h * w {
            return Err(MegError::Shape(format!(
                "image data of {} values is not {h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MegError::NonFinite("image pixels".into()));
        }
        Ok(GrayImage { h, w, data })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    /// Bilinear resize with half-pixel centers (the usual non-aligned-corner
    /// convention). Identity when the size already matches.
    pub fn resize(&self, h: usize, w: usize) -> Result<GrayImage> {
        if h == 0 || w == 0 {
            return Err(MegError::Shape("resize to empty image".into()));
        }
        if h == self.h && w == self.w {
            return Ok(self.clone());
        }
        let mut out = vec![0.0; h * w];
        let sy = self.h as f64 / h as f64;
        let sx = self.w as f64 / w as f64;
        for i in 0..h {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let wy = fy - y0 as f64;
            for j in 0..w {
                let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let wx = fx - x0 as f64;
                let top = self.at(y0, x0) * (1.0 - wx) + self.at(y0, x1) * wx;
                let bot = self.at(y1, x0) * (1.0 - wx) + self.at(y1, x1) * wx;
                out[i * w + j] = top * (1.0 - wy) + bot * wy;
            }
        }
        GrayImage::new(h, w, out)
    }
}

/// Pearson correlation of the two images after bilinear resize to
/// `side`×`side`. Constant images have no defined correlation and error.
pub fn pixcorr(truth: &GrayImage, gen: &GrayImage, side: usize) -> Result<f64> {
    let a = truth.resize(side, side)?;
    let b = gen.resize(side, side)?;
    pearson(&a.data, &b.data)
}

fn gaussian_kernel() -> [f64; SSIM_WIN] {
    let radius = (SSIM_WIN - 1) / 2;
    let mut k = [0.0; SSIM_WIN];
    for (i, slot) in k.iter_mut().enumerate() {
        let x = i as f64 - radius as f64;
        *slot = (-0.5 * (x / SSIM_SIGMA).powi(2)).exp();
    }
    let sum: f64 = k.iter().sum();
    for slot in &mut k {
        *slot /= sum;
    }
    k
}

/// Separable valid-mode filter; output shrinks by the kernel radius per side.
fn valid_filter(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let r = (k.len() - 1) / 2;
    let wv = w - 2 * r;
    let mut rows = vec![0.0; h * wv];
    for i in 0..h {
        for j in 0..wv {
            let mut acc = 0.0;
            for (o, &kv) in k.iter().enumerate() {
                acc += kv * img[i * w + j + o];
            }
            rows[i * wv + j] = acc;
        }
    }
    let hv = h - 2 * r;
    let mut out = vec![0.0; hv * wv];
    for i in 0..hv {
        for j in 0..wv {
            let mut acc = 0.0;
            for (o, &kv) in k.iter().enumerate() {
                acc += kv * rows[(i + o) * wv + j];
            }
            out[i * wv + j] = acc;
        }
    }
    (out, hv, wv)
}

/// Mean local SSIM over a valid-mode Gaussian window (sigma 1.5, size 11,
/// K1=0.01, K2=0.03, dynamic range 1). Matches the standard reference
/// implementation; images must share a size of at least the window.
pub fn ssim(truth: &GrayImage, gen: &GrayImage) -> Result<f64> {
    if truth.h != gen.h || truth.w != gen.w {
        return Err(MegError::Shape(format!(
            "ssim on {}x{} vs {}x{}",
            truth.h, truth.w, gen.h, gen.w
        )));
    }
    if truth.h < SSIM_WIN || truth.w < SSIM_WIN {
        return Err(MegError::Shape(format!(
            "image {}x{} smaller than the {SSIM_WIN}-pixel ssim window",
            truth.h, truth.w
        )));
    }
    let k = gaussian_kernel();
    let (h, w) = (truth.h, truth.w);
    let xx: Vec<f64> = truth.data.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = gen.data.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = truth.data.iter().zip(&gen.data).map(|(a, b)| a * b).collect();
    let (ux, hv, wv) = valid_filter(&truth.data, h, w, &k);
    let (uy, _, _) = valid_filter(&gen.data, h, w, &k);
    let (uxx, _, _) = valid_filter(&xx, h, w, &k);
    let (uyy, _, _) = valid_filter(&yy, h, w, &k);
    let (uxy, _, _) = valid_filter(&xy, h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0;
    for i in 0..hv * wv {
        let vx = uxx[i] - ux[i] * ux[i];
        let vy = uyy[i] - uy[i] * uy[i];
        let cxy = uxy[i] - ux[i] * uy[i];
        let num = (2.0 * ux[i] * uy[i] + c1) * (2.0 * cxy + c2);
        let den = (ux[i] * ux[i] + uy[i] * uy[i] + c1) * (vx + vy + c2);
        acc += num / den;
    }
    Ok(acc / (hv * wv) as f64)
}

/// Engineered image embeddings standing in for pretrained networks at desk
/// scale; precomputed banks plug in through the matrix-level scores instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provider {
    /// 16×16 bilinear thumbnail, flattened (256 dims).
    Thumb16,
    /// 32-bin intensity histogram.
    GrayHist,
    /// 9-bin gradient orientation histogram weighted by magnitude.
    GradHist,
}

impl Provider {
    pub fn name(&self) -> &'static str {
        match self {
            Provider::Thumb16 => "thumb16",
            Provider::GrayHist => "grayhist",
            Provider::GradHist => "gradhist",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "thumb16" => Ok(Provider::Thumb16),
            "grayhist" => Ok(Provider::GrayHist),
            "gradhist" => Ok(Provider::GradHist),
            other => Err(MegError::Invalid(format!("unknown embedding provider {other:?}"))),
        }
    }

    pub fn embed(&self, img: &GrayImage) -> Result<Vec<f64>> {
        match self {
            Provider::Thumb16 => Ok(img.resize(16, 16)?.data),
            Provider::GrayHist => {
                let mut bins = vec![0.0; 32];
                for &v in &img.data {
                    let b = ((v.clamp(0.0, 1.0)) * 31.999).floor() as usize;
                    bins[b.min(31)] += 1.0;
                }
                let n = img.data.len() as f64;
                for b in &mut bins {
                    *b /= n;
                }
                Ok(bins)
            }
            Provider::GradHist => {
                if img.h < 3 || img.w < 3 {
                    return Err(MegError::Shape("gradient histogram needs a 3x3 image".into()));
                }
                let mut bins = vec![0.0; 9];
                for i in 1..img.h - 1 {
                    for j in 1..img.w - 1 {
                        let gx = img.at(i, j + 1) - img.at(i, j - 1);
                        let gy = img.at(i + 1, j) - img.at(i - 1, j);
                        let mag = (gx * gx + gy * gy).sqrt();
                        // unsigned orientation in [0, pi)
                        let mut ang = gy.atan2(gx);
                        if ang < 0.0 {
                            ang += std::f64::consts::PI;
                        }
                        let b = (ang / std::f64::consts::PI * 9.0).floor() as usize;
                        bins[b.min(8)] += mag;
                    }
                }
                Ok(bins)
            }
        }
    }
}

fn embed_all(provider: Provider, imgs: &[GrayImage]) -> Result<Mat> {
    let rows: Vec<Vec<f64>> =
        imgs.iter().map(|img| provider.embed(img)).collect::<Result<_>>()?;
    Mat::from_rows(&rows)
}

/// Ordered-pair 2-way identification from precomputed embeddings: for every
/// generated row i and distractor j != i, success iff corr(g_i, t_i) strictly
/// beats corr(g_i, t_j). The mean over all ordered pairs lands in [0, 1].
pub fn two_way_from_embeddings(e_true: &Mat, e_gen: &Mat) -> Result<f64> {
    if e_true.rows != e_gen.rows || e_true.cols != e_gen.cols {
        return Err(MegError::Shape(format!(
            "embedding shapes {}x{} vs {}x{}",
            e_true.rows, e_true.cols, e_gen.rows, e_gen.cols
        )));
    }
    let n = e_true.rows;
    if n < 2 {
        return Err(MegError::Invalid("2-way score needs at least two pairs".into()));
    }
    let mut corr = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            *corr.at_mut(i, j) = pearson(e_gen.row(i), e_true.row(j))?;
        }
    }
    let mut hits = 0usize;
    for i in 0..n {
        for j in 0..n {
            if j != i && corr.at(i, i) > corr.at(i, j) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (n * (n - 1)) as f64)
}

pub fn two_way_score(trues: &[GrayImage], gens: &[GrayImage], provider: Provider) -> Result<f64> {
    if trues.len() != gens.len() {
        return Err(MegError::Shape("mismatched image pair lists".into()));
    }
    two_way_from_embeddings(&embed_all(provider, trues)?, &embed_all(provider, gens)?)
}

/// Mean correlation distance 1 − corr(E(t_i), E(g_i)); lower is better.
pub fn embedding_distance_from(e_true: &Mat, e_gen: &Mat) -> Result<f64> {
    if e_true.rows != e_gen.rows || e_true.cols != e_gen.cols || e_true.rows == 0 {
        return Err(MegError::Shape("mismatched or empty embedding matrices".into()));
    }
    let mut acc = 0.0;
    for i in 0..e_true.rows {
        acc += 1.0 - pearson(e_true.row(i), e_gen.row(i))?;
    }
    Ok(acc / e_true.rows as f64)
}

pub fn embedding_distance(
    trues: &[GrayImage],
    gens: &[GrayImage],
    provider: Provider,
) -> Result<f64> {
    if trues.len() != gens.len() {
        return Err(MegError::Shape("mismatched image pair lists".into()));
    }
    embedding_distance_from(&embed_all(provider, trues)?, &embed_all(provider, gens)?)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GenMetricReport {
    pub n_pairs: usize,
    pub pixcorr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub pixcorr_mean: f64,
    pub pixcorr_sem: f64,
    pub ssim_mean: f64,
    pub ssim_sem: f64,
    /// (provider name, score) per provider, input order.
    pub two_way: Vec<(String, f64)>,
    pub embedding_distance: Vec<(String, f64)>,
}

fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn evaluate_pairs(
    trues: &[GrayImage],
    gens: &[GrayImage],
    providers: &[Provider],
    pixcorr_side: usize,
) -> Result<GenMetricReport> {
    if trues.len() != gens.len() || trues.is_empty() {
        return Err(MegError::Shape("need equal, nonempty image pair lists".into()));
    }
    let mut pix = Vec::with_capacity(trues.len());
    let mut ss = Vec::with_capacity(trues.len());
    for (t, g) in trues.iter().zip(gens) {
        pix.push(pixcorr(t, g, pixcorr_side)?);
        ss.push(ssim(t, g)?);
    }
    let (pixcorr_mean, pixcorr_sem) = mean_sem(&pix);
    let (ssim_mean, ssim_sem) = mean_sem(&ss);
    let mut two_way = Vec::new();
    let mut dist = Vec::new();
    for &p in providers {
        two_way.push((p.name().to_string(), two_way_score(trues, gens, p)?));
        dist.push((p.name().to_string(), embedding_distance(trues, gens, p)?));
    }
    Ok(GenMetricReport {
        n_pairs: trues.len(),
        pixcorr: pix,
        ssim: ss,
        pixcorr_mean,
        pixcorr_sem,
        ssim_mean,
        ssim_sem,
        two_way,
        embedding_distance: dist,
    })
}

/// Per-example scores feeding the qualitative selection.
#[derive(Debug, Clone)]
pub struct ExampleScore {
    pub id: String,
    pub swav: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectedExamples {
    /// Indices into the input slice, best block first.
    pub best: Vec<usize>,
    pub middle: Vec<usize>,
    pub worst: Vec<usize>,
}

/// Sorts by (−swav + ssim) descending, cuts the order into `n_blocks` blocks
/// (remainder to the last), and picks the first `per_block` entries of the
/// best, middle, and worst blocks. Ties keep input order.
pub fn select_examples(
    scores: &[ExampleScore],
    n_blocks: usize,
    per_block: usize,
) -> Result<SelectedExamples> {
    if n_blocks == 0 || per_block == 0 {
        return Err(MegError::Invalid("n_blocks and per_block must be positive".into()));
    }
    if scores.len() < n_blocks {
        return Err(MegError::Invalid(format!(
            "{} examples cannot fill {n_blocks} blocks",
            scores.len()
        )));
    }
    let key = |s: &ExampleScore| -s.swav + s.ssim;
    if scores.iter().any(|s| !key(s).is_finite()) {
        return Err(MegError::NonFinite("example sort key".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(&scores[b]).partial_cmp(&key(&scores[a])).expect("finite keys"));
    let base = scores.len() / n_blocks;
    let block = |k: usize| -> &[usize] {
        let start = k * base;
        let end = if k + 1 == n_blocks { scores.len() } else { start + base };
        &order[start..end]
    };
    let take = |k: usize| -> Vec<usize> {
        let b = block(k);
        b[..per_block.min(b.len())].to_vec()
    };
    Ok(SelectedExamples { best: take(0), middle: take(n_blocks / 2), worst: take(n_blocks - 1) })
}

/// Min-max normalization to [0, 1]; a flat (or single-point) curve maps to
/// all zeros by convention.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_normal() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Turns a window-sweep table into per-metric normalized curves, ordered as
/// the rows. Every row must carry the same metrics.
pub fn normalize_window_table(rows: &[WindowReport]) -> Result<Vec<(String, Vec<f64>)>> {
    let Some(first) = rows.first() else {
        return Err(MegError::Invalid("empty window table".into()));
    };
    let names: Vec<&String> = first.metrics.iter().map(|(n, _)| n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (mi, name) in names.iter().enumerate() {
        let mut curve = Vec::with_capacity(rows.len());
        for row in rows {
            match row.metrics.get(mi) {
                Some((n, v)) if n == *name => curve.push(*v),
                _ => {
                    return Err(MegError::Invalid(format!(
                        "window rows disagree on metric {name:?}"
                    )))
                }
            }
        }
        out.push(((*name).clone(), minmax_normalize(&curve)));
    }
    Ok(out)
}
