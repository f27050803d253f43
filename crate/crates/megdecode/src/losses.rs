//! Training objectives: the contrastive CLIP loss with its variants, plain
//! MSE, and their convex combination, each returning analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{MegError, Result};
use crate::linalg::{dot, norm, Mat};

/// Row norms below this are treated as zero (cosine undefined).
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAxis {
    /// L2-normalize target latents Z only; predictions enter raw.
    ImageOnly,
    /// Normalize both sides: pure cosine similarity.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    Fixed { tau: f64 },
    /// Parameterized as log τ so τ stays positive under gradient steps.
    Learned { log_tau: f64 },
}

impl TemperatureMode {
    pub fn tau(&self) -> f64 {
        match *self {
            TemperatureMode::Fixed { tau } => tau,
            TemperatureMode::Learned { log_tau } => log_tau.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipLossConfig {
    /// Both softmax directions vs the brain-to-image term only.
    pub symmetric: bool,
    pub norm_axis: NormAxis,
    pub temperature: TemperatureMode,
}

impl Default for ClipLossConfig {
    fn default() -> Self {
        ClipLossConfig {
            symmetric: true,
            norm_axis: NormAxis::ImageOnly,
            temperature: TemperatureMode::Fixed { tau: 1.0 },
        }
    }
}

impl ClipLossConfig {
    pub fn validate(&self) -> Result<()> {
        let tau = self.temperature.tau();
        if !(tau.is_finite() && tau > 0.0) {
            return Err(MegError::Invalid(format!("temperature must be positive, got {tau}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClipLossOutput {
    pub loss: f64,
    pub grad_zhat: Mat,
    /// ∂loss/∂(log τ); zero gradient flow intended when τ is fixed.
    pub grad_log_tau: f64,
}

fn normalized_rows(m: &Mat, what: &str) -> Result<(Mat, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows);
    for i in 0..m.rows {
        let n = norm(m.row(i));
        if n < NORM_FLOOR {
            return Err(MegError::Invalid(format!("zero-norm row {i} in {what}")));
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

fn check_pair(zhat: &Mat, z: &Mat) -> Result<()> {
    if zhat.rows != z.rows || zhat.cols != z.cols {
        return Err(MegError::Shape(format!(
            "prediction {}x{} vs target {}x{}",
            zhat.rows, zhat.cols, z.rows, z.cols
        )));
    }
    if zhat.rows == 0 {
        return Err(MegError::Shape("empty batch".into()));
    }
    if !zhat.is_finite() || !z.is_finite() {
        return Err(MegError::NonFinite("non-finite values in loss inputs".into()));
    }
    Ok(())
}

/// Contrastive loss over a batch: cross-entropy of picking the matching
/// target under softmaxed similarities, averaged with a 1/B prefactor.
/// Symmetric mode adds the image-to-brain direction.
pub fn clip_loss(zhat: &Mat, z: &Mat, cfg: &ClipLossConfig) -> Result<ClipLossOutput> {
    check_pair(zhat, z)?;
    cfg.validate()?;
    let b = zhat.rows;
    let tau = cfg.temperature.tau();

    let (nhat, hat_norms) = match cfg.norm_axis {
        NormAxis::Both => {
            let (n, norms) = normalized_rows(zhat, "predictions")?;
            (n, Some(norms))
        }
        NormAxis::ImageOnly => (zhat.clone(), None),
    };
    let (m, _) = normalized_rows(z, "targets")?;

    let mut logits = Mat::zeros(b, b);
    for i in 0..b {
        let ni = nhat.row(i);
        for j in 0..b {
            *logits.at_mut(i, j) = dot(ni, m.row(j)) / tau;
        }
    }

    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut dl = Mat::zeros(b, b);
    // brain-to-image: softmax over targets per prediction row
    for i in 0..b {
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        loss -= (row[i] - lse) * inv_b;
        for j in 0..b {
            let p = (row[j] - lse).exp();
            *dl.at_mut(i, j) += (p - if i == j { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    if cfg.symmetric {
        // image-to-brain: softmax over predictions per target column
        for j in 0..b {
            let mx = (0..b).map(|i| logits.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx
                + (0..b).map(|i| (logits.at(i, j) - mx).exp()).sum::<f64>().ln();
            loss -= (logits.at(j, j) - lse) * inv_b;
            for i in 0..b {
                let q = (logits.at(i, j) - lse).exp();
                *dl.at_mut(i, j) += (q - if i == j { 1.0 } else { 0.0 }) * inv_b;
            }
        }
    }

    // logits scale with exp(−log τ), so ∂L/∂(log τ) = −Σ dl ⊙ logits
    let grad_log_tau = -dl.data.iter().zip(&logits.data).map(|(&a, &b)| a * b).sum::<f64>();

    // back through the similarity: dS = dl/τ, then into prediction rows
    let mut g = Mat::zeros(b, zhat.cols);
    for i in 0..b {
        for j in 0..b {
            let w = dl.at(i, j) / tau;
            if w == 0.0 {
                continue;
            }
            let mj = m.row(j);
            for (dst, &v) in g.row_mut(i).iter_mut().zip(mj) {
                *dst += w * v;
            }
        }
    }
    let grad_zhat = match hat_norms {
        None => g,
        Some(norms) => {
            // through row normalization: (g − n̂ (g·n̂)) / ‖ẑ‖
            let mut out = Mat::zeros(b, zhat.cols);
            for i in 0..b {
                let gi = g.row(i);
                let ni = nhat.row(i);
                let proj = dot(gi, ni);
                for ((dst, &gv), &nv) in out.row_mut(i).iter_mut().zip(gi).zip(ni) {
                    *dst = (gv - nv * proj) / norms[i];
                }
            }
            out
        }
    };

    Ok(ClipLossOutput { loss, grad_zhat, grad_log_tau })
}

/// Mean squared error over all N·F entries, with its gradient 2(Ẑ−Z)/(NF).
pub fn mse_loss(zhat: &Mat, z: &Mat) -> Result<(f64, Mat)> {
    check_pair(zhat, z)?;
    let nf = (zhat.rows * zhat.cols) as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(zhat.rows, zhat.cols);
    for ((g, &a), &b) in grad.data.iter_mut().zip(&zhat.data).zip(&z.data) {
        let d = a - b;
        loss += d * d;
        *g = 2.0 * d / nf;
    }
    Ok((loss / nf, grad))
}

#[derive(Debug, Clone)]
pub struct CombinedLossOutput {
    pub loss: f64,
    pub clip_loss: f64,
    pub mse_loss: f64,
    pub grad_clip_head: Mat,
    pub grad_mse_head: Mat,
    pub grad_log_tau: f64,
}

/// λ·L_CLIP + (1−λ)·L_MSE with per-head gradients. The two heads may target
/// latents of different dimension.
pub fn combined_loss(
    zhat_clip: &Mat,
    zhat_mse: &Mat,
    z_clip: &Mat,
    z_mse: &Mat,
    lambda: f64,
    cfg: &ClipLossConfig,
) -> Result<CombinedLossOutput> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MegError::Invalid(format!("lambda must be in [0,1], got {lambda}")));
    }
    let clip = clip_loss(zhat_clip, z_clip, cfg)?;
    let (mse, mse_grad) = mse_loss(zhat_mse, z_mse)?;
    let mut grad_clip_head = clip.grad_zhat;
    for v in grad_clip_head.data.iter_mut() {
        *v *= lambda;
    }
    let mut grad_mse_head = mse_grad;
    for v in grad_mse_head.data.iter_mut() {
        *v *= 1.0 - lambda;
    }
    Ok(CombinedLossOutput {
        loss: lambda * clip.loss + (1.0 - lambda) * mse,
        clip_loss: clip.loss,
        mse_loss: mse,
        grad_clip_head,
        grad_mse_head,
        grad_log_tau: lambda * clip.grad_log_tau,
    })
}

/// Central-difference check of an analytic gradient; returns the worst
/// relative error over coordinates.
pub fn grad_check<F>(f: F, point: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if eps <= 0.0 {
        return Err(MegError::Invalid(format!("step must be positive, got {eps}")));
    }
    let (_, analytic) = f(point);
    if analytic.len() != point.len() {
        return Err(MegError::Shape(format!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            point.len()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut work = point.to_vec();
    for i in 0..point.len() {
        work[i] = point[i] + eps;
        let fp = f(&work).0;
        work[i] = point[i] - eps;
        let fm = f(&work).0;
        work[i] = point[i];
        let fd = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}
