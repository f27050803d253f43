//! Time-window enumeration for sliding/growing analyses and the
//! temporal-aggregation weight profile.

use serde::{Deserialize, Serialize};

use crate::brain::{AggParams, BrainModuleParams};
use crate::error::{MegError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Sliding,
    Growing,
    Full,
}

/// A time window in seconds relative to stimulus onset, inclusive on both
/// ends at sample resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub t_start: f64,
    pub t_end: f64,
    pub kind: WindowKind,
}

impl WindowSpec {
    pub fn new(t_start: f64, t_end: f64, kind: WindowKind) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(MegError::Invalid(format!(
                "window [{t_start}, {t_end}] must have t_end > t_start"
            )));
        }
        Ok(WindowSpec { t_start, t_end, kind })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }

    pub fn width(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// Guard against float accumulation when width/stride divide the span.
const GRID_EPS: f64 = 1e-9;

/// Fixed-width windows from the epoch start, advancing by `stride` while the
/// window still fits.
pub fn enumerate_sliding(
    epoch_start: f64,
    epoch_end: f64,
    width: f64,
    stride: f64,
) -> Result<Vec<WindowSpec>> {
    if width <= 0.0 || stride <= 0.0 {
        return Err(MegError::Invalid("width and stride must be positive".into()));
    }
    let span = epoch_end - epoch_start;
    if width > span + GRID_EPS {
        return Err(MegError::Invalid(format!(
            "window width {width} exceeds epoch span {span}"
        )));
    }
    let n = ((span - width) / stride + GRID_EPS).floor() as usize + 1;
    (0..n)
        .map(|i| {
            let start = epoch_start + i as f64 * stride;
            WindowSpec::new(start, start + width, WindowKind::Sliding)
        })
        .collect()
}

/// Fixed start, end growing from `end_min` to `end_max` by `step`.
pub fn enumerate_growing(
    start: f64,
    end_min: f64,
    end_max: f64,
    step: f64,
) -> Result<Vec<WindowSpec>> {
    if step <= 0.0 {
        return Err(MegError::Invalid("step must be positive".into()));
    }
    if end_min < start {
        return Err(MegError::Invalid(format!(
            "end_min {end_min} precedes window start {start}"
        )));
    }
    if end_max < end_min {
        return Err(MegError::Invalid(format!("end_max {end_max} below end_min {end_min}")));
    }
    let n = ((end_max - end_min) / step + GRID_EPS).floor() as usize + 1;
    (0..n)
        .map(|i| {
            let end = end_min + i as f64 * step;
            // a zero-length window at sample resolution still covers one sample
            WindowSpec::new(start, end.max(start + GRID_EPS), WindowKind::Growing)
        })
        .collect()
}

/// Default sliding enumeration: 100 ms windows, 25 ms stride over [−0.5, 1.0] s.
pub fn default_sliding() -> Vec<WindowSpec> {
    enumerate_sliding(-0.5, 1.0, 0.1, 0.025).expect("defaults are valid")
}

/// Default growing enumeration: start −0.1 s, end 0.0 … 1.5 s by 25 ms.
pub fn default_growing() -> Vec<WindowSpec> {
    enumerate_growing(-0.1, 0.0, 1.5, 0.025).expect("defaults are valid")
}

/// Maps a window to an inclusive sample range within an epoch that starts at
/// `epoch_t_min` and holds `n_times` samples at `sfreq`.
pub fn window_to_sample_range(
    spec: &WindowSpec,
    epoch_t_min: f64,
    sfreq: f64,
    n_times: usize,
) -> Result<(usize, usize)> {
    let first = ((spec.t_start - epoch_t_min) * sfreq).round() as i64;
    let len = ((spec.t_end - spec.t_start) * sfreq).round() as i64 + 1;
    if first < 0 || (first + len) as usize > n_times {
        return Err(MegError::Invalid(format!(
            "window [{}, {}] falls outside the epoch ({} samples from t={epoch_t_min} at {sfreq} Hz)",
            spec.t_start, spec.t_end, n_times
        )));
    }
    Ok((first as usize, len as usize))
}

#[derive(Debug, Clone)]
pub struct WindowReport {
    pub spec: WindowSpec,
    pub metrics: Vec<(String, f64)>,
}

/// Runs one independent job per window (train + evaluate, supplied by the
/// caller) and collects per-window metric rows.
pub fn window_sweep<F>(specs: &[WindowSpec], mut run: F) -> Result<Vec<WindowReport>>
where
    F: FnMut(&WindowSpec) -> Result<Vec<(String, f64)>>,
{
    if specs.is_empty() {
        return Err(MegError::Invalid("empty window list".into()));
    }
    specs
        .iter()
        .map(|spec| Ok(WindowReport { spec: *spec, metrics: run(spec)? }))
        .collect()
}

/// Mean absolute affine-aggregation weight per time step across models.
pub fn agg_weight_profile(models: &[&BrainModuleParams]) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(MegError::Invalid("no models for weight profile".into()));
    }
    let t = match &models[0].agg {
        AggParams::Affine { w, .. } => w.len(),
        _ => {
            return Err(MegError::Invalid(
                "weight profile requires affine temporal aggregation".into(),
            ))
        }
    };
    let mut profile = vec![0.0; t];
    for params in models {
        match &params.agg {
            AggParams::Affine { w, .. } if w.len() == t => {
                for (acc, &v) in profile.iter_mut().zip(w) {
                    *acc += v.abs();
                }
            }
            AggParams::Affine { .. } => {
                return Err(MegError::Shape("models disagree on timestep count".into()))
            }
            _ => {
                return Err(MegError::Invalid(
                    "weight profile requires affine temporal aggregation".into(),
                ))
            }
        }
    }
    let inv = 1.0 / models.len() as f64;
    for v in profile.iter_mut() {
        *v *= inv;
    }
    Ok(profile)
}
