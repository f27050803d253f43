//! Engineered image features and latent postprocessing.
//!
//! These are the embedding providers computable without pretrained networks:
//! color histograms, local binary patterns, HOG, and 2-D FFT features. Deep
//! embeddings always arrive as precomputed latent banks; token pooling is
//! assumed done upstream.


use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::datastore::LatentBank;
use crate::error::{MegError, Result};
use crate::linalg::Mat;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    pub height: usize,
    pub width: usize,
    /// H×W×3 interleaved RGB, row-major, values in [0,1].
    pub data: Vec<f64>,
}

impl ImageRaster {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(MegError::Invalid("empty image".into()));
        }
        if data.len() != height * width * 3 {
            return Err(MegError::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(MegError::Invalid(
                "image values must be finite and within [0,1]".into(),
            ));
        }
        Ok(ImageRaster { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        ImageRaster::new(height, width, data)
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Fixed-weight luma conversion, row-major H×W.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Feature name plus the parameters it was computed with.
    pub provenance: String,
}

pub fn color_histogram(img: &ImageRaster, bins: usize) -> Result<FeatureVector> {
    if bins == 0 {
        return Err(MegError::Invalid("color histogram needs bins >= 1".into()));
    }
    let mut values = vec![0.0; 3 * bins];
    for p in img.data.chunks_exact(3) {
        for ch in 0..3 {
            let bin = ((p[ch] * bins as f64).floor() as usize).min(bins - 1);
            values[ch * bins + bin] += 1.0;
        }
    }
    Ok(FeatureVector { values, provenance: format!("colorhist(bins={bins})") })
}

/// Number of 0↔1 transitions around the circular 8-bit code.
fn circular_transitions(code: u8) -> u32 {
    (code ^ code.rotate_left(1)).count_ones()
}

/// Uniform local binary patterns over the direct 8-neighborhood.
///
/// A neighbor bit is set iff it is strictly brighter than the center, so a
/// constant image lands entirely in the all-zeros bin. Uniform codes (at most
/// two circular transitions) bin by popcount, everything else shares bin P+1.
pub fn lbp_histogram(img: &ImageRaster, p: usize, r: usize) -> Result<FeatureVector> {
    if p != 8 || r != 1 {
        return Err(MegError::Invalid(format!(
            "lbp supports P=8, R=1 only, got P={p}, R={r}"
        )));
    }
    if img.height < 2 * r + 1 || img.width < 2 * r + 1 {
        return Err(MegError::Invalid(format!(
            "image {}x{} too small for R={r} neighborhood",
            img.height, img.width
        )));
    }
    // counter-clockwise from East, (drow, dcol)
    const OFFSETS: [(i64, i64); 8] =
        [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];
    let gray = img.to_gray();
    let (h, w) = (img.height, img.width);
    let mut hist = vec![0.0; p + 2];
    for row in 1..h - 1 {
        for col in 1..w - 1 {
            let center = gray[row * w + col];
            let mut code = 0u8;
            for (k, (dr, dc)) in OFFSETS.iter().enumerate() {
                let neighbor =
                    gray[(row as i64 + dr) as usize * w + (col as i64 + dc) as usize];
                if neighbor > center {
                    code |= 1 << k;
                }
            }
            let bin = if circular_transitions(code) <= 2 {
                code.count_ones() as usize
            } else {
                p + 1
            };
            hist[bin] += 1.0;
        }
    }
    let total: f64 = hist.iter().sum();
    for v in hist.iter_mut() {
        *v /= total;
    }
    Ok(FeatureVector { values: hist, provenance: format!("lbp(P={p},R={r},uniform)") })
}

/// Reflect-pads a grayscale image on the bottom/right to multiples of `cell`.
fn pad_to_cells(gray: &[f64], h: usize, w: usize, cell: usize) -> (Vec<f64>, usize, usize) {
    let ph = h.div_ceil(cell) * cell;
    let pw = w.div_ceil(cell) * cell;
    if ph == h && pw == w {
        return (gray.to_vec(), h, w);
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut out = Vec::with_capacity(ph * pw);
    for r in 0..ph {
        let sr = reflect(r, h);
        for c in 0..pw {
            out.push(gray[sr * w + reflect(c, w)]);
        }
    }
    (out, ph, pw)
}

pub fn hog(
    img: &ImageRaster,
    orientations: usize,
    cell: usize,
    block: usize,
) -> Result<FeatureVector> {
    if orientations == 0 || cell == 0 || block == 0 {
        return Err(MegError::Invalid("hog parameters must be positive".into()));
    }
    if img.height < 8 || img.width < 8 {
        return Err(MegError::Invalid(format!(
            "hog needs H,W >= 8, got {}x{}",
            img.height, img.width
        )));
    }
    let (gray, h, w) = pad_to_cells(&img.to_gray(), img.height, img.width, cell);

    // central differences, zero at the borders
    let mut mag = vec![0.0; h * w];
    let mut bin_of = vec![0usize; h * w];
    let bin_width = 180.0 / orientations as f64;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let gr = gray[(r + 1) * w + c] - gray[(r - 1) * w + c];
            let gc = gray[r * w + c + 1] - gray[r * w + c - 1];
            let m = (gr * gr + gc * gc).sqrt();
            if m == 0.0 {
                continue;
            }
            let mut angle = gr.atan2(gc).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            if angle >= 180.0 {
                angle -= 180.0;
            }
            let idx = r * w + c;
            mag[idx] = m;
            bin_of[idx] = ((angle / bin_width) as usize).min(orientations - 1);
        }
    }

    let cells_y = h / cell;
    let cells_x = w / cell;
    let mut cell_hist = vec![0.0; cells_y * cells_x * orientations];
    for r in 0..h {
        for c in 0..w {
            let m = mag[r * w + c];
            if m == 0.0 {
                continue;
            }
            let cy = r / cell;
            let cx = c / cell;
            cell_hist[(cy * cells_x + cx) * orientations + bin_of[r * w + c]] += m;
        }
    }

    if cells_y < block || cells_x < block {
        return Err(MegError::Invalid(format!(
            "image of {cells_y}x{cells_x} cells cannot host {block}x{block} blocks"
        )));
    }
    let blocks_y = cells_y - block + 1;
    let blocks_x = cells_x - block + 1;
    let block_len = block * block * orientations;
    let mut values = Vec::with_capacity(blocks_y * blocks_x * block_len);
    let mut v = vec![0.0; block_len];
    const EPS: f64 = 1e-5;
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let mut k = 0;
            for cy in by..by + block {
                for cx in bx..bx + block {
                    let src = (cy * cells_x + cx) * orientations;
                    v[k..k + orientations]
                        .copy_from_slice(&cell_hist[src..src + orientations]);
                    k += orientations;
                }
            }
            // L2-hys: normalize, clip at 0.2, normalize again
            let norm = (v.iter().map(|x| x * x).sum::<f64>() + EPS * EPS).sqrt();
            for x in v.iter_mut() {
                *x = (*x / norm).min(0.2);
            }
            let norm = (v.iter().map(|x| x * x).sum::<f64>() + EPS * EPS).sqrt();
            for x in v.iter_mut() {
                *x /= norm;
            }
            values.extend_from_slice(&v);
        }
    }
    Ok(FeatureVector {
        values,
        provenance: format!("hog(orientations={orientations},cell={cell},block={block})"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FftMode {
    RealImag,
    LogPsdAngle,
}

impl std::str::FromStr for FftMode {
    type Err = MegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real_imag" => Ok(FftMode::RealImag),
            "logpsd_angle" => Ok(FftMode::LogPsdAngle),
            other => Err(MegError::Invalid(format!("unknown fft mode {other:?}"))),
        }
    }
}

/// Unnormalized 2-D DFT of the grayscale image; F = 2·H·W.
pub fn fft2d_features(img: &ImageRaster, mode: FftMode) -> Result<FeatureVector> {
    const EPS: f64 = 1e-12;
    let (h, w) = (img.height, img.width);
    let mut grid: Vec<Complex<f64>> = img
        .to_gray()
        .into_iter()
        .map(|v| Complex::new(v, 0.0))
        .collect();

    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for r in 0..h {
        row_fft.process(&mut grid[r * w..(r + 1) * w]);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            grid[r * w + c] = col[r];
        }
    }

    let mut values = Vec::with_capacity(2 * h * w);
    match mode {
        FftMode::RealImag => {
            values.extend(grid.iter().map(|z| z.re));
            values.extend(grid.iter().map(|z| z.im));
        }
        FftMode::LogPsdAngle => {
            values.extend(grid.iter().map(|z| (z.norm_sqr() + EPS).ln()));
            values.extend(grid.iter().map(|z| z.im.atan2(z.re)));
        }
    }
    let name = match mode {
        FftMode::RealImag => "fft2d(real_imag)",
        FftMode::LogPsdAngle => "fft2d(logpsd_angle)",
    };
    Ok(FeatureVector { values, provenance: name.to_string() })
}

/// Z-scores each feature across predictions, then applies the inverse
/// transform fitted on the bank's training split. Features with zero spread
/// across predictions pass through pinned at the train mean; their indices
/// come back in the flag list.
pub fn zscore_postprocess(predictions: &Mat, bank: &LatentBank) -> Result<(Mat, Vec<usize>)> {
    let stats = bank.train_stats().ok_or_else(|| {
        MegError::Invalid(format!("bank {:?} has no train statistics", bank.name))
    })?;
    if predictions.cols != bank.dim {
        return Err(MegError::Shape(format!(
            "predictions have {} features, bank {:?} has {}",
            predictions.cols, bank.name, bank.dim
        )));
    }
    if predictions.rows < 2 {
        return Err(MegError::Invalid(format!(
            "z-score postprocess needs >= 2 predictions, got {}",
            predictions.rows
        )));
    }
    let n = predictions.rows as f64;
    let mut out = predictions.clone();
    let mut degenerate = Vec::new();
    for f in 0..predictions.cols {
        let mut mean = 0.0;
        for i in 0..predictions.rows {
            mean += predictions.at(i, f);
        }
        mean /= n;
        let mut var = 0.0;
        for i in 0..predictions.rows {
            var += (predictions.at(i, f) - mean).powi(2);
        }
        let std = (var / n).sqrt();
        if std == 0.0 {
            degenerate.push(f);
            for i in 0..out.rows {
                *out.at_mut(i, f) = stats.mean[f];
            }
        } else {
            let gain = stats.std[f] / std;
            for i in 0..out.rows {
                *out.at_mut(i, f) = (predictions.at(i, f) - mean) * gain + stats.mean[f];
            }
        }
    }
    Ok((out, degenerate))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    ColorHist,
    Lbp,
    Hog,
    Fft,
}

impl std::str::FromStr for FeatureKind {
    type Err = MegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "colorhist" => Ok(FeatureKind::ColorHist),
            "lbp" => Ok(FeatureKind::Lbp),
            "hog" => Ok(FeatureKind::Hog),
            "fft" => Ok(FeatureKind::Fft),
            other => Err(MegError::Invalid(format!("unknown feature {other:?}"))),
        }
    }
}

/// Computes a feature with its default parameters.
pub fn extract_feature(img: &ImageRaster, kind: FeatureKind) -> Result<FeatureVector> {
    match kind {
        FeatureKind::ColorHist => color_histogram(img, 8),
        FeatureKind::Lbp => lbp_histogram(img, 8, 1),
        FeatureKind::Hog => hog(img, 8, 8, 2),
        FeatureKind::Fft => fft2d_features(img, FftMode::RealImag),
    }
}

fn skip_ppm_whitespace(bytes: &[u8], mut i: usize) -> usize {
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn read_ppm_int(bytes: &[u8], i: usize) -> Result<(usize, usize)> {
    let start = skip_ppm_whitespace(bytes, i);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(MegError::Format("expected integer in PPM header".into()));
    }
    let text = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| MegError::Format("non-ascii PPM header".into()))?;
    let value = text
        .parse()
        .map_err(|_| MegError::Format(format!("bad PPM integer {text:?}")))?;
    Ok((value, end))
}

/// Parses binary (P6) and plain (P3) PPM.
pub fn parse_ppm(bytes: &[u8]) -> Result<ImageRaster> {
    if bytes.len() < 2 {
        return Err(MegError::Format("PPM too short".into()));
    }
    let magic = &bytes[..2];
    if magic != b"P6" && magic != b"P3" {
        return Err(MegError::Format(format!(
            "unsupported PPM magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let (width, i) = read_ppm_int(bytes, 2)?;
    let (height, i) = read_ppm_int(bytes, i)?;
    let (maxval, i) = read_ppm_int(bytes, i)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65_535 {
        return Err(MegError::Format(format!(
            "bad PPM dimensions {width}x{height} maxval {maxval}"
        )));
    }
    let n = width * height * 3;
    let mut data = Vec::with_capacity(n);
    let scale = 1.0 / maxval as f64;
    if magic == b"P6" {
        // exactly one whitespace byte after maxval
        let mut pos = i + 1;
        let wide = maxval > 255;
        for _ in 0..n {
            let v = if wide {
                if pos + 1 >= bytes.len() {
                    return Err(MegError::Format("PPM payload truncated".into()));
                }
                let v = u16::from_be_bytes([bytes[pos], bytes[pos + 1]]) as f64;
                pos += 2;
                v
            } else {
                if pos >= bytes.len() {
                    return Err(MegError::Format("PPM payload truncated".into()));
                }
                let v = bytes[pos] as f64;
                pos += 1;
                v
            };
            data.push(v * scale);
        }
    } else {
        let mut pos = i;
        for _ in 0..n {
            let (v, next) = read_ppm_int(bytes, pos)?;
            if v > maxval {
                return Err(MegError::Format(format!(
                    "PPM sample {v} exceeds maxval {maxval}"
                )));
            }
            data.push(v as f64 * scale);
            pos = next;
        }
    }
    ImageRaster::new(height, width, data)
}

pub fn write_ppm(path: &Path, img: &ImageRaster) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(
        img.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads a PPM or PNG by extension.
pub fn load_image(path: &Path) -> Result<ImageRaster> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" => parse_ppm(&std::fs::read(path)?),
        "png" => {
            let img = image::open(path)
                .map_err(|e| MegError::Format(format!("{}: {e}", path.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img.pixels().flat_map(|p| p.0).map(|v| v as f64 / 255.0).collect();
            ImageRaster::new(h, w, data)
        }
        other => Err(MegError::Invalid(format!(
            "unsupported image extension {other:?} for {}",
            path.display()
        ))),
    }
}

/// Builds a latent bank by extracting one feature per image.
pub fn feature_bank(
    images: &[(String, ImageRaster)],
    kind: FeatureKind,
    name: &str,
) -> Result<LatentBank> {
    let mut ids = Vec::with_capacity(images.len());
    let mut data = Vec::new();
    let mut dim = 0;
    for (id, img) in images {
        let fv = extract_feature(img, kind)?;
        if dim == 0 {
            dim = fv.values.len();
        } else if fv.values.len() != dim {
            return Err(MegError::Shape(format!(
                "feature length {} for image {id:?}, expected {dim}",
                fv.values.len()
            )));
        }
        ids.push(id.clone());
        data.extend(fv.values);
    }
    LatentBank::new(name, ids, dim, data)
}
