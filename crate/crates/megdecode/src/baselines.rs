//! Ridge regression from flattened sensor windows to image latents. This is
//! the linear reference point every learned decoder has to beat.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MegError, Result};
use crate::linalg::Mat;

/// Features with sample standard deviation below this are treated as constant
/// and passed through unscaled.
const STD_FLOOR: f64 = 1e-12;

pub const DEFAULT_ALPHA_GRID: [f64; 7] =
    [1e0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeModel {
    pub alpha: f64,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    /// D×F weights applied to standardized inputs.
    pub weights: Mat,
    /// Per-target intercept; equals the training target means.
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub alphas: Vec<f64>,
    /// Pooled validation MSE per alpha, same order as `alphas`.
    pub mse: Vec<f64>,
    pub best_alpha: f64,
    pub n_folds: usize,
}

fn check_xy(x: &Mat, y: &Mat) -> Result<()> {
    if x.rows == 0 || x.cols == 0 || y.cols == 0 {
        return Err(MegError::Shape("ridge fit on empty data".into()));
    }
    if x.rows != y.rows {
        return Err(MegError::Shape(format!(
            "ridge fit with {} input rows but {} target rows",
            x.rows, y.rows
        )));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(MegError::NonFinite("ridge fit input".into()));
    }
    Ok(())
}

fn column_means(m: &Mat) -> Vec<f64> {
    let mut means = vec![0.0; m.cols];
    for i in 0..m.rows {
        for (slot, &v) in means.iter_mut().zip(m.row(i)) {
            *slot += v;
        }
    }
    for v in &mut means {
        *v /= m.rows as f64;
    }
    means
}

fn column_stats(m: &Mat) -> (Vec<f64>, Vec<f64>) {
    let means = column_means(m);
    let mut vars = vec![0.0; m.cols];
    for i in 0..m.rows {
        for ((slot, &v), &mu) in vars.iter_mut().zip(m.row(i)).zip(&means) {
            *slot += (v - mu) * (v - mu);
        }
    }
    let stds = vars
        .iter()
        .map(|&v| {
            let s = (v / m.rows as f64).sqrt();
            if s < STD_FLOOR { 1.0 } else { s }
        })
        .collect();
    (means, stds)
}

fn standardize(x: &Mat, mean: &[f64], std: &[f64]) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        for ((slot, &v), (&mu, &sd)) in
            out.row_mut(i).iter_mut().zip(x.row(i)).zip(mean.iter().zip(std))
        {
            *slot = (v - mu) / sd;
        }
    }
    out
}

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m.rows, m.cols, m.data.iter().copied())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Mat {
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            *out.at_mut(i, j) = m[(i, j)];
        }
    }
    out
}

/// Shared factorization: solving for a new alpha is a cheap rescale, so a CV
/// sweep over the grid costs one eigendecomposition per fold.
struct RidgeFactors {
    /// Eigenvectors of XᵀX (primal, D×D) or XXᵀ (dual, N×N).
    q: DMatrix<f64>,
    /// Eigenvalues clamped at zero; tiny negatives are roundoff.
    lambda: Vec<f64>,
    /// Qᵀ XᵀY (primal) or Qᵀ Y (dual).
    rhs: DMatrix<f64>,
    /// Xᵀ kept for the dual back-projection, empty in the primal route.
    xt: Option<DMatrix<f64>>,
}

impl RidgeFactors {
    fn new(x_s: &DMatrix<f64>, y_c: &DMatrix<f64>) -> Self {
        let (n, d) = (x_s.nrows(), x_s.ncols());
        let xt = x_s.transpose();
        if d <= n {
            let gram = &xt * x_s;
            let eig = SymmetricEigen::new(gram);
            let rhs = eig.eigenvectors.transpose() * (&xt * y_c);
            RidgeFactors {
                q: eig.eigenvectors,
                lambda: eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect(),
                rhs,
                xt: None,
            }
        } else {
            let gram = x_s * &xt;
            let eig = SymmetricEigen::new(gram);
            let rhs = eig.eigenvectors.transpose() * y_c;
            RidgeFactors {
                q: eig.eigenvectors,
                lambda: eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect(),
                rhs,
                xt: Some(xt),
            }
        }
    }

    /// W(α) = Q (Λ+αI)⁻¹ QᵀXᵀY, or Xᵀ Q (Λ+αI)⁻¹ QᵀY in the dual.
    fn solve(&self, alpha: f64) -> DMatrix<f64> {
        let mut scaled = self.rhs.clone();
        for (k, &l) in self.lambda.iter().enumerate() {
            let inv = 1.0 / (l + alpha);
            for j in 0..scaled.ncols() {
                scaled[(k, j)] *= inv;
            }
        }
        let back = &self.q * scaled;
        match &self.xt {
            Some(xt) => xt * back,
            None => back,
        }
    }
}

/// Solves (X_sᵀX_s + αI) W = X_sᵀ Y_c for already standardized inputs and
/// centered targets. Routes through the N×N dual when features outnumber rows.
pub fn solve_standardized(x_s: &Mat, y_c: &Mat, alpha: f64) -> Result<Mat> {
    check_xy(x_s, y_c)?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(MegError::Invalid(format!("ridge alpha must be positive, got {alpha}")));
    }
    let factors = RidgeFactors::new(&to_dmatrix(x_s), &to_dmatrix(y_c));
    Ok(from_dmatrix(&factors.solve(alpha)))
}

pub fn fit(x: &Mat, y: &Mat, alpha: f64) -> Result<RidgeModel> {
    check_xy(x, y)?;
    let (x_mean, x_std) = column_stats(x);
    let bias = column_means(y);
    let x_s = standardize(x, &x_mean, &x_std);
    let mut y_c = y.clone();
    for i in 0..y_c.rows {
        for (v, &b) in y_c.row_mut(i).iter_mut().zip(&bias) {
            *v -= b;
        }
    }
    let weights = solve_standardized(&x_s, &y_c, alpha)?;
    Ok(RidgeModel { alpha, x_mean, x_std, weights, bias })
}

impl RidgeModel {
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        if x.cols != self.weights.rows {
            return Err(MegError::Shape(format!(
                "ridge predict with {} features, model has {}",
                x.cols, self.weights.rows
            )));
        }
        if !x.is_finite() {
            return Err(MegError::NonFinite("ridge predict input".into()));
        }
        let x_s = standardize(x, &self.x_mean, &self.x_std);
        let mut out = x_s.matmul(&self.weights)?;
        for i in 0..out.rows {
            for (v, &b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }
}

/// K-fold cross-validation over the alpha grid, then a refit on all data at
/// the winner. Ties go to the smaller alpha. Fold assignment is a seeded
/// shuffle cut into contiguous chunks.
pub fn fit_cv(
    x: &Mat,
    y: &Mat,
    alphas: &[f64],
    n_folds: usize,
    seed: u64,
) -> Result<(RidgeModel, CvReport)> {
    check_xy(x, y)?;
    if alphas.is_empty() {
        return Err(MegError::Invalid("empty alpha grid".into()));
    }
    for &a in alphas {
        if !(a.is_finite() && a > 0.0) {
            return Err(MegError::Invalid(format!("ridge alpha must be positive, got {a}")));
        }
    }
    if n_folds < 2 || n_folds > x.rows {
        return Err(MegError::Invalid(format!(
            "{n_folds} folds for {} rows",
            x.rows
        )));
    }

    let mut order: Vec<usize> = (0..x.rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0usize; x.rows];
    for (pos, &row) in order.iter().enumerate() {
        fold_of[row] = pos * n_folds / x.rows;
    }

    let mut sq_err = vec![0.0; alphas.len()];
    let mut n_terms = 0usize;
    for fold in 0..n_folds {
        let train_rows: Vec<usize> =
            (0..x.rows).filter(|&i| fold_of[i] != fold).collect();
        let val_rows: Vec<usize> = (0..x.rows).filter(|&i| fold_of[i] == fold).collect();
        let gather = |m: &Mat, rows: &[usize]| -> Mat {
            let mut out = Mat::zeros(rows.len(), m.cols);
            for (k, &i) in rows.iter().enumerate() {
                out.row_mut(k).copy_from_slice(m.row(i));
            }
            out
        };
        let xt = gather(x, &train_rows);
        let yt = gather(y, &train_rows);
        let xv = gather(x, &val_rows);
        let yv = gather(y, &val_rows);

        let (mu, sd) = column_stats(&xt);
        let bias = column_means(&yt);
        let mut yt_c = yt;
        for i in 0..yt_c.rows {
            for (v, &b) in yt_c.row_mut(i).iter_mut().zip(&bias) {
                *v -= b;
            }
        }
        let factors =
            RidgeFactors::new(&to_dmatrix(&standardize(&xt, &mu, &sd)), &to_dmatrix(&yt_c));
        let xv_s = to_dmatrix(&standardize(&xv, &mu, &sd));
        n_terms += xv.rows * y.cols;
        for (ai, &alpha) in alphas.iter().enumerate() {
            let pred = &xv_s * factors.solve(alpha);
            for i in 0..xv.rows {
                for j in 0..y.cols {
                    let diff = pred[(i, j)] + bias[j] - yv.at(i, j);
                    sq_err[ai] += diff * diff;
                }
            }
        }
    }

    let mse: Vec<f64> = sq_err.iter().map(|&s| s / n_terms as f64).collect();
    let mut best = 0;
    for (i, &m) in mse.iter().enumerate() {
        if m < mse[best] {
            best = i;
        }
    }
    let report = CvReport {
        alphas: alphas.to_vec(),
        mse,
        best_alpha: alphas[best],
        n_folds,
    };
    let model = fit(x, y, report.best_alpha)?;
    Ok((model, report))
}

/// Flattens the sample window `[first, first+len)` of a C×T epoch into the
/// channel-major feature layout ridge trains on.
pub fn epoch_features(epoch: &[f64], c: usize, t: usize, first: usize, len: usize) -> Result<Vec<f64>> {
    if epoch.len() != c * t {
        return Err(MegError::Shape(format!(
            "epoch of {} values is not {c}x{t}",
            epoch.len()
        )));
    }
    if first + len > t || len == 0 {
        return Err(MegError::Invalid(format!(
            "window [{first}, {first}+{len}) outside {t} samples"
        )));
    }
    let mut out = Vec::with_capacity(c * len);
    for ch in 0..c {
        out.extend_from_slice(&epoch[ch * t + first..ch * t + first + len]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn near_zero_alpha_recovers_a_linear_map() {
        let x = random_mat(40, 5, 1);
        let w_true = random_mat(5, 3, 2);
        let y = x.matmul(&w_true).unwrap();
        let model = fit(&x, &y, 1e-8).unwrap();
        let pred = model.predict(&x).unwrap();
        for (a, b) in pred.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn huge_alpha_predicts_target_means() {
        let x = random_mat(30, 4, 3);
        let y = random_mat(30, 2, 4);
        let means = column_means(&y);
        let model = fit(&x, &y, 1e12).unwrap();
        let pred = model.predict(&random_mat(7, 4, 5)).unwrap();
        for i in 0..pred.rows {
            for j in 0..pred.cols {
                assert!((pred.at(i, j) - means[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matches_closed_form_two_feature_solution() {
        // tiny standardized system solved with the explicit 2x2 inverse
        let x_s = Mat::from_vec(3, 2, vec![1.0, 0.5, -1.0, 0.25, 0.0, -0.75]).unwrap();
        let y_c = Mat::from_vec(3, 1, vec![0.9, -1.1, 0.2]).unwrap();
        let alpha = 0.5;
        let xtx = [
            dot(&[1.0, -1.0, 0.0], &[1.0, -1.0, 0.0]) + alpha,
            dot(&[1.0, -1.0, 0.0], &[0.5, 0.25, -0.75]),
            dot(&[1.0, -1.0, 0.0], &[0.5, 0.25, -0.75]),
            dot(&[0.5, 0.25, -0.75], &[0.5, 0.25, -0.75]) + alpha,
        ];
        let xty = [
            dot(&[1.0, -1.0, 0.0], &[0.9, -1.1, 0.2]),
            dot(&[0.5, 0.25, -0.75], &[0.9, -1.1, 0.2]),
        ];
        let det = xtx[0] * xtx[3] - xtx[1] * xtx[2];
        let expect = [
            (xtx[3] * xty[0] - xtx[1] * xty[1]) / det,
            (xtx[0] * xty[1] - xtx[2] * xty[0]) / det,
        ];
        let w = solve_standardized(&x_s, &y_c, alpha).unwrap();
        assert!((w.at(0, 0) - expect[0]).abs() < 1e-12);
        assert!((w.at(1, 0) - expect[1]).abs() < 1e-12);
        fn dot(a: &[f64], b: &[f64]) -> f64 {
            a.iter().zip(b).map(|(x, y)| x * y).sum()
        }
    }

    #[test]
    fn dual_route_matches_primal_formula() {
        // N < D exercises the Gram-side factorization
        let x_s = random_mat(6, 9, 7);
        let y_c = random_mat(6, 2, 8);
        let alpha = 2.0;
        let w = solve_standardized(&x_s, &y_c, alpha).unwrap();
        let xd = to_dmatrix(&x_s);
        let primal = (xd.transpose() * &xd + DMatrix::identity(9, 9) * alpha)
            .try_inverse()
            .unwrap()
            * (xd.transpose() * to_dmatrix(&y_c));
        for i in 0..9 {
            for j in 0..2 {
                assert!((w.at(i, j) - primal[(i, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shifting_targets_shifts_predictions() {
        let x = random_mat(25, 6, 9);
        let y = random_mat(25, 3, 10);
        let mut y_shift = y.clone();
        for i in 0..y_shift.rows {
            for (j, v) in y_shift.row_mut(i).iter_mut().enumerate() {
                *v += [5.0, -2.0, 0.25][j];
            }
        }
        let xq = random_mat(4, 6, 11);
        let base = fit(&x, &y, 3.0).unwrap().predict(&xq).unwrap();
        let shifted = fit(&x, &y_shift, 3.0).unwrap().predict(&xq).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert!((shifted.at(i, j) - base.at(i, j) - [5.0, -2.0, 0.25][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cv_state_best_alpha_attains_min_mse() {
        let x = random_mat(60, 8, 12);
        let w_true = random_mat(8, 2, 13);
        let mut y = x.matmul(&w_true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for v in &mut y.data {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
        let (model, report) = fit_cv(&x, &y, &DEFAULT_ALPHA_GRID, 5, 0).unwrap();
        let min = report.mse.iter().cloned().fold(f64::INFINITY, f64::min);
        let first_min = report
            .alphas
            .iter()
            .zip(&report.mse)
            .find(|(_, &m)| m == min)
            .map(|(&a, _)| a)
            .unwrap();
        assert_eq!(model.alpha, report.best_alpha);
        assert_eq!(report.best_alpha, first_min);
        assert_eq!(report.mse.len(), DEFAULT_ALPHA_GRID.len());
        // clean linear data wants light regularization
        assert!(report.best_alpha <= 1e2, "chose {}", report.best_alpha);
    }

    #[test]
    fn cv_is_deterministic() {
        let x = random_mat(40, 5, 15);
        let y = random_mat(40, 3, 16);
        let (a, ra) = fit_cv(&x, &y, &[0.5, 5.0, 50.0], 4, 77).unwrap();
        let (b, rb) = fit_cv(&x, &y, &[0.5, 5.0, 50.0], 4, 77).unwrap();
        assert_eq!(a.weights.data, b.weights.data);
        assert_eq!(ra.mse, rb.mse);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let x = random_mat(10, 3, 17);
        let y = random_mat(9, 2, 18);
        assert!(fit(&x, &y, 1.0).is_err());
        let y = random_mat(10, 2, 18);
        assert!(fit(&x, &y, 0.0).is_err());
        assert!(fit(&x, &y, f64::NAN).is_err());
        assert!(fit_cv(&x, &y, &[], 3, 0).is_err());
        assert!(fit_cv(&x, &y, &[1.0], 1, 0).is_err());
        assert!(fit_cv(&x, &y, &[1.0], 11, 0).is_err());
        let model = fit(&x, &y, 1.0).unwrap();
        assert!(model.predict(&random_mat(5, 4, 19)).is_err());
    }

    #[test]
    fn constant_feature_does_not_blow_up() {
        let mut x = random_mat(20, 3, 20);
        for i in 0..20 {
            x.row_mut(i)[1] = 4.2;
        }
        let y = random_mat(20, 2, 21);
        let model = fit(&x, &y, 1.0).unwrap();
        assert!(model.weights.is_finite());
        assert!((model.weights.at(1, 0)).abs() < 1e-9, "constant feature got weight");
    }

    #[test]
    fn epoch_features_slice_channel_major() {
        // 2 channels x 4 samples, window [1, 3)
        let epoch = [0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0];
        let f = epoch_features(&epoch, 2, 4, 1, 2).unwrap();
        assert_eq!(f, vec![1.0, 2.0, 11.0, 12.0]);
        assert!(epoch_features(&epoch, 2, 4, 3, 2).is_err());
        assert!(epoch_features(&epoch, 2, 3, 0, 2).is_err());
    }
}
