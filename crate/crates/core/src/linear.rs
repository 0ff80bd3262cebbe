//! Global linear models over pooled lag rows: ordinary least squares via
//! accumulated per-series normal equations (the design matrix is never
//! materialized), and Lasso via cyclic coordinate descent with
//! cross-validated penalty selection.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::features::{window, LagMatrix, PointModel};
use crate::series::SalesSeries;

/// Running X′X and X′y over an intercept-augmented design. Accumulators
/// merge associatively, so per-series pieces can be built independently and
/// combined in any order.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalAccumulator {
    /// Number of features, excluding the intercept.
    p: usize,
    /// Upper triangle of the (p+1)×(p+1) matrix, row-major full storage.
    xtx: Vec<f64>,
    xty: Vec<f64>,
    n_rows: u64,
}

impl NormalAccumulator {
    pub fn new(p: usize) -> NormalAccumulator {
        let d = p + 1;
        NormalAccumulator { p, xtx: vec![0.0; d * d], xty: vec![0.0; d], n_rows: 0 }
    }

    pub fn n_rows(&self) -> u64 {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    /// Add one row (intercept is implicit). Only the upper triangle is
    /// touched; zero features are skipped, which matters on sparse lag rows.
    pub fn add_row(&mut self, features: &[f64], target: f64) -> Result<()> {
        if features.len() != self.p {
            return Err(Error::Data(format!(
                "row has {} features, accumulator expects {}",
                features.len(),
                self.p
            )));
        }
        let d = self.p + 1;
        self.xtx[0] += 1.0;
        for (j, &v) in features.iter().enumerate() {
            self.xtx[j + 1] += v;
        }
        for (i, &xi) in features.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = (i + 1) * d;
            for (j, &xj) in features.iter().enumerate().skip(i) {
                self.xtx[row + j + 1] += xi * xj;
            }
        }
        self.xty[0] += target;
        for (j, &v) in features.iter().enumerate() {
            self.xty[j + 1] += v * target;
        }
        self.n_rows += 1;
        Ok(())
    }

    /// Stream one series' lag windows straight into the accumulator without
    /// building a matrix.
    pub fn add_series(
        &mut self,
        series: &SalesSeries,
        train_end: usize,
        pad: crate::features::PadPolicy,
    ) -> Result<()> {
        let values: Vec<f64> = series.values[..=train_end].iter().map(|&v| v as f64).collect();
        let t_start = match pad {
            crate::features::PadPolicy::ZeroPad => 0,
            crate::features::PadPolicy::Drop => self.p,
        };
        let mut buf = vec![0.0; self.p];
        for t in t_start..=train_end {
            window(&values, t, &mut buf);
            self.add_row(&buf, values[t])?;
        }
        Ok(())
    }

    pub fn add_matrix(&mut self, matrix: &LagMatrix) -> Result<()> {
        for row in 0..matrix.n_rows() {
            self.add_row(matrix.feature_row(row), matrix.targets[row])?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &NormalAccumulator) -> Result<()> {
        if other.p != self.p {
            return Err(Error::Data(format!(
                "cannot merge accumulators of widths {} and {}",
                other.p, self.p
            )));
        }
        for (a, b) in self.xtx.iter_mut().zip(&other.xtx) {
            *a += b;
        }
        for (a, b) in self.xty.iter_mut().zip(&other.xty) {
            *a += b;
        }
        self.n_rows += other.n_rows;
        Ok(())
    }

    /// Full symmetric X′X, mirroring the stored upper triangle.
    fn full_xtx(&self) -> DMatrix<f64> {
        let d = self.p + 1;
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = self.xtx[i * d + j];
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}

/// Linear coefficients; entry 0 is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub beta: Vec<f64>,
}

impl PointModel for LinearModel {
    fn predict_row(&self, features: &[f64]) -> f64 {
        let mut y = self.beta[0];
        for (b, x) in self.beta[1..].iter().zip(features) {
            y += b * x;
        }
        y
    }
}

/// Solve (X′X + eps·I)β = X′y with a symmetric positive-definite solve.
///
/// `ridge_eps = None` applies the default jitter 1e−8·trace/(p+1); the
/// intercept diagonal is never penalized. If the factorization fails the
/// jitter escalates a few decades before giving up.
pub fn solve_ols(acc: &NormalAccumulator, ridge_eps: Option<f64>) -> Result<LinearModel> {
    if acc.n_rows == 0 {
        return Err(Error::Data("cannot solve normal equations with no rows".into()));
    }
    let d = acc.p + 1;
    let base = acc.full_xtx();
    let rhs = DVector::from_column_slice(&acc.xty);
    let trace: f64 = (0..d).map(|i| base[(i, i)]).sum();
    let default_eps = 1e-8 * trace / d as f64;
    let mut eps = ridge_eps.unwrap_or(default_eps);

    for _attempt in 0..7 {
        let mut m = base.clone();
        for i in 1..d {
            m[(i, i)] += eps;
        }
        if let Some(chol) = m.cholesky() {
            let mut beta = chol.solve(&rhs);
            // two rounds of iterative refinement against the unjittered
            // system cancel the bias the jitter introduced
            for _ in 0..2 {
                let residual = &rhs - &base * &beta;
                beta += chol.solve(&residual);
            }
            if beta.iter().all(|b| b.is_finite()) {
                return Ok(LinearModel { beta: beta.as_slice().to_vec() });
            }
        }
        eps = if eps > 0.0 { eps * 100.0 } else { default_eps.max(f64::MIN_POSITIVE) };
    }
    Err(Error::Numeric("singular normal equations".into()))
}

/// Write coefficients one per line, intercept first.
pub fn save_linear(model: &LinearModel, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for b in &model.beta {
        writeln!(w, "{b:.17e}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_linear(path: &Path) -> Result<LinearModel> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut beta = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        beta.push(line.trim().parse::<f64>().map_err(|_| {
            Error::Data(format!("{}: line {}: invalid coefficient `{line}`", path.display(), i + 1))
        })?);
    }
    if beta.is_empty() {
        return Err(Error::Data(format!("{}: no coefficients", path.display())));
    }
    Ok(LinearModel { beta })
}

/// Standardized column view used by coordinate descent.
struct Standardized {
    cols: Vec<f64>, // column-major n × p
    mean: Vec<f64>,
    sd: Vec<f64>,
    y_mean: f64,
    n: usize,
    p: usize,
}

fn standardize(matrix: &LagMatrix, rows: &[usize]) -> Standardized {
    let n = rows.len();
    let p = matrix.n_lags;
    let mut mean = vec![0.0; p];
    let mut sd = vec![0.0; p];
    for &r in rows {
        for (j, &v) in matrix.feature_row(r).iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for &r in rows {
        for (j, &v) in matrix.feature_row(r).iter().enumerate() {
            sd[j] += (v - mean[j]) * (v - mean[j]);
        }
    }
    for s in &mut sd {
        *s = (*s / n as f64).sqrt();
    }
    let mut cols = vec![0.0; n * p];
    for (i, &r) in rows.iter().enumerate() {
        for (j, &v) in matrix.feature_row(r).iter().enumerate() {
            if sd[j] > 0.0 {
                cols[j * n + i] = (v - mean[j]) / sd[j];
            }
        }
    }
    let y_mean = rows.iter().map(|&r| matrix.targets[r]).sum::<f64>() / n as f64;
    Standardized { cols, mean, sd, y_mean, n, p }
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Cyclic coordinate descent along a descending λ path with warm starts.
/// Returns standardized-scale coefficients per λ.
fn cd_path(std: &Standardized, y: &[f64], lambdas: &[f64], tol: f64) -> Vec<Vec<f64>> {
    let n = std.n;
    let mut beta = vec![0.0; std.p];
    // residual of the centered target against the standardized design
    let mut resid: Vec<f64> = y.iter().map(|v| v - std.y_mean).collect();
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        for _pass in 0..1000 {
            let mut max_delta = 0.0f64;
            for j in 0..std.p {
                let col = &std.cols[j * n..(j + 1) * n];
                let mut rho = 0.0;
                for (c, r) in col.iter().zip(resid.iter()) {
                    rho += c * r;
                }
                rho = rho / n as f64 + beta[j];
                let new = soft_threshold(rho, lambda);
                let delta = new - beta[j];
                if delta != 0.0 {
                    for (c, r) in col.iter().zip(resid.iter_mut()) {
                        *r -= c * delta;
                    }
                    beta[j] = new;
                    max_delta = max_delta.max(delta.abs());
                }
            }
            if max_delta < tol {
                break;
            }
        }
        out.push(beta.clone());
    }
    out
}

/// Map standardized coefficients back to the original feature scale.
fn unstandardize(std: &Standardized, beta_std: &[f64]) -> LinearModel {
    let mut beta = vec![0.0; std.p + 1];
    beta[0] = std.y_mean;
    for j in 0..std.p {
        if std.sd[j] > 0.0 {
            beta[j + 1] = beta_std[j] / std.sd[j];
            beta[0] -= beta_std[j] * std.mean[j] / std.sd[j];
        }
    }
    LinearModel { beta }
}

/// Lasso with λ chosen by `cv_folds`-fold cross-validation (minimum mean
/// squared error). The default grid has 100 log-spaced values from λ_max,
/// the smallest penalty zeroing every coefficient, down to 1e−4·λ_max.
pub fn fit_lasso(
    matrix: &LagMatrix,
    lambda_grid: Option<&[f64]>,
    cv_folds: usize,
    seed: u64,
) -> Result<LinearModel> {
    let n = matrix.n_rows();
    if cv_folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    if n < cv_folds {
        return Err(Error::Data(format!("{n} rows cannot fill {cv_folds} folds")));
    }
    if matrix.features.iter().chain(matrix.targets.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite values in the training matrix".into()));
    }

    let all_rows: Vec<usize> = (0..n).collect();
    let full = standardize(matrix, &all_rows);
    let y_full: Vec<f64> = matrix.targets.clone();

    let lambdas: Vec<f64> = match lambda_grid {
        Some(grid) => {
            let mut g = grid.to_vec();
            g.sort_by(|a, b| b.partial_cmp(a).unwrap());
            g
        }
        None => {
            let mut lambda_max = 0.0f64;
            for j in 0..full.p {
                let col = &full.cols[j * full.n..(j + 1) * full.n];
                let dot: f64 = col
                    .iter()
                    .zip(&y_full)
                    .map(|(c, y)| c * (y - full.y_mean))
                    .sum();
                lambda_max = lambda_max.max((dot / full.n as f64).abs());
            }
            if lambda_max == 0.0 {
                lambda_max = 1.0;
            }
            let k = 100;
            (0..k)
                .map(|i| {
                    let frac = i as f64 / (k - 1) as f64;
                    lambda_max * (1e-4f64).powf(frac)
                })
                .collect()
        }
    };

    let y_sd = {
        let m = y_full.iter().sum::<f64>() / n as f64;
        (y_full.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / n as f64).sqrt()
    };
    let tol = 1e-7 * y_sd.max(1.0);

    // fold assignment by a seeded shuffle
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut cv_err = vec![0.0f64; lambdas.len()];
    for fold in 0..cv_folds {
        let held: Vec<usize> =
            order.iter().copied().skip(fold).step_by(cv_folds).collect();
        let train: Vec<usize> = order
            .iter()
            .copied()
            .enumerate()
            .filter(|(i, _)| i % cv_folds != fold)
            .map(|(_, r)| r)
            .collect();
        let std_train = standardize(matrix, &train);
        let y_train: Vec<f64> = train.iter().map(|&r| matrix.targets[r]).collect();
        let path = cd_path(&std_train, &y_train, &lambdas, tol);
        for (li, beta_std) in path.iter().enumerate() {
            let model = unstandardize(&std_train, beta_std);
            let mut sse = 0.0;
            for &r in &held {
                let err = model.predict_row(matrix.feature_row(r)) - matrix.targets[r];
                sse += err * err;
            }
            cv_err[li] += sse / held.len() as f64;
        }
    }

    let best = cv_err
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let path = cd_path(&full, &y_full, &lambdas[..=best], tol);
    Ok(unstandardize(&full, path.last().unwrap()))
}
