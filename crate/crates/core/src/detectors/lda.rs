//! Two-class linear discriminant with pooled, shrunk covariance.

use crate::error::DetectorError;

/// In-place Cholesky factorization of a row-major `d x d` matrix. Returns
/// `false` when the matrix is not numerically positive definite.
fn cholesky(a: &mut [f64], d: usize) -> bool {
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if !(diag > 1e-12) {
            return false;
        }
        let diag = diag.sqrt();
        a[j * d + j] = diag;
        for i in j + 1..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = v / diag;
        }
    }
    true
}

fn cholesky_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            y[i] -= l[i * d + k] * y[k];
        }
        y[i] /= l[i * d + i];
    }
    for i in (0..d).rev() {
        for k in i + 1..d {
            y[i] -= l[k * d + i] * y[k];
        }
        y[i] /= l[i * d + i];
    }
    y
}

/// Fits `w, b` such that `w . z + b > 0` means adversarial. `rows` are
/// standardized; `weights` are per-row class weights.
pub(crate) fn fit(
    rows: &[Vec<f64>],
    labels: &[bool],
    weights: &[f64],
    shrinkage: f64,
) -> Result<(Vec<f64>, f64), DetectorError> {
    let d = rows[0].len();
    let mut mean = [vec![0.0; d], vec![0.0; d]];
    let mut count = [0usize; 2];
    let mut mass = [0.0; 2];
    for ((r, &y), &w) in rows.iter().zip(labels).zip(weights) {
        let c = usize::from(y);
        count[c] += 1;
        mass[c] += w;
        for (m, v) in mean[c].iter_mut().zip(r) {
            *m += v;
        }
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(DetectorError::ClassMissing);
    }
    for c in 0..2 {
        mean[c].iter_mut().for_each(|m| *m /= count[c] as f64);
    }

    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for (r, &y) in rows.iter().zip(labels) {
        let mu = &mean[usize::from(y)];
        for k in 0..d {
            centered[k] = r[k] - mu[k];
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in 0..=i {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    let dof = (rows.len().saturating_sub(2)).max(1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / dof;
            let v = if i == j { v } else { (1.0 - shrinkage) * v };
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let diff: Vec<f64> = (0..d).map(|k| mean[1][k] - mean[0][k]).collect();
    let mean_diag = (0..d).map(|i| cov[i * d + i]).sum::<f64>() / d as f64;
    let floor = 1e-6 * mean_diag.max(1.0);
    let mut factored = None;
    for extra in [0.0, floor] {
        let mut a = cov.clone();
        for i in 0..d {
            a[i * d + i] += extra;
        }
        if cholesky(&mut a, d) {
            factored = Some(a);
            break;
        }
    }
    let l = factored.ok_or(DetectorError::SingularCovariance)?;
    let w = cholesky_solve(&l, d, &diff);
    let midpoint: f64 = (0..d).map(|k| w[k] * (mean[0][k] + mean[1][k]) / 2.0).sum();
    let log_prior = (mass[1] / mass[0]).ln();
    Ok((w, log_prior - midpoint))
}
