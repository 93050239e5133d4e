//! Two-dimensional principal-component projection for geometry exports.
//!
//! The scatter matrix is diagonalized with cyclic Jacobi rotations. At the
//! sizes used here (d up to a few dozen) that is exact to roundoff and keeps
//! the projection dependency-free and deterministic.

use crate::diffcore::DenseMatrix;
use crate::error::{Error, Result};

/// Projects mean-centered points onto their top two principal axes.
///
/// Sign convention: each component's largest-magnitude entry is made
/// positive, so repeated runs and mirrored inputs agree on orientation.
pub fn project_2d(points: &DenseMatrix) -> Result<DenseMatrix> {
    if points.rows < 2 {
        return Err(Error::DimensionMismatch(format!(
            "projection needs at least 2 points, got {}",
            points.rows
        )));
    }
    if points.cols < 2 {
        return Err(Error::DimensionMismatch(format!(
            "projection needs at least 2 coordinates, got {}",
            points.cols
        )));
    }
    points.ensure_finite("projection input")?;
    let (n, d) = (points.rows, points.cols);
    let mut centered = points.clone();
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| points.get(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            let v = centered.get(i, j) - mean;
            centered.set(i, j, v);
        }
    }
    let scatter = centered.transpose().matmul(&centered)?;
    let (eigvals, eigvecs) = jacobi_eigen(&scatter);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b)));
    let trace: f64 = eigvals.iter().sum();
    if !(eigvals[order[0]] > trace.abs() * 1e-15) {
        return Err(Error::RankDeficient(
            "points have no variance to project".into(),
        ));
    }

    let mut axes = DenseMatrix::zeros(d, 2);
    for (c, &e) in order.iter().take(2).enumerate() {
        let mut col: Vec<f64> = (0..d).map(|r| eigvecs.get(r, e)).collect();
        let mut lead = 0usize;
        for (r, v) in col.iter().enumerate() {
            if v.abs() > col[lead].abs() {
                lead = r;
            }
        }
        if col[lead] < 0.0 {
            for v in col.iter_mut() {
                *v = -*v;
            }
        }
        for r in 0..d {
            axes.set(r, c, col[r]);
        }
    }
    centered.matmul(&axes)
}

/// Eigenvalues and eigenvector columns of a symmetric matrix.
fn jacobi_eigen(s: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let d = s.rows;
    let mut a = s.clone();
    let mut v = DenseMatrix::zeros(d, d);
    for i in 0..d {
        v.set(i, i, 1.0);
    }
    let scale = a.frobenius_sq().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..128 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..d.saturating_sub(1) {
            for q in (p + 1)..d {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for i in 0..d {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - sn * aiq);
                    a.set(i, q, sn * aip + c * aiq);
                }
                for j in 0..d {
                    let apj = a.get(p, j);
                    let aqj = a.get(q, j);
                    a.set(p, j, c * apj - sn * aqj);
                    a.set(q, j, sn * apj + c * aqj);
                }
                for i in 0..d {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - sn * viq);
                    v.set(i, q, sn * vip + c * viq);
                }
            }
        }
    }
    let eigvals = (0..d).map(|i| a.get(i, i)).collect();
    (eigvals, v)
}
