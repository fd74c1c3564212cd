// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small dense helpers on top of `nalgebra`.
//!
//! Convention throughout the crate: a batch is a matrix with one token per
//! row, maps act on the right (`h · P + b`), and bias vectors are broadcast
//! across rows.

use crate::{Error, Mat, Result, Vector};

/// `m[r, :] += bias` for every row.
pub fn add_row_bias(m: &mut Mat, bias: &Vector) {
    debug_assert_eq!(m.ncols(), bias.len());
    for (j, mut col) in m.column_iter_mut().enumerate() {
        let b = bias[j];
        col.iter_mut().for_each(|x| *x += b);
    }
}

/// `x · w + b` with a shape check.
pub fn affine(x: &Mat, w: &Mat, b: &Vector) -> Result<Mat> {
    if x.ncols() != w.nrows() {
        return Err(Error::shape(format!(
            "input has {} columns, map expects {}",
            x.ncols(),
            w.nrows()
        )));
    }
    let mut out = x * w;
    add_row_bias(&mut out, b);
    Ok(out)
}

/// Column sums as a vector (sum over rows).
pub fn col_sums(m: &Mat) -> Vector {
    Vector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// Column means (mean over rows).
pub fn col_means(m: &Mat) -> Vector {
    let n = m.nrows().max(1) as f64;
    col_sums(m) / n
}

/// Subtract the column means in place and return them.
pub fn center_columns(m: &mut Mat) -> Vector {
    let means = col_means(m);
    for (j, mut col) in m.column_iter_mut().enumerate() {
        let mu = means[j];
        col.iter_mut().for_each(|x| *x -= mu);
    }
    means
}

/// Mean over all entries of the squared difference.
pub fn mse(a: &Mat, b: &Mat) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let n = (a.nrows() * a.ncols()).max(1) as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn rel_error(a: &Mat, b: &Mat) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}

/// Singular values in descending order.
pub fn singular_values(m: &Mat) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Matrix with orthonormal columns spanning a random `rows × cols` Gaussian.
pub fn orthonormal_columns(g: Mat) -> Mat {
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign-fix so the factorization is unique.
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Normalize every row to unit Euclidean norm (rows of zero norm untouched).
pub fn normalize_rows(m: &mut Mat) {
    for r in 0..m.nrows() {
        let n = m.row(r).norm();
        if n > 0.0 {
            m.row_mut(r).unscale_mut(n);
        }
    }
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Convert row-major `f32` storage to an `f64` matrix.
pub fn from_row_major_f32(rows: usize, cols: usize, values: &[f32]) -> Mat {
    Mat::from_fn(rows, cols, |r, c| f64::from(values[r * cols + c]))
}

/// Flatten to row-major `f32`.
pub fn to_row_major_f32(m: &Mat) -> Vec<f32> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)] as f32);
        }
    }
    out
}

/// Pearson correlation; `None` when either series has zero variance or the
/// series are shorter than two.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_broadcast_adds_per_column() {
        let mut m = Mat::zeros(3, 2);
        add_row_bias(&mut m, &Vector::from_vec(vec![1.0, -2.0]));
        for r in 0..3 {
            assert_eq!(m[(r, 0)], 1.0);
            assert_eq!(m[(r, 1)], -2.0);
        }
    }

    #[test]
    fn orthonormal_columns_are_orthonormal() {
        let mut rng = crate::rng::seeded(3);
        let q = orthonormal_columns(crate::rng::gaussian_mat(&mut rng, 10, 4, 1.0));
        let gram = q.transpose() * &q;
        assert!((gram - Mat::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn pearson_basics() {
        let x = [1.0, 2.0, 3.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[1.0; 4]).is_none());
    }
}
