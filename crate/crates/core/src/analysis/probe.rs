// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse probing on SAE features.
//!
//! Features are chosen by the largest difference of class-mean
//! activations; a logistic-regression probe is then fit on just those
//! features.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::sae::topk_indices;
use crate::stitch::Stitch;
use crate::{linalg, Error, Mat, Result, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub feature_indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub trained_on: String,
}

impl ProbeSpec {
    /// Logits for rows of a features matrix whose columns are already
    /// restricted to `feature_indices`.
    pub fn logits(&self, features: &Mat) -> Result<Vec<f64>> {
        if features.ncols() != self.weights.len() {
            return Err(Error::shape(format!(
                "{} feature columns for a probe over {}",
                features.ncols(),
                self.weights.len()
            )));
        }
        Ok((0..features.nrows())
            .map(|r| self.bias + (0..self.weights.len()).map(|j| features[(r, j)] * self.weights[j]).sum::<f64>())
            .collect())
    }
}

/// Mean code vector of each example (rows of the result), averaged over the
/// example's tokens.
pub fn example_means(codes: &Mat, spans: &[(usize, usize)]) -> Result<Mat> {
    let mut out = Mat::zeros(spans.len(), codes.ncols());
    for (i, &(start, len)) in spans.iter().enumerate() {
        if len == 0 || start + len > codes.nrows() {
            return Err(Error::InvalidArgument(format!("bad example span ({start}, {len})")));
        }
        let block = codes.rows(start, len);
        for j in 0..codes.ncols() {
            out[(i, j)] = block.column(j).sum() / len as f64;
        }
    }
    Ok(out)
}

/// Indices of the `k` features with the largest difference between the
/// positive-class and negative-class mean activation (ties: lower index).
pub fn select_features(pos: &Mat, neg: &Mat, k: usize) -> Result<Vec<usize>> {
    if pos.nrows() == 0 || neg.nrows() == 0 {
        return Err(Error::InvalidArgument("both classes need at least one example".into()));
    }
    if pos.ncols() != neg.ncols() {
        return Err(Error::shape("classes disagree on feature count"));
    }
    if k == 0 || k > pos.ncols() {
        return Err(Error::InvalidArgument(format!("k={k} out of range")));
    }
    let diff = linalg::col_means(pos) - linalg::col_means(neg);
    Ok(topk_indices(diff.as_slice(), k))
}

/// Keep only the selected columns.
pub fn restrict(features: &Mat, indices: &[usize]) -> Mat {
    Mat::from_fn(features.nrows(), indices.len(), |r, j| features[(r, indices[j])])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// L2 penalty on the weights (bias unpenalized).
    pub l2: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            grad_tol: 1e-8,
            max_iter: 200,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn objective(x: &Mat, y: &[f64], theta: &DVector<f64>, l2: f64) -> f64 {
    let (n, k) = x.shape();
    let mut loss = 0.0;
    for r in 0..n {
        let z = theta[k] + (0..k).map(|j| x[(r, j)] * theta[j]).sum::<f64>();
        // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y z
        loss += softplus(z) - y[r] * z;
    }
    loss / n as f64 + 0.5 * l2 * theta.rows(0, k).norm_squared()
}

/// Fit an L2-regularized logistic regression by damped Newton iterations.
pub fn train_probe(features: &Mat, labels: &[bool], config: &ProbeConfig) -> Result<ProbeSpec> {
    let (n, k) = features.shape();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} rows but {} labels", labels.len())));
    }
    if n < 2 || labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::InvalidArgument("probe training needs both classes".into()));
    }
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let dim = k + 1;
    let mut theta = DVector::<f64>::zeros(dim);
    let nf = n as f64;
    for _ in 0..config.max_iter {
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        let mut row = DVector::<f64>::zeros(dim);
        for r in 0..n {
            for j in 0..k {
                row[j] = features[(r, j)];
            }
            row[k] = 1.0;
            let p = sigmoid(row.dot(&theta));
            grad.axpy((p - y[r]) / nf, &row, 1.0);
            hess.ger(p * (1.0 - p) / nf, &row, &row, 1.0);
        }
        for j in 0..k {
            grad[j] += config.l2 * theta[j];
            hess[(j, j)] += config.l2;
        }
        // Keeps the bias direction solvable when the data are separable.
        hess[(k, k)] += 1e-12;
        if grad.norm() < config.grad_tol {
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let f0 = objective(features, &y, &theta, config.l2);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            if objective(features, &y, &cand, config.l2) <= f0 - 1e-4 * t * slope || t < 1e-10 {
                theta = cand;
                break;
            }
            t *= 0.5;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("probe weights diverged".into()));
    }
    Ok(ProbeSpec {
        feature_indices: (0..k).collect(),
        weights: theta.rows(0, k).iter().copied().collect(),
        bias: theta[k],
        trained_on: String::new(),
    })
}

/// Fraction of rows whose thresholded prediction (σ ≥ 0.5) matches.
pub fn eval_probe(probe: &ProbeSpec, features: &Mat, labels: &[bool]) -> Result<f64> {
    let logits = probe.logits(features)?;
    if logits.len() != labels.len() {
        return Err(Error::shape("labels and rows differ in length"));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let correct = logits.iter().zip(labels).filter(|(z, &l)| (**z >= 0.0) == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Move a dense linear probe `(w, c)` on A's residual stream to B by
/// composing it with `T↓`: `w' = P↓ w`, `c' = ⟨w, b↓⟩ + c`.
pub fn transfer_dense_probe(w: &Vector, bias: f64, stitch: &Stitch) -> Result<(Vector, f64)> {
    if w.len() != stitch.d_a() {
        return Err(Error::shape("probe direction must live in A's space"));
    }
    Ok((&stitch.p_down * w, w.dot(&stitch.b_down) + bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argtopk_of_mean_differences() {
        let pos = Mat::from_row_slice(1, 3, &[0.1, 0.9, 0.5]);
        let neg = Mat::zeros(1, 3);
        let mut f = select_features(&pos, &neg, 2).unwrap();
        f.sort_unstable();
        assert_eq!(f, vec![1, 2]);
        let same = Mat::from_row_slice(2, 4, &[1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(select_features(&same, &same, 2).unwrap(), vec![0, 1]);
        assert!(select_features(&Mat::zeros(0, 3), &neg, 1).is_err());
    }

    #[test]
    fn separable_one_dimensional() {
        let x = Mat::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let y = [false, false, false, true, true, true];
        let p = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(eval_probe(&p, &x, &y).unwrap(), 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let x = Mat::zeros(3, 1);
        assert!(train_probe(&x, &[true, true, true], &ProbeConfig::default()).is_err());
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let p = ProbeSpec {
            feature_indices: vec![0],
            weights: vec![0.0],
            bias: 1.0,
            trained_on: String::new(),
        };
        let x = Mat::zeros(4, 1);
        assert_eq!(eval_probe(&p, &x, &[true, false, true, false]).unwrap(), 0.5);
    }

    #[test]
    fn dense_probe_transfer_matches_down_stitched_evaluation() {
        let mut r = crate::rng::seeded(8);
        let mut s = Stitch::init_random(3, 5, 1.0, 2);
        s.b_down = Vector::from_vec(vec![0.3, -0.2, 1.0]);
        let w = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let h_b = crate::rng::gaussian_mat(&mut r, 10, 5, 1.0);
        let (w2, c2) = transfer_dense_probe(&w, 0.7, &s).unwrap();
        let direct = &h_b * &w2;
        let via = s.apply_down(&h_b).unwrap() * &w;
        for i in 0..10 {
            assert!((direct[i] + c2 - (via[i] + 0.7)).abs() < 1e-12);
        }
    }
}
