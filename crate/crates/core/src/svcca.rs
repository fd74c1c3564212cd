// SPDX-License-Identifier: MIT OR Apache-2.0

//! SVCCA similarity and stitch-layer selection.
//!
//! Each activation matrix is centered and truncated to the leading singular
//! directions that carry `variance_threshold` of its variance. Canonical
//! correlations between the two truncated subspaces are the singular values
//! of `Q_xᵀ Q_y`, where `Q` are the (already whitened) left singular bases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{linalg, Error, Mat, Result};

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.99;
pub const DEFAULT_SAMPLE_TOKENS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvccaReport {
    pub scores: Vec<f64>,
    pub chosen_layer: usize,
    pub variance_threshold: f64,
}

/// Orthonormal basis of the leading singular subspace of centered `x`.
fn truncated_basis(x: &Mat, threshold: f64) -> Result<Mat> {
    let mut c = x.clone();
    linalg::center_columns(&mut c);
    let svd = c.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let energy: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let total: f64 = energy.iter().sum();
    let top = energy.first().copied().unwrap_or(0.0);
    if total <= 0.0 || top <= 0.0 {
        return Err(Error::InvalidArgument("activation matrix has rank 0".into()));
    }
    // Directions at round-off level never count as signal.
    let floor = top * 1e-24;
    let mut kept = 0;
    let mut acc = 0.0;
    for &e in &energy {
        if e <= floor {
            break;
        }
        kept += 1;
        acc += e;
        if acc >= threshold * total * (1.0 - 1e-12) {
            break;
        }
    }
    let cols: Vec<_> = order[..kept].iter().map(|&i| u.column(i)).collect();
    Ok(Mat::from_columns(&cols))
}

/// Mean canonical correlation between the SVD-truncated subspaces of `x`
/// and `y` (rows are aligned samples).
pub fn svcca_score(x: &Mat, y: &Mat, variance_threshold: f64) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape(format!("{} vs {} samples", x.nrows(), y.nrows())));
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    if !(variance_threshold > 0.0 && variance_threshold <= 1.0) {
        return Err(Error::InvalidArgument("variance_threshold must lie in (0, 1]".into()));
    }
    let qx = truncated_basis(x, variance_threshold)?;
    let qy = truncated_basis(y, variance_threshold)?;
    let cross = qx.transpose() * &qy;
    let rho = linalg::singular_values(&cross);
    let k = qx.ncols().min(qy.ncols());
    let mean = rho.iter().take(k).map(|r| r.clamp(0.0, 1.0)).sum::<f64>() / k as f64;
    Ok(mean)
}

/// Score every candidate layer against the fixed activations and pick the
/// argmax (lowest index on ties).
pub fn select_layer(fixed: &Mat, candidates: &[Mat], variance_threshold: f64) -> Result<SvccaReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate layers".into()));
    }
    let scores = candidates
        .par_iter()
        .map(|c| svcca_score(fixed, c, variance_threshold))
        .collect::<Result<Vec<f64>>>()?;
    let mut chosen = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[chosen] {
            chosen = i;
        }
    }
    Ok(SvccaReport {
        scores,
        chosen_layer: chosen,
        variance_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn self_similarity_is_one() {
        let mut r = rng::seeded(1);
        let x = rng::gaussian_mat(&mut r, 200, 8, 1.0);
        assert!((svcca_score(&x, &x, 0.99).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rank_zero_and_tiny_inputs() {
        let x = Mat::from_element(10, 3, 2.0);
        assert!(svcca_score(&x, &x, 0.99).is_err());
        let one = Mat::zeros(1, 3);
        assert!(svcca_score(&one, &one, 0.99).is_err());
    }

    #[test]
    fn single_candidate_chosen() {
        let mut r = rng::seeded(2);
        let x = rng::gaussian_mat(&mut r, 100, 4, 1.0);
        let y = rng::gaussian_mat(&mut r, 100, 6, 1.0);
        assert_eq!(select_layer(&x, &[y], 0.99).unwrap().chosen_layer, 0);
        assert!(select_layer(&x, &[], 0.99).is_err());
    }
}
