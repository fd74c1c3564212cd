// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering vectors: difference-of-means directions and component clamping.

use serde::{Deserialize, Serialize};

use crate::stitch::Stitch;
use crate::transfer::{transfer_vector, Direction};
use crate::{linalg, Error, Mat, Result, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    /// Unit direction.
    pub v: Vec<f64>,
    /// Clamp target: mean projection of positive examples onto `v`.
    pub z_bar: f64,
    pub layer: u32,
    pub label: String,
}

impl SteeringVector {
    pub fn direction(&self) -> Vector {
        Vector::from_column_slice(&self.v)
    }
}

fn mean_projection(rows: &Mat, v: &Vector) -> f64 {
    (rows * v).mean()
}

/// `v = normalize(mean(pos) − mean(neg))`, `z̄ = mean ⟨pos_row, v⟩`.
pub fn compute_steering_vector(pos: &Mat, neg: &Mat) -> Result<SteeringVector> {
    if pos.nrows() == 0 || neg.nrows() == 0 {
        return Err(Error::InvalidArgument("steering needs positive and negative activations".into()));
    }
    if pos.ncols() != neg.ncols() {
        return Err(Error::shape("positive and negative activations differ in width"));
    }
    let diff = linalg::col_means(pos) - linalg::col_means(neg);
    let n = diff.norm();
    if !(n > 0.0) {
        return Err(Error::InvalidArgument("class means coincide; no steering direction".into()));
    }
    let v = diff / n;
    Ok(SteeringVector {
        z_bar: mean_projection(pos, &v),
        v: v.iter().copied().collect(),
        layer: 0,
        label: String::new(),
    })
}

/// `h' = h + (z̄ − ⟨h, v⟩) v`.
pub fn apply_clamp(h: &Vector, sv: &SteeringVector) -> Vector {
    let v = sv.direction();
    let c = sv.z_bar - h.dot(&v);
    h + v * c
}

/// Clamp every row of a batch.
pub fn apply_clamp_rows(h: &Mat, sv: &SteeringVector) -> Mat {
    let v = sv.direction();
    let proj = h * &v;
    let mut out = h.clone();
    for r in 0..h.nrows() {
        let c = sv.z_bar - proj[r];
        let mut row = out.row_mut(r);
        row += v.transpose() * c;
    }
    out
}

/// Transfer a steering vector across the stitch (`v · P`, renormalized) and
/// recompute `z̄` on the target model's positive activations.
pub fn transfer_steering_vector(
    sv: &SteeringVector,
    stitch: &Stitch,
    direction: Direction,
    target_pos: &Mat,
) -> Result<SteeringVector> {
    let v = transfer_vector(&sv.direction(), stitch, direction, true)?;
    if target_pos.ncols() != v.len() || target_pos.nrows() == 0 {
        return Err(Error::shape("target activations do not match the transferred vector"));
    }
    Ok(SteeringVector {
        z_bar: mean_projection(target_pos, &v),
        v: v.iter().copied().collect(),
        layer: sv.layer,
        label: sv.label.clone(),
    })
}

/// `clip(transfer / ground_truth, 0, 1)` with `0/0 = 0` and `x/0 = 1`.
pub fn relative_transfer_gap(transfer_perf: f64, ground_truth_perf: f64) -> Result<f64> {
    if !(transfer_perf >= 0.0 && ground_truth_perf >= 0.0) {
        return Err(Error::InvalidArgument("performances must be non-negative".into()));
    }
    if ground_truth_perf == 0.0 {
        return Ok(if transfer_perf == 0.0 { 0.0 } else { 1.0 });
    }
    Ok((transfer_perf / ground_truth_perf).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_fixtures() {
        assert_eq!(relative_transfer_gap(0.79, 0.81).unwrap(), 0.79 / 0.81);
        assert_eq!(relative_transfer_gap(0.0, 0.23).unwrap(), 0.0);
        assert_eq!(relative_transfer_gap(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(relative_transfer_gap(0.4, 0.0).unwrap(), 1.0);
        assert_eq!(relative_transfer_gap(0.9, 0.3).unwrap(), 1.0);
        assert!(relative_transfer_gap(-0.1, 0.3).is_err());
    }

    #[test]
    fn shifted_cluster_recovers_direction() {
        let mut r = crate::rng::seeded(4);
        let neg = crate::rng::gaussian_mat(&mut r, 30, 4, 1.0);
        let u = Vector::from_vec(vec![0.0, 0.6, 0.0, -0.8]);
        let mut pos = neg.clone();
        linalg::add_row_bias(&mut pos, &(&u * -2.5));
        let sv = compute_steering_vector(&pos, &neg).unwrap();
        assert!((sv.direction() + &u).norm() < 1e-9);
    }

    #[test]
    fn z_bar_of_unit_rows() {
        let v = [0.0, 1.0, 0.0];
        let pos = Mat::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let neg = Mat::zeros(2, 3);
        let sv = compute_steering_vector(&pos, &neg).unwrap();
        assert_eq!(sv.v, v.to_vec());
        assert_eq!(sv.z_bar, 1.0);
        assert!(compute_steering_vector(&neg, &neg).is_err());
    }

    #[test]
    fn clamp_fixed_point_and_zero() {
        let sv = SteeringVector {
            v: vec![0.6, 0.8],
            z_bar: 2.0,
            layer: 0,
            label: String::new(),
        };
        let h = Vector::from_vec(vec![1.2, 1.6]);
        assert!((apply_clamp(&h, &sv) - &h).norm() < 1e-12);
        let z = apply_clamp(&Vector::zeros(2), &sv);
        assert!((z - sv.direction() * 2.0).norm() < 1e-12);
        let rows = Mat::from_row_slice(2, 2, &[0.0, 0.0, 1.2, 1.6]);
        let out = apply_clamp_rows(&rows, &sv);
        assert!((out.row(0)[0] - 1.2).abs() < 1e-12 && (out.row(1)[1] - 1.6).abs() < 1e-12);
    }
}
