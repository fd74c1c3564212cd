// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam with global gradient-norm clipping and learning-rate schedules.
//!
//! Parameters are handed over as a list of flat `f64` slices (one per
//! tensor) so the optimizer stays agnostic of matrix shapes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// Cosine annealing from the base rate down to 0 over the run.
    #[default]
    Cosine,
    Constant,
}

impl LrSchedule {
    /// Learning rate at `step` (0-based) of `total` steps.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => {
                if total == 0 {
                    return base;
                }
                let t = (step as f64 / total as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    /// Optimizer state for tensors of the given flat sizes.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter tensor count changed");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            assert_eq!(p.len(), g.len());
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_ends_at_zero() {
        assert_eq!(LrSchedule::Cosine.rate(1e-3, 0, 10), 1e-3);
        assert!(LrSchedule::Cosine.rate(1e-3, 10, 10).abs() < 1e-18);
        assert!((LrSchedule::Cosine.rate(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.rate(0.1, 9, 10), 0.1);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = vec![3.0, 0.0];
        let mut b = vec![4.0];
        let pre = clip_global_norm(&mut [&mut a[..], &mut b[..]], 1.0);
        assert_eq!(pre, 5.0);
        assert!((global_norm(&[&a, &b]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = [1.0, -1.0];
        let mut opt = Adam::new(&[2]);
        opt.step(&mut [&mut p[..]], &[&[0.5, -2.0]], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = [5.0];
        let mut opt = Adam::new(&[1]);
        for s in 0..2000 {
            let g = [2.0 * (p[0] - 2.0)];
            let lr = LrSchedule::Cosine.rate(0.05, s, 2000);
            opt.step(&mut [&mut p[..]], &[&g], lr);
        }
        assert!((p[0] - 2.0).abs() < 1e-4);
    }
}
