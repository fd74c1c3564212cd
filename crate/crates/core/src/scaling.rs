// SPDX-License-Identifier: MIT OR Apache-2.0

//! FLOP accounting and loss-vs-compute power laws.
//!
//! FLOPs are counted analytically: an `m × n` affine layer costs `2mn` per
//! token forward and `4mn` backward. Activations and norms are ignored.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Trailing window (in log entries) of the explained-variance moving average.
pub const THRESHOLD_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopModule {
    pub name: String,
    pub rows: u64,
    pub cols: u64,
    /// How many times the module is applied per training token.
    pub applications: u64,
}

impl FlopModule {
    pub fn forward(&self) -> u128 {
        2 * u128::from(self.rows) * u128::from(self.cols)
    }

    pub fn backward(&self) -> u128 {
        4 * u128::from(self.rows) * u128::from(self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopModel {
    pub modules: Vec<FlopModule>,
}

impl FlopModel {
    pub fn single_affine(m: u64, n: u64) -> Self {
        Self {
            modules: vec![FlopModule {
                name: "affine".into(),
                rows: m,
                cols: n,
                applications: 1,
            }],
        }
    }

    /// Both stitch maps, each applied twice per token (direct + round trip).
    pub fn stitch(d_a: usize, d_b: usize) -> Self {
        let map = |name: &str, r: usize, c: usize| FlopModule {
            name: name.into(),
            rows: r as u64,
            cols: c as u64,
            applications: 2,
        };
        Self {
            modules: vec![map("up", d_a, d_b), map("down", d_b, d_a)],
        }
    }

    /// Encoder and decoder, one application each.
    pub fn sae(d: usize, m: usize) -> Self {
        let one = |name: &str, r: usize, c: usize| FlopModule {
            name: name.into(),
            rows: r as u64,
            cols: c as u64,
            applications: 1,
        };
        Self {
            modules: vec![one("encoder", d, m), one("decoder", m, d)],
        }
    }

    /// Forward + backward FLOPs for one training token.
    pub fn per_token(&self) -> u128 {
        self.modules
            .iter()
            .map(|m| (m.forward() + m.backward()) * u128::from(m.applications))
            .sum()
    }
}

pub fn estimate_flops(model: &FlopModel, tokens_processed: u64) -> u128 {
    model.per_token() * u128::from(tokens_processed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub flops: f64,
    pub loss: f64,
    pub run_id: String,
}

/// Running minimum of loss over strictly increasing compute.
pub fn frontier(history: &[(f64, f64)], run_id: &str) -> Result<Vec<FrontierPoint>> {
    if history.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::InvalidArgument("compute values must be strictly increasing".into()));
    }
    let mut best = f64::INFINITY;
    Ok(history
        .iter()
        .map(|&(c, l)| {
            best = best.min(l);
            FrontierPoint {
                flops: c,
                loss: best,
                run_id: run_id.to_string(),
            }
        })
        .collect())
}

/// `L(C) ≈ A · C^(−β)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub beta: f64,
    pub r_squared: f64,
}

impl PowerLawFit {
    pub fn predict(&self, c: f64) -> f64 {
        self.a * c.powf(-self.beta)
    }
}

/// Ordinary least squares of `ln L` on `ln C`.
pub fn fit_power_law(points: &[FrontierPoint]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    if points.iter().any(|p| !(p.flops > 0.0 && p.loss > 0.0)) {
        return Err(Error::InvalidArgument("compute and loss must be positive".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.flops.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.loss.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidArgument("all compute values are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 };
    Ok(PowerLawFit {
        a: intercept.exp(),
        beta: -slope,
        r_squared,
    })
}

/// First cumulative FLOP count (plus `extra_cost`) at which the trailing
/// moving average of explained variance reaches `threshold`. `history` holds
/// `(tokens processed, explained variance)` per log entry.
pub fn flops_to_threshold(history: &[(u64, f64)], threshold: f64, model: &FlopModel, extra_cost: f64) -> Option<f64> {
    let per_token = model.per_token() as f64;
    let by_flops: Vec<(f64, f64)> = history.iter().map(|&(t, ev)| (t as f64 * per_token, ev)).collect();
    flops_to_threshold_at(&by_flops, threshold, extra_cost)
}

/// Same as [`flops_to_threshold`] for histories already keyed by cumulative
/// FLOPs.
pub fn flops_to_threshold_at(history: &[(f64, f64)], threshold: f64, extra_cost: f64) -> Option<f64> {
    (0..history.len()).find_map(|i| {
        let lo = (i + 1).saturating_sub(THRESHOLD_WINDOW);
        let window = &history[lo..=i];
        let avg = window.iter().map(|(_, ev)| ev).sum::<f64>() / window.len() as f64;
        (avg >= threshold).then(|| history[i].0 + extra_cost)
    })
}
