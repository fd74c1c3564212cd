// SPDX-License-Identifier: MIT OR Apache-2.0

//! Moving SAEs and vectors across a stitch.
//!
//! Running an A-side SAE on `T↓(h_B)` and mapping the reconstruction back
//! with `T↑` is itself an SAE on B, because every step is affine:
//!
//! ```text
//! θ' = (P↓·W_e,  b↓·W_e + b_e,  W_d·P↑,  b_d·P↑ + b↑)
//! ```
//!
//! The activation rule carries over untouched (JumpReLU thresholds
//! included). Both weight matrices of `θ'` have rank at most `d_A`.

use serde::{Deserialize, Serialize};

use crate::sae::{self, SaeMetrics, SaeParams};
use crate::stitch::Stitch;
use crate::{linalg, Error, Mat, Result, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct TransferredSae {
    pub params: SaeParams,
    pub source_id: String,
    pub stitch_id: String,
    pub rank_bound: usize,
}

pub fn transfer_sae(theta: &SaeParams, stitch: &Stitch) -> Result<TransferredSae> {
    theta.validate()?;
    stitch.validate()?;
    if theta.d() != stitch.d_a() {
        return Err(Error::shape(format!(
            "SAE width {} does not match stitch source dimension {}",
            theta.d(),
            stitch.d_a()
        )));
    }
    let w_e = &stitch.p_down * &theta.w_e;
    let b_e = (stitch.b_down.transpose() * &theta.w_e).transpose() + &theta.b_e;
    let w_d = &theta.w_d * &stitch.p_up;
    let b_d = (theta.b_d.transpose() * &stitch.p_up).transpose() + &stitch.b_up;
    Ok(TransferredSae {
        params: SaeParams {
            w_e,
            b_e,
            w_d,
            b_d,
            activation: theta.activation.clone(),
        },
        source_id: String::new(),
        stitch_id: String::new(),
        rank_bound: stitch.d_a(),
    })
}

impl TransferredSae {
    pub fn with_provenance(mut self, source_id: impl Into<String>, stitch_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self.stitch_id = stitch_id.into();
        self
    }

    /// Largest singular value beyond index `rank_bound`, relative to the
    /// top one, for `(W_e', W_d')`. Zero when the matrices are too small to
    /// exceed the bound.
    pub fn excess_rank(&self) -> (f64, f64) {
        (
            relative_tail(&self.params.w_e, self.rank_bound),
            relative_tail(&self.params.w_d, self.rank_bound),
        )
    }
}

fn relative_tail(m: &Mat, bound: usize) -> f64 {
    let s = linalg::singular_values(m);
    match (s.first(), s.get(bound)) {
        (Some(&top), Some(&next)) if top > 0.0 => next / top,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// `v · P` for the chosen direction (no bias), optionally renormalized.
pub fn transfer_vector(v: &Vector, stitch: &Stitch, direction: Direction, renormalize: bool) -> Result<Vector> {
    let p = match direction {
        Direction::Up => &stitch.p_up,
        Direction::Down => &stitch.p_down,
    };
    if v.len() != p.nrows() {
        return Err(Error::shape(format!(
            "vector has length {}, {:?} transfer expects {}",
            v.len(),
            direction,
            p.nrows()
        )));
    }
    let out = (v.transpose() * p).transpose();
    if renormalize {
        let n = out.norm();
        if !(n > 0.0) {
            return Err(Error::InvalidArgument("cannot renormalize a zero vector".into()));
        }
        return Ok(out / n);
    }
    Ok(out)
}

/// Zero-shot metrics of an SAE on a stream, optionally paired with the
/// source SAE's metrics on its own stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub original: Option<SaeMetrics>,
    pub transfer: SaeMetrics,
}

pub fn zero_shot_eval<I>(transferred: &TransferredSae, stream: I) -> Result<SaeMetrics>
where
    I: IntoIterator<Item = Mat>,
{
    sae::eval_sae(&transferred.params, stream)
}

impl ZeroShotReport {
    /// `(metric, "original / transfer")` rows: L0, FUV, Dead %.
    pub fn rows(&self) -> Vec<(String, String)> {
        let pair = |f: &dyn Fn(&SaeMetrics) -> String| match &self.original {
            Some(o) => format!("{} / {}", f(o), f(&self.transfer)),
            None => f(&self.transfer),
        };
        vec![
            ("L0".into(), pair(&|m| format!("{:.1}", m.l0))),
            ("FUV".into(), pair(&|m| format!("{:.2}", m.fuv))),
            ("Dead %".into(), pair(&|m| format!("{:.1}%", 100.0 * m.dead_fraction))),
        ]
    }
}
