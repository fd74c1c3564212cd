// SPDX-License-Identifier: MIT OR Apache-2.0

//! Affine stitches between two residual streams.
//!
//! `T↑(h_A) = h_A · P↑ + b↑` maps A into B and `T↓(h_B) = h_B · P↓ + b↓` maps
//! back. Both are trained together on the sum of the two reconstruction
//! errors plus `alpha` times the two round-trip (inversion) errors.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::optim::{clip_global_norm, Adam, LrSchedule};
use crate::tensor_store::{self, ActivationShard, DenseMatrix, PairedBatch, ShardMeta};
use crate::{linalg, rng, Error, Mat, Result, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct Stitch {
    /// `d_a × d_b`
    pub p_up: Mat,
    pub b_up: Vector,
    /// `d_b × d_a`
    pub p_down: Mat,
    pub b_down: Vector,
    pub alpha: f64,
    pub source: Option<ShardMeta>,
    pub target: Option<ShardMeta>,
}

impl Stitch {
    pub fn new(p_up: Mat, b_up: Vector, p_down: Mat, b_down: Vector, alpha: f64) -> Result<Self> {
        let s = Self {
            p_up,
            b_up,
            p_down,
            b_down,
            alpha,
            source: None,
            target: None,
        };
        s.validate()?;
        Ok(s)
    }

    /// `P = I`, `b = 0` on a `d`-dimensional space.
    pub fn identity(d: usize) -> Self {
        Self::new(Mat::identity(d, d), Vector::zeros(d), Mat::identity(d, d), Vector::zeros(d), 0.0)
            .expect("identity is consistent")
    }

    pub fn d_a(&self) -> usize {
        self.p_up.nrows()
    }

    pub fn d_b(&self) -> usize {
        self.p_up.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_a, d_b) = self.p_up.shape();
        if self.p_down.shape() != (d_b, d_a) || self.b_up.len() != d_b || self.b_down.len() != d_a {
            return Err(Error::shape(format!(
                "inconsistent stitch shapes: P_up {:?}, b_up {}, P_down {:?}, b_down {}",
                self.p_up.shape(),
                self.b_up.len(),
                self.p_down.shape(),
                self.b_down.len()
            )));
        }
        let finite = linalg::all_finite(&self.p_up)
            && linalg::all_finite(&self.p_down)
            && self.b_up.iter().chain(self.b_down.iter()).all(|x| x.is_finite());
        if !finite || !(self.alpha >= 0.0) {
            return Err(Error::Validation("stitch has non-finite entries or negative alpha".into()));
        }
        Ok(())
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init_random(d_a: usize, d_b: usize, alpha: f64, seed: u64) -> Self {
        let mut rng = rng::seeded(rng::substream(seed, "stitch-init"));
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let mut m = Mat::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    m[(r, c)] = rng.random_range(-bound..bound);
                }
            }
            m
        };
        let p_up = uniform(d_a, d_b);
        let p_down = uniform(d_b, d_a);
        Self {
            p_up,
            b_up: Vector::zeros(d_b),
            p_down,
            b_down: Vector::zeros(d_a),
            alpha,
            source: None,
            target: None,
        }
    }

    pub fn apply_up(&self, h_a: &Mat) -> Result<Mat> {
        linalg::affine(h_a, &self.p_up, &self.b_up)
    }

    pub fn apply_down(&self, h_b: &Mat) -> Result<Mat> {
        linalg::affine(h_b, &self.p_down, &self.b_down)
    }

    pub fn to_bundle(&self) -> Vec<DenseMatrix> {
        let meta = |m: &Option<ShardMeta>| {
            m.as_ref()
                .map_or(Value::Null, |m| serde_json::to_value(m).expect("meta serializes"))
        };
        vec![
            DenseMatrix::from_mat(&self.p_up, "P_up")
                .with_attr("alpha", self.alpha)
                .with_attr("source", meta(&self.source))
                .with_attr("target", meta(&self.target)),
            DenseMatrix::from_vector(&self.b_up, "b_up"),
            DenseMatrix::from_mat(&self.p_down, "P_down"),
            DenseMatrix::from_vector(&self.b_down, "b_down"),
        ]
    }

    pub fn from_bundle(mats: &[DenseMatrix]) -> Result<Self> {
        let p_up = tensor_store::find(mats, "P_up")?;
        let alpha = p_up.attrs.get("alpha").and_then(Value::as_f64).unwrap_or(0.0);
        let meta = |key: &str| -> Result<Option<ShardMeta>> {
            match p_up.attrs.get(key) {
                None | Some(Value::Null) => Ok(None),
                Some(v) => serde_json::from_value(v.clone())
                    .map(Some)
                    .map_err(|e| Error::Format(format!("stitch {key} metadata: {e}"))),
            }
        };
        let mut s = Self::new(
            p_up.to_mat(),
            tensor_store::find(mats, "b_up")?.to_vector(),
            tensor_store::find(mats, "P_down")?.to_mat(),
            tensor_store::find(mats, "b_down")?.to_vector(),
            alpha,
        )?;
        s.source = meta("source")?;
        s.target = meta("target")?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        tensor_store::write_bundle(&self.to_bundle(), path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bundle(&tensor_store::read_bundle(path)?)
    }
}

/// The four terms of the stitching objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub up_mse: f64,
    pub down_mse: f64,
    pub inv_a_mse: f64,
    pub inv_b_mse: f64,
    pub total: f64,
}

impl LossParts {
    pub fn new(up_mse: f64, down_mse: f64, inv_a_mse: f64, inv_b_mse: f64, alpha: f64) -> Self {
        Self {
            up_mse,
            down_mse,
            inv_a_mse,
            inv_b_mse,
            total: up_mse + down_mse + alpha * (inv_a_mse + inv_b_mse),
        }
    }

    fn scaled_add(&mut self, other: &Self, w: f64) {
        self.up_mse += w * other.up_mse;
        self.down_mse += w * other.down_mse;
        self.inv_a_mse += w * other.inv_a_mse;
        self.inv_b_mse += w * other.inv_b_mse;
        self.total += w * other.total;
    }
}

/// Gradients of the total loss w.r.t. each stitch parameter.
#[derive(Debug, Clone)]
pub struct StitchGrads {
    pub p_up: Mat,
    pub b_up: Vector,
    pub p_down: Mat,
    pub b_down: Vector,
}

fn check_batches(stitch: &Stitch, a: &Mat, b: &Mat) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(Error::shape(format!(
            "row-count mismatch: {} A rows vs {} B rows",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if a.ncols() != stitch.d_a() || b.ncols() != stitch.d_b() {
        return Err(Error::shape(format!(
            "batch widths ({}, {}) do not match stitch ({}, {})",
            a.ncols(),
            b.ncols(),
            stitch.d_a(),
            stitch.d_b()
        )));
    }
    Ok(())
}

/// Evaluate the objective on a row-aligned batch pair.
pub fn stitch_loss(stitch: &Stitch, a: &Mat, b: &Mat, alpha: f64) -> Result<LossParts> {
    check_batches(stitch, a, b)?;
    let up = stitch.apply_up(a)?;
    let down = stitch.apply_down(b)?;
    let inv_a = stitch.apply_down(&up)?;
    let inv_b = stitch.apply_up(&down)?;
    let parts = LossParts::new(
        linalg::mse(&up, b),
        linalg::mse(&down, a),
        linalg::mse(&inv_a, a),
        linalg::mse(&inv_b, b),
        alpha,
    );
    if !parts.total.is_finite() {
        return Err(Error::Numerical("stitch loss is not finite".into()));
    }
    Ok(parts)
}

/// Loss and analytic gradients.
pub fn loss_and_grad(stitch: &Stitch, a: &Mat, b: &Mat, alpha: f64) -> Result<(LossParts, StitchGrads)> {
    check_batches(stitch, a, b)?;
    let n = a.nrows() as f64;
    let (da, db) = (stitch.d_a() as f64, stitch.d_b() as f64);

    let up = stitch.apply_up(a)?;
    let down = stitch.apply_down(b)?;
    let inv_a = stitch.apply_down(&up)?;
    let inv_b = stitch.apply_up(&down)?;

    let r_up = &up - b;
    let r_down = &down - a;
    let r_inv_a = &inv_a - a;
    let r_inv_b = &inv_b - b;
    let parts = LossParts::new(
        r_up.norm_squared() / (n * db),
        r_down.norm_squared() / (n * da),
        r_inv_a.norm_squared() / (n * da),
        r_inv_b.norm_squared() / (n * db),
        alpha,
    );
    if !parts.total.is_finite() {
        return Err(Error::Numerical("stitch loss is not finite".into()));
    }

    let g_inv_a = r_inv_a * (2.0 * alpha / (n * da));
    let g_inv_b = r_inv_b * (2.0 * alpha / (n * db));
    // Upstream gradients flowing into T↑(A) and T↓(B).
    let g_up = r_up * (2.0 / (n * db)) + &g_inv_a * stitch.p_down.transpose();
    let g_down = r_down * (2.0 / (n * da)) + &g_inv_b * stitch.p_up.transpose();

    let grads = StitchGrads {
        p_up: a.transpose() * &g_up + down.transpose() * &g_inv_b,
        b_up: linalg::col_sums(&g_up) + linalg::col_sums(&g_inv_b),
        p_down: b.transpose() * &g_down + up.transpose() * &g_inv_a,
        b_down: linalg::col_sums(&g_down) + linalg::col_sums(&g_inv_a),
    };
    Ok((parts, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchTrainConfig {
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub batch_tokens: usize,
    pub lr_schedule: LrSchedule,
    pub alpha: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Fraction of tokens (taken from the end) held out for evaluation.
    pub holdout_fraction: f64,
}

impl Default for StitchTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            grad_clip_norm: 1.0,
            epochs: 2,
            batch_tokens: 256,
            lr_schedule: LrSchedule::Cosine,
            alpha: 1.0,
            seed: 0,
            log_every: 100,
            holdout_fraction: 0.005,
        }
    }
}

impl StitchTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning_rate must be finite and non-negative".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Validation("grad_clip_norm must be positive".into()));
        }
        if self.epochs == 0 || self.batch_tokens == 0 || self.log_every == 0 {
            return Err(Error::Validation("epochs, batch_tokens and log_every must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Validation("alpha must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Validation("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One optimizer step's worth of state around a stitch.
pub struct StitchTrainer {
    pub stitch: Stitch,
    config: StitchTrainConfig,
    opt: Adam,
    step: usize,
    total_steps: usize,
}

impl StitchTrainer {
    pub fn new(stitch: Stitch, config: StitchTrainConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        stitch.validate()?;
        let sizes = [
            stitch.p_up.len(),
            stitch.b_up.len(),
            stitch.p_down.len(),
            stitch.b_down.len(),
        ];
        Ok(Self {
            stitch,
            config,
            opt: Adam::new(&sizes),
            step: 0,
            total_steps,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Forward, backward, clip, Adam update. Returns the pre-update loss.
    pub fn step(&mut self, a: &Mat, b: &Mat) -> Result<LossParts> {
        let (parts, mut g) = loss_and_grad(&self.stitch, a, b, self.config.alpha)?;
        clip_global_norm(
            &mut [
                g.p_up.as_mut_slice(),
                g.b_up.as_mut_slice(),
                g.p_down.as_mut_slice(),
                g.b_down.as_mut_slice(),
            ],
            self.config.grad_clip_norm,
        );
        let lr = self
            .config
            .lr_schedule
            .rate(self.config.learning_rate, self.step, self.total_steps);
        let s = &mut self.stitch;
        self.opt.step(
            &mut [
                s.p_up.as_mut_slice(),
                s.b_up.as_mut_slice(),
                s.p_down.as_mut_slice(),
                s.b_down.as_mut_slice(),
            ],
            &[
                g.p_up.as_slice(),
                g.b_up.as_slice(),
                g.p_down.as_slice(),
                g.b_down.as_slice(),
            ],
            lr,
        );
        self.step += 1;
        Ok(parts)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchLogEntry {
    pub step: usize,
    pub tokens: u64,
    pub lr: f64,
    /// Mean training loss over the logging interval.
    pub train: LossParts,
    pub heldout: Option<LossParts>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StitchHistory {
    pub entries: Vec<StitchLogEntry>,
    pub tokens_processed: u64,
    pub final_heldout: Option<LossParts>,
}

/// Split paired shards into training shards and a held-out tail.
fn split_holdout(
    a: &[ActivationShard],
    b: &[ActivationShard],
    fraction: f64,
) -> (Vec<ActivationShard>, Vec<ActivationShard>, Option<(Mat, Mat)>) {
    let total: usize = a.iter().map(ActivationShard::n_tokens).sum();
    let hold = (total as f64 * fraction).ceil() as usize;
    if hold == 0 || hold >= total {
        return (a.to_vec(), b.to_vec(), None);
    }
    let mut remaining = hold;
    let mut ta = a.to_vec();
    let mut tb = b.to_vec();
    let mut ha = Vec::new();
    let mut hb = Vec::new();
    while remaining > 0 {
        let (sa, sb) = (ta.pop().expect("rows remain"), tb.pop().expect("rows remain"));
        let n = sa.n_tokens();
        let take = remaining.min(n);
        let keep = n - take;
        let rows: Vec<usize> = (keep..n)
            .filter(|&r| !(sa.special_mask[r] || sb.special_mask[r]))
            .collect();
        ha.push(sa.gather(&rows));
        hb.push(sb.gather(&rows));
        if keep > 0 {
            ta.push(sa.slice(0, keep));
            tb.push(sb.slice(0, keep));
        }
        remaining -= take;
    }
    let stack = |parts: Vec<Mat>| {
        let cols = parts[0].ncols();
        let rows: usize = parts.iter().map(Mat::nrows).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut r0 = 0;
        for p in parts.iter().rev() {
            out.rows_mut(r0, p.nrows()).copy_from(p);
            r0 += p.nrows();
        }
        out
    };
    let (ha, hb) = (stack(ha), stack(hb));
    let held = (ha.nrows() > 0).then_some((ha, hb));
    (ta, tb, held)
}

/// Train a stitch from paired, row-aligned shards of models A and B.
///
/// Special tokens (in either model) are masked. The last
/// `holdout_fraction` of tokens is held out and evaluated at every log.
pub fn train_stitch(
    config: &StitchTrainConfig,
    a: &[ActivationShard],
    b: &[ActivationShard],
) -> Result<(Stitch, StitchHistory)> {
    config.validate()?;
    let (train_a, train_b, held) = split_holdout(a, b, config.holdout_fraction);
    let d_a = train_a.first().map(|s| s.d_model).ok_or_else(|| Error::InvalidArgument("no A shards".into()))?;
    let d_b = train_b.first().map(|s| s.d_model).ok_or_else(|| Error::InvalidArgument("no B shards".into()))?;

    let shuffle_seed = rng::substream(config.seed, "stitch-shuffle");
    let rows_per_epoch =
        tensor_store::stream_paired_epoch(&train_a, &train_b, config.batch_tokens, true, shuffle_seed, 0)?
            .len_rows();
    if rows_per_epoch == 0 {
        return Err(Error::InvalidArgument("no eligible training tokens".into()));
    }
    let steps_per_epoch = rows_per_epoch.div_ceil(config.batch_tokens);
    let total_steps = steps_per_epoch * config.epochs;

    let mut stitch = Stitch::init_random(d_a, d_b, config.alpha, config.seed);
    stitch.source = a.first().map(|s| s.meta.clone());
    stitch.target = b.first().map(|s| s.meta.clone());
    let mut trainer = StitchTrainer::new(stitch, config.clone(), total_steps)?;
    let mut history = StitchHistory::default();
    let mut acc = LossParts::default();
    let mut acc_n = 0usize;

    let eval_held = |s: &Stitch| -> Result<Option<LossParts>> {
        held.as_ref().map(|(ha, hb)| stitch_loss(s, ha, hb, config.alpha)).transpose()
    };

    for epoch in 0..config.epochs {
        let stream = tensor_store::stream_paired_epoch(
            &train_a,
            &train_b,
            config.batch_tokens,
            true,
            shuffle_seed,
            epoch as u64,
        )?;
        for PairedBatch { a: ba, b: bb, rows } in stream {
            let lr = config.lr_schedule.rate(config.learning_rate, trainer.steps_taken(), total_steps);
            let parts = trainer.step(&ba, &bb).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "stitch training diverged at step {}: {msg}",
                    trainer.steps_taken()
                )),
                other => other,
            })?;
            history.tokens_processed += rows.len() as u64;
            acc.scaled_add(&parts, 1.0);
            acc_n += 1;
            let step = trainer.steps_taken();
            if step % config.log_every == 0 || step == total_steps {
                let mut mean = LossParts::default();
                mean.scaled_add(&acc, 1.0 / acc_n as f64);
                history.entries.push(StitchLogEntry {
                    step,
                    tokens: history.tokens_processed,
                    lr,
                    train: mean,
                    heldout: eval_held(&trainer.stitch)?,
                });
                acc = LossParts::default();
                acc_n = 0;
            }
        }
    }
    history.final_heldout = eval_held(&trainer.stitch)?;
    Ok((trainer.stitch, history))
}
