// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoders: forward pass, training, metrics.
//!
//! `f(x) = σ(x · W_e + b_e)` and `SAE(x) = f(x) · W_d + b_d`, with `σ` either
//! TopK (keep the k largest pre-activations of each row, then ReLU) or
//! JumpReLU (a value passes iff it exceeds its feature's threshold).

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::optim::{Adam, LrSchedule};
use crate::scaling::FlopModel;
use crate::tensor_store::{self, ActivationShard, DenseMatrix};
use crate::{linalg, rng, Error, Mat, Result, Vector};

#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    TopK(usize),
    /// Per-feature thresholds (forward only).
    JumpReLU(Vector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// `d × M`
    pub w_e: Mat,
    pub b_e: Vector,
    /// `M × d`
    pub w_d: Mat,
    pub b_d: Vector,
    pub activation: Activation,
}

impl SaeParams {
    pub fn d(&self) -> usize {
        self.w_e.nrows()
    }

    pub fn m(&self) -> usize {
        self.w_e.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m) = self.w_e.shape();
        if self.b_e.len() != m || self.w_d.shape() != (m, d) || self.b_d.len() != d {
            return Err(Error::shape(format!(
                "inconsistent SAE shapes: W_e {:?}, b_e {}, W_d {:?}, b_d {}",
                self.w_e.shape(),
                self.b_e.len(),
                self.w_d.shape(),
                self.b_d.len()
            )));
        }
        match &self.activation {
            Activation::TopK(k) if *k == 0 || *k > m => {
                return Err(Error::Validation(format!("TopK k={k} must lie in [1, M={m}]")));
            }
            Activation::JumpReLU(t) if t.len() != m => {
                return Err(Error::shape(format!("{} thresholds for {m} features", t.len())));
            }
            Activation::JumpReLU(t) if t.iter().any(|x| !(*x >= 0.0)) => {
                return Err(Error::Validation("JumpReLU thresholds must be non-negative".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Pre-activations `x · W_e + b_e`.
    pub fn pre_activations(&self, x: &Mat) -> Result<Mat> {
        linalg::affine(x, &self.w_e, &self.b_e)
    }

    /// Sparse codes `f(x)`.
    pub fn encode(&self, x: &Mat) -> Result<Mat> {
        let pre = self.pre_activations(x)?;
        Ok(apply_activation(&pre, &self.activation))
    }

    pub fn decode(&self, codes: &Mat) -> Result<Mat> {
        linalg::affine(codes, &self.w_d, &self.b_d)
    }

    /// Bundle records `W_e`, `b_e`, `W_d`, `b_d` (and `thresholds` for
    /// JumpReLU). `attrs` are stored on the first record.
    pub fn to_bundle(&self, attrs: &BTreeMap<String, Value>) -> Vec<DenseMatrix> {
        let mut first = DenseMatrix::from_mat(&self.w_e, "W_e")
            .with_attr("d", self.d())
            .with_attr("m", self.m());
        first = match &self.activation {
            Activation::TopK(k) => first.with_attr("activation", "topk").with_attr("k", *k),
            Activation::JumpReLU(_) => first.with_attr("activation", "jumprelu"),
        };
        for (k, v) in attrs {
            first.attrs.insert(k.clone(), v.clone());
        }
        let mut out = vec![
            first,
            DenseMatrix::from_vector(&self.b_e, "b_e"),
            DenseMatrix::from_mat(&self.w_d, "W_d"),
            DenseMatrix::from_vector(&self.b_d, "b_d"),
        ];
        if let Activation::JumpReLU(t) = &self.activation {
            out.push(DenseMatrix::from_vector(t, "thresholds"));
        }
        out
    }

    pub fn from_bundle(mats: &[DenseMatrix]) -> Result<(Self, BTreeMap<String, Value>)> {
        let w_e = tensor_store::find(mats, "W_e")?;
        let activation = match w_e.attrs.get("activation").and_then(Value::as_str) {
            Some("topk") => {
                let k = w_e
                    .attrs
                    .get("k")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| Error::Format("TopK SAE without 'k'".into()))?;
                Activation::TopK(k as usize)
            }
            Some("jumprelu") => Activation::JumpReLU(tensor_store::find(mats, "thresholds")?.to_vector()),
            other => return Err(Error::Format(format!("unknown SAE activation {other:?}"))),
        };
        let params = Self {
            w_e: w_e.to_mat(),
            b_e: tensor_store::find(mats, "b_e")?.to_vector(),
            w_d: tensor_store::find(mats, "W_d")?.to_mat(),
            b_d: tensor_store::find(mats, "b_d")?.to_vector(),
            activation,
        };
        params.validate()?;
        let mut attrs = w_e.attrs.clone();
        for key in ["d", "m", "activation", "k"] {
            attrs.remove(key);
        }
        Ok((params, attrs))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, attrs: &BTreeMap<String, Value>) -> Result<()> {
        tensor_store::write_bundle(&self.to_bundle(attrs), path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Self, BTreeMap<String, Value>)> {
        Self::from_bundle(&tensor_store::read_bundle(path)?)
    }
}

/// Indices of the `k` largest entries of `row`; ties go to the lower index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(row.len());
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_unstable_by(cmp);
    idx
}

fn apply_activation(pre: &Mat, activation: &Activation) -> Mat {
    let (n, m) = pre.shape();
    let mut codes = Mat::zeros(n, m);
    match activation {
        Activation::TopK(k) => {
            let mut row = vec![0.0; m];
            for r in 0..n {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = pre[(r, j)];
                }
                for j in topk_indices(&row, *k) {
                    codes[(r, j)] = row[j].max(0.0);
                }
            }
        }
        Activation::JumpReLU(t) => {
            for j in 0..m {
                for r in 0..n {
                    let v = pre[(r, j)];
                    if v > t[j] {
                        codes[(r, j)] = v;
                    }
                }
            }
        }
    }
    codes
}

/// `(codes, reconstruction)` for a batch.
pub fn sae_forward(x: &Mat, params: &SaeParams) -> Result<(Mat, Mat)> {
    if x.ncols() != params.d() {
        return Err(Error::shape(format!(
            "batch has {} columns, SAE expects {}",
            x.ncols(),
            params.d()
        )));
    }
    let codes = params.encode(x)?;
    let recon = params.decode(&codes)?;
    Ok((codes, recon))
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SaeMetrics {
    pub l0: f64,
    pub fuv: f64,
    pub explained_variance: f64,
    pub dead_fraction: f64,
    pub mse: f64,
    pub n_tokens: u64,
}

/// Streaming accumulator behind [`eval_sae`].
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    n: u64,
    active: u64,
    resid: f64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    fired: Vec<bool>,
}

impl MetricsAccumulator {
    pub fn new(d: usize, m: usize) -> Self {
        Self {
            n: 0,
            active: 0,
            resid: 0.0,
            sum: vec![0.0; d],
            sumsq: vec![0.0; d],
            fired: vec![false; m],
        }
    }

    pub fn add(&mut self, x: &Mat, codes: &Mat, recon: &Mat) {
        self.n += x.nrows() as u64;
        for (j, col) in codes.column_iter().enumerate() {
            let c = col.iter().filter(|&&v| v > 0.0).count();
            self.active += c as u64;
            self.fired[j] |= c > 0;
        }
        self.resid += (x - recon).norm_squared();
        for (j, col) in x.column_iter().enumerate() {
            self.sum[j] += col.sum();
            self.sumsq[j] += col.norm_squared();
        }
    }

    pub fn finish(&self) -> Result<SaeMetrics> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("empty evaluation stream".into()));
        }
        let n = self.n as f64;
        let total_var: f64 = self
            .sum
            .iter()
            .zip(&self.sumsq)
            .map(|(s, s2)| (s2 - s * s / n).max(0.0))
            .sum();
        let fuv = if total_var > 0.0 {
            self.resid / total_var
        } else if self.resid == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let m = self.fired.len().max(1) as f64;
        Ok(SaeMetrics {
            l0: self.active as f64 / n,
            fuv,
            explained_variance: 1.0 - fuv,
            dead_fraction: self.fired.iter().filter(|f| !**f).count() as f64 / m,
            mse: self.resid / (n * self.sum.len() as f64),
            n_tokens: self.n,
        })
    }
}

/// L0, FUV, explained variance and dead fraction over a stream of batches.
pub fn eval_sae<I>(params: &SaeParams, stream: I) -> Result<SaeMetrics>
where
    I: IntoIterator<Item = Mat>,
{
    let mut acc = MetricsAccumulator::new(params.d(), params.m());
    for x in stream {
        let (codes, recon) = sae_forward(&x, params)?;
        acc.add(&x, &codes, &recon);
    }
    acc.finish()
}

/// Evaluate on whole shards (special tokens excluded).
pub fn eval_sae_shards(params: &SaeParams, shards: &[ActivationShard], batch_tokens: usize) -> Result<SaeMetrics> {
    let stream = tensor_store::stream_batches(shards, batch_tokens, true, 0)?;
    eval_sae(params, stream.map(|b| b.data))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq)]
pub enum SaeInit {
    #[default]
    RandomTied,
    FromParams(Box<SaeParams>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeTrainConfig {
    pub latent_size: usize,
    pub k: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub total_tokens: u64,
    pub batch_tokens: usize,
    #[serde(skip)]
    pub init: SaeInit,
    pub seed: u64,
    /// Kept for configuration fidelity; TopK training ignores it.
    pub l1_lambda: f64,
    pub log_every: usize,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            latent_size: 256,
            k: 8,
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            total_tokens: 1_000_000,
            batch_tokens: 256,
            init: SaeInit::RandomTied,
            seed: 0,
            l1_lambda: 0.0,
            log_every: 50,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_size == 0 || self.k == 0 || self.k > self.latent_size {
            return Err(Error::Validation(format!(
                "k ({}) must lie in [1, latent_size ({})]",
                self.k, self.latent_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning_rate must be finite and non-negative".into()));
        }
        if self.batch_tokens == 0 || self.log_every == 0 {
            return Err(Error::Validation("batch_tokens and log_every must be positive".into()));
        }
        if self.total_tokens < self.batch_tokens as u64 {
            return Err(Error::Validation("total_tokens must be at least batch_tokens".into()));
        }
        Ok(())
    }
}

/// Initial parameters for a `d`-dimensional input.
pub fn init_sae(config: &SaeTrainConfig, d: usize) -> Result<SaeParams> {
    config.validate()?;
    match &config.init {
        SaeInit::RandomTied => {
            let mut rng = rng::seeded(rng::substream(config.seed, "sae-init"));
            let mut w_d = rng::gaussian_mat(&mut rng, config.latent_size, d, 1.0);
            linalg::normalize_rows(&mut w_d);
            Ok(SaeParams {
                w_e: w_d.transpose(),
                b_e: Vector::zeros(config.latent_size),
                w_d,
                b_d: Vector::zeros(d),
                activation: Activation::TopK(config.k),
            })
        }
        SaeInit::FromParams(p) => {
            if p.d() != d || p.m() != config.latent_size {
                return Err(Error::shape(format!(
                    "warm-start SAE is {}x{}, config expects {}x{}",
                    p.d(),
                    p.m(),
                    d,
                    config.latent_size
                )));
            }
            p.validate()?;
            Ok((**p).clone())
        }
    }
}

/// Gradients of the mean-squared reconstruction error.
#[derive(Debug, Clone)]
pub struct SaeGrads {
    pub w_e: Mat,
    pub b_e: Vector,
    pub w_d: Mat,
    pub b_d: Vector,
}

/// Batch statistics computed alongside a gradient.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub mse: f64,
    pub explained_variance: f64,
    pub l0: f64,
}

/// MSE (mean over rows and dims) and its gradient at the current support.
pub fn mse_and_grad(params: &SaeParams, x: &Mat) -> Result<(StepStats, SaeGrads)> {
    let (codes, recon) = sae_forward(x, params)?;
    let (n, d) = x.shape();
    let resid = &recon - x;
    let sq = resid.norm_squared();
    let mse = sq / (n * d) as f64;
    if !mse.is_finite() {
        return Err(Error::Numerical("SAE loss is not finite".into()));
    }
    let mut centered = x.clone();
    linalg::center_columns(&mut centered);
    let var = centered.norm_squared();
    let ev = if var > 0.0 { 1.0 - sq / var } else { 0.0 };
    let l0 = codes.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;

    let g = resid * (2.0 / (n * d) as f64);
    let mut g_codes = &g * params.w_d.transpose();
    for (gc, c) in g_codes.iter_mut().zip(codes.iter()) {
        if *c <= 0.0 {
            *gc = 0.0;
        }
    }
    let grads = SaeGrads {
        w_d: codes.transpose() * &g,
        b_d: linalg::col_sums(&g),
        w_e: x.transpose() * &g_codes,
        b_e: linalg::col_sums(&g_codes),
    };
    Ok((
        StepStats {
            mse,
            explained_variance: ev,
            l0,
        },
        grads,
    ))
}

/// Remove from each decoder-row gradient its component along the row.
fn project_decoder_grad(w_d: &Mat, g: &mut Mat) {
    for r in 0..w_d.nrows() {
        let w = w_d.row(r);
        let nn = w.norm_squared();
        if nn > 0.0 {
            let dot = g.row(r).dot(&w);
            let corr = w * (dot / nn);
            let mut gr = g.row_mut(r);
            gr -= corr;
        }
    }
}

/// Largest `|‖row‖ − 1|` over decoder rows.
pub fn decoder_norm_deviation(w_d: &Mat) -> f64 {
    (0..w_d.nrows())
        .map(|r| (w_d.row(r).norm() - 1.0).abs())
        .fold(0.0, f64::max)
}

pub struct SaeTrainer {
    pub params: SaeParams,
    opt: Adam,
    lr: f64,
    schedule: LrSchedule,
    step: usize,
    total_steps: usize,
}

impl SaeTrainer {
    pub fn new(params: SaeParams, learning_rate: f64, schedule: LrSchedule, total_steps: usize) -> Result<Self> {
        params.validate()?;
        let sizes = [params.w_e.len(), params.b_e.len(), params.w_d.len(), params.b_d.len()];
        Ok(Self {
            params,
            opt: Adam::new(&sizes),
            lr: learning_rate,
            schedule,
            step: 0,
            total_steps,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One Adam step followed by decoder renormalization. Returns the batch
    /// statistics before the update.
    pub fn step(&mut self, x: &Mat) -> Result<StepStats> {
        let (stats, mut g) = mse_and_grad(&self.params, x)?;
        project_decoder_grad(&self.params.w_d, &mut g.w_d);
        let lr = self.schedule.rate(self.lr, self.step, self.total_steps);
        let p = &mut self.params;
        self.opt.step(
            &mut [
                p.w_e.as_mut_slice(),
                p.b_e.as_mut_slice(),
                p.w_d.as_mut_slice(),
                p.b_d.as_mut_slice(),
            ],
            &[g.w_e.as_slice(), g.b_e.as_slice(), g.w_d.as_slice(), g.b_d.as_slice()],
            lr,
        );
        linalg::normalize_rows(&mut p.w_d);
        self.step += 1;
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SaeLogEntry {
    pub step: usize,
    pub tokens: u64,
    pub flops: f64,
    pub mse: f64,
    pub explained_variance: f64,
    pub l0: f64,
}

#[derive(Debug, Clone)]
pub struct SaeRun {
    pub params: SaeParams,
    pub initial: SaeParams,
    pub history: Vec<SaeLogEntry>,
    pub tokens_processed: u64,
    pub flops_consumed: f64,
}

/// Train on shards for `config.total_tokens` tokens, cycling through
/// shuffled epochs. Special tokens are masked.
pub fn train_sae(config: &SaeTrainConfig, shards: &[ActivationShard]) -> Result<SaeRun> {
    config.validate()?;
    let d = shards
        .first()
        .map(|s| s.d_model)
        .ok_or_else(|| Error::InvalidArgument("no training shards".into()))?;
    let mut params = init_sae(config, d)?;
    // Decoder rows start at unit norm regardless of where they came from.
    linalg::normalize_rows(&mut params.w_d);
    let initial = params.clone();
    let total_steps = (config.total_tokens as usize).div_ceil(config.batch_tokens);
    let mut trainer = SaeTrainer::new(params, config.learning_rate, config.lr_schedule, total_steps)?;
    let flops_per_token = FlopModel::sae(d, config.latent_size).per_token() as f64;

    let shuffle_seed = rng::substream(config.seed, "sae-shuffle");
    let mut history = Vec::new();
    let mut tokens = 0u64;
    let mut acc = StepStats::default();
    let mut acc_n = 0usize;
    let mut epoch = 0u64;
    'outer: loop {
        let stream = tensor_store::stream_epoch(shards, config.batch_tokens, true, shuffle_seed, epoch)?;
        if stream.len_rows() == 0 {
            return Err(Error::InvalidArgument("no eligible training tokens".into()));
        }
        for batch in stream {
            if tokens >= config.total_tokens {
                break 'outer;
            }
            let stats = trainer.step(&batch.data).map_err(|e| match e {
                Error::Numerical(msg) => {
                    Error::Numerical(format!("SAE training diverged at step {}: {msg}", trainer.steps_taken()))
                }
                other => other,
            })?;
            tokens += batch.rows.len() as u64;
            acc.mse += stats.mse;
            acc.explained_variance += stats.explained_variance;
            acc.l0 += stats.l0;
            acc_n += 1;
            if trainer.steps_taken() % config.log_every == 0 || tokens >= config.total_tokens {
                let k = acc_n as f64;
                history.push(SaeLogEntry {
                    step: trainer.steps_taken(),
                    tokens,
                    flops: tokens as f64 * flops_per_token,
                    mse: acc.mse / k,
                    explained_variance: acc.explained_variance / k,
                    l0: acc.l0 / k,
                });
                acc = StepStats::default();
                acc_n = 0;
            }
        }
        epoch += 1;
    }
    Ok(SaeRun {
        params: trainer.params,
        initial,
        history,
        tokens_processed: tokens,
        flops_consumed: tokens as f64 * flops_per_token,
    })
}

/// Cosine similarity between matching decoder rows of two SAEs, restricted
/// to the given feature indices.
pub fn decoder_cosines(a: &SaeParams, b: &SaeParams, features: &[usize]) -> Vec<f64> {
    features
        .iter()
        .map(|&i| {
            let (x, y) = (a.w_d.row(i), b.w_d.row(i));
            let nn = x.norm() * y.norm();
            if nn > 0.0 {
                x.dot(&y) / nn
            } else {
                0.0
            }
        })
        .collect()
}

/// Features that fire at least once on the given batches.
pub fn live_features<'a, I>(params: &SaeParams, stream: I) -> Result<Vec<usize>>
where
    I: IntoIterator<Item = &'a Mat>,
{
    let mut fired = vec![false; params.m()];
    for x in stream {
        let codes = params.encode(x)?;
        for (j, col) in codes.column_iter().enumerate() {
            fired[j] |= col.iter().any(|&v| v > 0.0);
        }
    }
    Ok(fired.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect())
}

/// Median of a slice (mean of the two middle values for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(rng: &mut rng::Rng, d: usize, m: usize, k: usize) -> SaeParams {
        SaeParams {
            w_e: rng::gaussian_mat(rng, d, m, 1.0),
            b_e: Vector::from_fn(m, |_, _| 0.1 * rng::normal(rng)),
            w_d: rng::gaussian_mat(rng, m, d, 1.0),
            b_d: Vector::from_fn(d, |_, _| rng::normal(rng)),
            activation: Activation::TopK(k),
        }
    }

    #[test]
    fn bias_passthrough() {
        let b_d = Vector::from_vec(vec![0.5, -1.5]);
        let p = SaeParams {
            w_e: Mat::zeros(2, 3),
            b_e: Vector::zeros(3),
            w_d: Mat::zeros(3, 2),
            b_d: b_d.clone(),
            activation: Activation::TopK(2),
        };
        let x = Mat::from_row_slice(1, 2, &[0.5, -1.5]);
        let (codes, recon) = sae_forward(&x, &p).unwrap();
        assert!(codes.iter().all(|&c| c == 0.0));
        assert_eq!(recon.row(0).transpose(), b_d);
    }

    #[test]
    fn topk_keeps_largest() {
        // x = e0 and W_e rows chosen so pre-activations are (3, 1, 2).
        let p = SaeParams {
            w_e: Mat::from_row_slice(2, 3, &[3.0, 1.0, 2.0, 0.0, 0.0, 0.0]),
            b_e: Vector::zeros(3),
            w_d: Mat::zeros(3, 2),
            b_d: Vector::zeros(2),
            activation: Activation::TopK(1),
        };
        let codes = p.encode(&Mat::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(codes.row(0).iter().copied().collect::<Vec<_>>(), vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        assert_eq!(topk_indices(&[1.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
        assert_eq!(topk_indices(&[0.0; 5], 3), vec![0, 1, 2]);
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let mut rng = rng::seeded(21);
        let (d, m, k) = (6, 20, 4);
        let p = random_params(&mut rng, d, m, k);
        let x = rng::gaussian_mat(&mut rng, 64, d, 1.0);
        let (_, recon) = sae_forward(&x, &p).unwrap();
        for r in 0..64 {
            let mut pre = vec![0.0; m];
            for (j, v) in pre.iter_mut().enumerate() {
                *v = p.b_e[j] + (0..d).map(|i| x[(r, i)] * p.w_e[(i, j)]).sum::<f64>();
            }
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|a, b| pre[*b].partial_cmp(&pre[*a]).unwrap().then(a.cmp(b)));
            let mut f = vec![0.0; m];
            for &j in &order[..k] {
                f[j] = pre[j].max(0.0);
            }
            for c in 0..d {
                let want = p.b_d[c] + (0..m).map(|j| f[j] * p.w_d[(j, c)]).sum::<f64>();
                assert!((recon[(r, c)] - want).abs() <= 1e-10 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn jumprelu_thresholds() {
        let p = SaeParams {
            w_e: Mat::identity(3, 3),
            b_e: Vector::zeros(3),
            w_d: Mat::identity(3, 3),
            b_d: Vector::zeros(3),
            activation: Activation::JumpReLU(Vector::from_vec(vec![0.5, 0.5, 2.0])),
        };
        let codes = p.encode(&Mat::from_row_slice(1, 3, &[0.4, 0.6, 1.9])).unwrap();
        assert_eq!(codes.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.6, 0.0]);
    }

    #[test]
    fn random_tied_init() {
        let cfg = SaeTrainConfig {
            latent_size: 12,
            k: 3,
            seed: 4,
            ..SaeTrainConfig::default()
        };
        let p = init_sae(&cfg, 5).unwrap();
        assert_eq!(p.w_e, p.w_d.transpose());
        assert!(decoder_norm_deviation(&p.w_d) < 1e-12);
        assert!(p.b_e.iter().chain(p.b_d.iter()).all(|&x| x == 0.0));
        assert_eq!(p.w_d, init_sae(&cfg, 5).unwrap().w_d);
    }

    #[test]
    fn from_params_copy_and_mismatch() {
        let mut rng = rng::seeded(1);
        let src = random_params(&mut rng, 4, 10, 2);
        let cfg = SaeTrainConfig {
            latent_size: 10,
            k: 2,
            init: SaeInit::FromParams(Box::new(src.clone())),
            ..SaeTrainConfig::default()
        };
        let p = init_sae(&cfg, 4).unwrap();
        let x = rng::gaussian_mat(&mut rng, 8, 4, 1.0);
        assert_eq!(sae_forward(&x, &p).unwrap(), sae_forward(&x, &src).unwrap());
        assert!(matches!(init_sae(&cfg, 5), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_predictor_has_unit_fuv() {
        let mut rng = rng::seeded(2);
        let x = rng::gaussian_mat(&mut rng, 100, 3, 1.0);
        let p = SaeParams {
            w_e: Mat::zeros(3, 4),
            b_e: Vector::zeros(4),
            w_d: Mat::zeros(4, 3),
            b_d: linalg::col_means(&x),
            activation: Activation::TopK(1),
        };
        let m = eval_sae(&p, [x]).unwrap();
        assert!((m.fuv - 1.0).abs() < 1e-12);
        assert_eq!(m.l0, 0.0);
        assert_eq!(m.dead_fraction, 1.0);
        assert!(eval_sae(&p, std::iter::empty()).is_err());
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut rng = rng::seeded(3);
        let cfg = SaeTrainConfig {
            latent_size: 8,
            k: 2,
            ..SaeTrainConfig::default()
        };
        let p0 = init_sae(&cfg, 4).unwrap();
        let mut t = SaeTrainer::new(p0.clone(), 0.0, LrSchedule::Constant, 10).unwrap();
        for _ in 0..5 {
            t.step(&rng::gaussian_mat(&mut rng, 16, 4, 1.0)).unwrap();
        }
        assert!((&t.params.w_e - &p0.w_e).abs().max() == 0.0);
        assert!((&t.params.w_d - &p0.w_d).abs().max() < 1e-15);
    }

    #[test]
    fn bundle_round_trip() {
        let mut rng = rng::seeded(4);
        let p = random_params(&mut rng, 3, 5, 2);
        let mut attrs = BTreeMap::new();
        attrs.insert("source_model".to_string(), Value::from("synth-A"));
        let (back, back_attrs) = SaeParams::from_bundle(&p.to_bundle(&attrs)).unwrap();
        assert_eq!(back_attrs, attrs);
        assert_eq!(back.activation, Activation::TopK(2));
        assert!((back.w_d - p.w_d).abs().max() < 1e-6);
    }
}
