// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-dictionary worlds.
//!
//! A world fixes a sparse dictionary on the A side and an affine embedding
//! of A's space into B's. Sampling draws sparse non-negative codes `z`,
//! builds `h_A = z · dict_A + noise` and `h_B = h_A · embed + offset + noise`,
//! so the exact stitch is known in closed form and every downstream pipeline
//! has a ground truth to be checked against.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::sae::{Activation, SaeParams};
use crate::stitch::Stitch;
use crate::tensor_store::{ActivationShard, ShardMeta};
use crate::{linalg, rng, Error, Mat, Result, Vector};

/// Parameters of a planted world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub d_a: usize,
    pub d_b: usize,
    pub m_true: usize,
    pub noise_sigma: f64,
    /// Expected number of active features per token.
    pub sparsity: f64,
    /// Orthonormal dictionary rows (requires `m_true <= d_a`). Makes the
    /// tied dictionary SAE an exact autoencoder on noise-free data.
    pub orthogonal_dict: bool,
    pub vocab: u32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d_a: 32,
            d_b: 64,
            m_true: 64,
            noise_sigma: 0.0,
            sparsity: 4.0,
            orthogonal_dict: false,
            vocab: 256,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_a == 0 || self.d_b == 0 {
            return Err(Error::Validation("dimensions must be positive".into()));
        }
        if self.d_a > self.d_b {
            return Err(Error::Validation(format!(
                "d_a ({}) must not exceed d_b ({})",
                self.d_a, self.d_b
            )));
        }
        if self.m_true == 0 {
            return Err(Error::Validation("m_true must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation("noise_sigma must be finite and >= 0".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= self.m_true as f64) {
            return Err(Error::Validation(format!(
                "sparsity must lie in (0, m_true = {}]",
                self.m_true
            )));
        }
        if self.orthogonal_dict && self.m_true > self.d_a {
            return Err(Error::Validation(
                "orthogonal_dict requires m_true <= d_a".into(),
            ));
        }
        if self.vocab == 0 {
            return Err(Error::Validation("vocab must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedWorld {
    pub config: WorldConfig,
    /// `m_true × d_a`, unit rows.
    pub dict_a: Mat,
    /// `d_a × d_b`, orthonormal rows.
    pub embed: Mat,
    /// Length `d_b`.
    pub offset: Vector,
    pub seed: u64,
}

/// Mean and standard deviation of the (folded) active magnitude.
pub const MAGNITUDE_MEAN: f64 = 1.0;
pub const MAGNITUDE_STD: f64 = 0.25;

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<PlantedWorld> {
    config.validate()?;
    let mut rng = rng::seeded(rng::substream(seed, "world"));
    let dict_a = if config.orthogonal_dict {
        let q = linalg::orthonormal_columns(rng::gaussian_mat(&mut rng, config.d_a, config.m_true, 1.0));
        q.transpose()
    } else {
        let mut d = rng::gaussian_mat(&mut rng, config.m_true, config.d_a, 1.0);
        linalg::normalize_rows(&mut d);
        d
    };
    let q = linalg::orthonormal_columns(rng::gaussian_mat(&mut rng, config.d_b, config.d_a, 1.0));
    let embed = q.transpose();
    let offset_std = 1.0 / (config.d_b as f64).sqrt();
    let offset = Vector::from_iterator(config.d_b, (0..config.d_b).map(|_| offset_std * rng::normal(&mut rng)));
    Ok(PlantedWorld {
        config: config.clone(),
        dict_a,
        embed,
        offset,
        seed,
    })
}

/// Paired shards plus the codes that generated them.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub a: ActivationShard,
    pub b: ActivationShard,
    /// `n_tokens × m_true` ground-truth codes.
    pub codes: Mat,
}

/// Labeled examples for sparse probing and steering.
#[derive(Debug, Clone)]
pub struct ProbeTask {
    pub sample: PairSample,
    pub labels: Vec<bool>,
    /// `(first row, row count)` of each example.
    pub spans: Vec<(usize, usize)>,
    pub feature: usize,
}

/// Prompt groups: one original plus variants per group, sharing a planted
/// set of group-invariant features.
#[derive(Debug, Clone)]
pub struct AugmentedGroups {
    pub sample: PairSample,
    /// `groups[g][v] = (first row, row count)` of variant `v` in group `g`.
    pub groups: Vec<Vec<(usize, usize)>>,
    pub structural: Vec<usize>,
}

impl PlantedWorld {
    pub fn gate_probability(&self) -> f64 {
        self.config.sparsity / self.config.m_true as f64
    }

    /// The stitch that realizes the world exactly:
    /// `P↑ = embed`, `b↑ = offset`, `P↓ = embedᵀ`, `b↓ = −offset · embedᵀ`.
    pub fn exact_stitch(&self) -> Stitch {
        let p_down = self.embed.transpose();
        let b_down = -(self.offset.transpose() * &p_down).transpose();
        Stitch::new(self.embed.clone(), self.offset.clone(), p_down, b_down, 0.0)
            .expect("world shapes are consistent")
    }

    /// Tied SAE whose decoder is the planted dictionary on A.
    pub fn dictionary_sae_a(&self, k: usize) -> SaeParams {
        let m = self.config.m_true;
        SaeParams {
            w_e: self.dict_a.transpose(),
            b_e: Vector::zeros(m),
            w_d: self.dict_a.clone(),
            b_d: Vector::zeros(self.config.d_a),
            activation: Activation::TopK(k.min(m)),
        }
    }

    /// The same dictionary expressed in B's space (ground-truth SAE on B).
    pub fn dictionary_sae_b(&self, k: usize) -> SaeParams {
        let m = self.config.m_true;
        let w_d = &self.dict_a * &self.embed;
        let w_e = w_d.transpose();
        let b_e = -(self.offset.transpose() * &w_e).transpose();
        SaeParams {
            w_e,
            b_e,
            w_d,
            b_d: self.offset.clone(),
            activation: Activation::TopK(k.min(m)),
        }
    }

    /// Unembedding matrices `(W_U^A, W_U^B)` of shape `d × vocab` whose
    /// logits agree through the embedding: `W_U^B = embedᵀ · W_U^A`.
    pub fn unembeddings(&self, seed: u64) -> (Mat, Mat) {
        let mut rng = rng::seeded(rng::substream(seed, "unembed"));
        let v = self.config.vocab as usize;
        let ua = rng::gaussian_mat(&mut rng, self.config.d_a, v, 1.0 / (self.config.d_a as f64).sqrt());
        let ub = self.embed.transpose() * &ua;
        (ua, ub)
    }

    fn draw_magnitude(rng: &mut rng::Rng) -> f64 {
        (MAGNITUDE_MEAN + MAGNITUDE_STD * rng::normal(rng)).abs()
    }

    /// Core sampler: `gate(row, feature)` overrides the base gate
    /// probability, `shift` is added to clean A activations.
    fn sample_with(
        &self,
        n_tokens: usize,
        seed: u64,
        gate: impl Fn(usize, usize) -> Option<f64>,
        shift: Option<&Vector>,
    ) -> Result<PairSample> {
        if n_tokens == 0 {
            return Err(Error::InvalidArgument("n_tokens must be at least 1".into()));
        }
        let cfg = &self.config;
        let p = self.gate_probability();
        let mut rng = rng::seeded(rng::substream(seed, "sample"));
        let mut codes = Mat::zeros(n_tokens, cfg.m_true);
        for t in 0..n_tokens {
            for f in 0..cfg.m_true {
                let pf = gate(t, f).unwrap_or(p);
                if pf > 0.0 && rng.random::<f64>() < pf {
                    codes[(t, f)] = Self::draw_magnitude(&mut rng);
                }
            }
        }
        let mut h_a = &codes * &self.dict_a;
        if let Some(s) = shift {
            linalg::add_row_bias(&mut h_a, s);
        }
        let sigma = cfg.noise_sigma;
        if sigma > 0.0 {
            h_a += rng::gaussian_mat(&mut rng, n_tokens, cfg.d_a, sigma);
        }
        let mut h_b = &h_a * &self.embed;
        linalg::add_row_bias(&mut h_b, &self.offset);
        if sigma > 0.0 {
            h_b += rng::gaussian_mat(&mut rng, n_tokens, cfg.d_b, sigma);
        }
        let ids: Vec<u32> = (0..n_tokens).map(|_| rng.random_range(0..cfg.vocab)).collect();
        let meta = |name: &str| ShardMeta {
            model_name: name.into(),
            source_corpus: format!("planted-world:{}", self.seed),
            ..ShardMeta::default()
        };
        let mut a = ActivationShard::from_mat(&h_a, meta("synth-A"))?;
        let mut b = ActivationShard::from_mat(&h_b, meta("synth-B"))?;
        a.token_ids.clone_from(&ids);
        b.token_ids = ids;
        Ok(PairSample { a, b, codes })
    }

    pub fn sample_pair(&self, n_tokens: usize, seed: u64) -> Result<PairSample> {
        self.sample_with(n_tokens, seed, |_, _| None, None)
    }

    /// Like [`sample_pair`](Self::sample_pair) with a constant shift added to
    /// the clean A activations (a second "cluster", e.g. another language).
    pub fn sample_shifted_pair(&self, n_tokens: usize, shift_a: &Vector, seed: u64) -> Result<PairSample> {
        if shift_a.len() != self.config.d_a {
            return Err(Error::shape("shift must have length d_a"));
        }
        self.sample_with(n_tokens, seed, |_, _| None, Some(shift_a))
    }

    /// Binary concept task: in positive examples `feature` fires with
    /// probability `positive_rate` per token, in negatives at the base rate.
    pub fn sample_probe_task(
        &self,
        n_examples: usize,
        tokens_per_example: usize,
        feature: usize,
        positive_rate: f64,
        seed: u64,
    ) -> Result<ProbeTask> {
        if feature >= self.config.m_true {
            return Err(Error::InvalidArgument(format!("feature {feature} out of range")));
        }
        if n_examples < 2 || tokens_per_example == 0 {
            return Err(Error::InvalidArgument(
                "need at least two examples of at least one token".into(),
            ));
        }
        let mut rng = rng::seeded(rng::substream(seed, "labels"));
        let mut labels: Vec<bool> = (0..n_examples).map(|i| i % 2 == 0).collect();
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
        let spans: Vec<(usize, usize)> = (0..n_examples)
            .map(|i| (i * tokens_per_example, tokens_per_example))
            .collect();
        let sample = self.sample_with(
            n_examples * tokens_per_example,
            seed,
            |t, f| (f == feature && labels[t / tokens_per_example]).then_some(positive_rate),
            None,
        )?;
        Ok(ProbeTask {
            sample,
            labels,
            spans,
            feature,
        })
    }

    /// Groups of `variants` prompts each. Every group activates
    /// `per_group` of the `structural` features on all tokens of all its
    /// variants; structural features never fire otherwise.
    pub fn sample_augmented_groups(
        &self,
        n_groups: usize,
        variants: usize,
        tokens_per_variant: usize,
        structural: &[usize],
        per_group: usize,
        seed: u64,
    ) -> Result<AugmentedGroups> {
        if n_groups == 0 || variants == 0 || tokens_per_variant == 0 {
            return Err(Error::InvalidArgument("groups, variants and tokens must be positive".into()));
        }
        if structural.iter().any(|&f| f >= self.config.m_true) || per_group > structural.len() {
            return Err(Error::InvalidArgument("invalid structural feature set".into()));
        }
        let mut rng = rng::seeded(rng::substream(seed, "groups"));
        let chosen: Vec<Vec<usize>> = (0..n_groups)
            .map(|_| {
                let mut s = structural.to_vec();
                rand::seq::SliceRandom::shuffle(s.as_mut_slice(), &mut rng);
                s.truncate(per_group);
                s
            })
            .collect();
        let per_groupt = variants * tokens_per_variant;
        let sample = self.sample_with(
            n_groups * per_groupt,
            seed,
            |t, f| {
                if structural.contains(&f) {
                    Some(if chosen[t / per_groupt].contains(&f) { 1.0 } else { 0.0 })
                } else {
                    None
                }
            },
            None,
        )?;
        let groups = (0..n_groups)
            .map(|g| {
                (0..variants)
                    .map(|v| (g * per_groupt + v * tokens_per_variant, tokens_per_variant))
                    .collect()
            })
            .collect();
        Ok(AugmentedGroups {
            sample,
            groups,
            structural: structural.to_vec(),
        })
    }
}
