// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution correlation between a feature in A and its transferred
//! counterpart in B.
//!
//! A feature's attribution at a token is its activation times the logit its
//! decoder row writes to the realized next token. The score is the Pearson
//! correlation of the A-side and B-side attribution series.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Mat, Result};

/// Row-aligned inputs for a set of features (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionInputs {
    /// `n × F` activations in A.
    pub codes_a: Mat,
    /// `n × F` activations in B.
    pub codes_b: Mat,
    /// `n × F` logit weight of each feature at the realized next token.
    pub logit_weights_a: Mat,
    pub logit_weights_b: Mat,
    pub next_token_ids: Vec<u32>,
}

impl AttributionInputs {
    /// Build inputs from codes over all features, decoder matrices
    /// (`M × d`), unembeddings (`d × vocab`) and the next-token ids.
    #[allow(clippy::too_many_arguments)]
    pub fn from_decoders(
        codes_a: &Mat,
        codes_b: &Mat,
        w_d_a: &Mat,
        w_d_b: &Mat,
        unembed_a: &Mat,
        unembed_b: &Mat,
        next_token_ids: &[u32],
        features: &[usize],
    ) -> Result<Self> {
        let n = next_token_ids.len();
        if codes_a.nrows() != n || codes_b.nrows() != n {
            return Err(Error::shape("codes and next-token ids differ in length"));
        }
        if w_d_a.ncols() != unembed_a.nrows() || w_d_b.ncols() != unembed_b.nrows() {
            return Err(Error::shape("decoder width does not match unembedding rows"));
        }
        let vocab = unembed_a.ncols().min(unembed_b.ncols());
        if let Some(t) = next_token_ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::InvalidArgument(format!("token id {t} outside vocabulary")));
        }
        if let Some(f) = features.iter().find(|&&f| f >= codes_a.ncols() || f >= codes_b.ncols()) {
            return Err(Error::InvalidArgument(format!("feature {f} out of range")));
        }
        let pick = |codes: &Mat, w_d: &Mat, unembed: &Mat| {
            let rows: Vec<usize> = features.to_vec();
            let dec = Mat::from_fn(rows.len(), w_d.ncols(), |i, j| w_d[(rows[i], j)]);
            let logits = dec * unembed; // F × vocab
            let c = Mat::from_fn(n, rows.len(), |t, i| codes[(t, rows[i])]);
            let w = Mat::from_fn(n, rows.len(), |t, i| logits[(i, next_token_ids[t] as usize)]);
            (c, w)
        };
        let (codes_a, logit_weights_a) = pick(codes_a, w_d_a, unembed_a);
        let (codes_b, logit_weights_b) = pick(codes_b, w_d_b, unembed_b);
        Ok(Self {
            codes_a,
            codes_b,
            logit_weights_a,
            logit_weights_b,
            next_token_ids: next_token_ids.to_vec(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.codes_a.ncols()
    }
}

/// Which token positions enter the correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSet {
    All,
    /// Positions where either side fires, plus an equally sized random
    /// sample of positions where neither does.
    ActivePlusSample { seed: u64 },
}

impl Default for TokenSet {
    fn default() -> Self {
        Self::ActivePlusSample { seed: 0 }
    }
}

/// Per-feature Pearson correlation of attribution scores. `None` marks a
/// feature whose series has zero variance on either side.
pub fn attribution_correlation(inputs: &AttributionInputs, tokens: TokenSet) -> Result<Vec<Option<f64>>> {
    let (n, f) = inputs.codes_a.shape();
    for m in [&inputs.codes_b, &inputs.logit_weights_a, &inputs.logit_weights_b] {
        if m.shape() != (n, f) {
            return Err(Error::shape("attribution inputs are not aligned"));
        }
    }
    if inputs.next_token_ids.len() != n {
        return Err(Error::shape("next-token ids are not aligned"));
    }
    Ok((0..f)
        .map(|i| {
            let positions: Vec<usize> = match tokens {
                TokenSet::All => (0..n).collect(),
                TokenSet::ActivePlusSample { seed } => {
                    let (mut active, mut idle): (Vec<usize>, Vec<usize>) =
                        (0..n).partition(|&t| inputs.codes_a[(t, i)] > 0.0 || inputs.codes_b[(t, i)] > 0.0);
                    let mut r = rng::seeded(rng::indexed(seed, i as u64));
                    idle.shuffle(&mut r);
                    idle.truncate(active.len());
                    active.extend(idle);
                    active.sort_unstable();
                    active
                }
            };
            let a: Vec<f64> = positions
                .iter()
                .map(|&t| inputs.codes_a[(t, i)] * inputs.logit_weights_a[(t, i)])
                .collect();
            let b: Vec<f64> = positions
                .iter()
                .map(|&t| inputs.codes_b[(t, i)] * inputs.logit_weights_b[(t, i)])
                .collect();
            crate::linalg::pearson(&a, &b)
        })
        .collect())
}

/// Count of defined scores and of missing ones.
pub fn summarize(scores: &[Option<f64>]) -> (usize, usize) {
    let defined = scores.iter().filter(|s| s.is_some()).count();
    (defined, scores.len() - defined)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(a: &[f64], b: &[f64]) -> AttributionInputs {
        let n = a.len();
        AttributionInputs {
            codes_a: Mat::from_column_slice(n, 1, a),
            codes_b: Mat::from_column_slice(n, 1, b),
            logit_weights_a: Mat::from_element(n, 1, 1.0),
            logit_weights_b: Mat::from_element(n, 1, 1.0),
            next_token_ids: vec![0; n],
        }
    }

    #[test]
    fn identical_and_negated() {
        let a = [0.0, 1.0, 3.0, 0.5, 2.0];
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let same = attribution_correlation(&inputs(&a, &a), TokenSet::All).unwrap();
        assert!((same[0].unwrap() - 1.0).abs() < 1e-12);
        let opp = attribution_correlation(&inputs(&a, &neg), TokenSet::All).unwrap();
        assert!((opp[0].unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_is_missing() {
        let s = attribution_correlation(&inputs(&[0.0; 4], &[1.0, 2.0, 0.0, 1.0]), TokenSet::All).unwrap();
        assert_eq!(s, vec![None]);
        assert_eq!(summarize(&s), (0, 1));
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let mut i = inputs(&[1.0, 2.0], &[1.0, 2.0]);
        i.next_token_ids.push(3);
        assert!(attribution_correlation(&i, TokenSet::All).is_err());
    }
}
