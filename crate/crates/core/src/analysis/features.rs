// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature taxonomy: structural vs. semantic labels from prompt variants,
//! and entropy-feature scoring against the unembedding's null space.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Mat, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Structural,
    Semantic,
    Dead,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Structural => "structural",
            Self::Semantic => "semantic",
            Self::Dead => "dead",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLabel {
    pub feature: usize,
    pub label: FeatureKind,
}

/// Sets of active features per variant: `sets[group][variant]`.
pub type ActivationSets = Vec<Vec<BTreeSet<usize>>>;

/// Collect, for every variant span, the features that fire on any of its
/// tokens.
pub fn activation_sets_from_codes(codes: &Mat, groups: &[Vec<(usize, usize)>]) -> Result<ActivationSets> {
    groups
        .iter()
        .map(|variants| {
            variants
                .iter()
                .map(|&(start, len)| {
                    if start + len > codes.nrows() {
                        return Err(Error::InvalidArgument(format!("variant span ({start}, {len}) out of range")));
                    }
                    let block = codes.rows(start, len);
                    Ok((0..codes.ncols())
                        .filter(|&j| block.column(j).iter().any(|&v| v > 0.0))
                        .collect())
                })
                .collect()
        })
        .collect()
}

/// Structural: in every group where the feature fires at all, it fires in
/// all variants. Dead: never fires. Otherwise semantic.
pub fn classify_semantic_structural(sets: &ActivationSets, n_features: usize) -> Result<Vec<FeatureLabel>> {
    if sets.is_empty() || sets.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("every group needs at least one variant".into()));
    }
    Ok((0..n_features)
        .map(|f| {
            let mut seen = false;
            let mut consistent = true;
            for group in sets {
                let hits = group.iter().filter(|s| s.contains(&f)).count();
                if hits > 0 {
                    seen = true;
                    consistent &= hits == group.len();
                }
            }
            let label = match (seen, consistent) {
                (false, _) => FeatureKind::Dead,
                (true, true) => FeatureKind::Structural,
                (true, false) => FeatureKind::Semantic,
            };
            FeatureLabel { feature: f, label }
        })
        .collect())
}

/// The residual-space directions of smallest unembedding singular value.
#[derive(Debug, Clone)]
pub struct NullSpace {
    /// `d × t` orthonormal basis.
    basis: Mat,
}

/// Share of singular values (by count) treated as the effective null space.
pub const DEFAULT_TAIL_FRACTION: f64 = 0.02;

impl NullSpace {
    /// `unembedding` is `d × vocab`. The tail is the bottom
    /// `ceil(tail_fraction · d)` directions of the residual space, ranked by
    /// singular value (directions beyond the vocabulary size count as zero).
    pub fn from_unembedding(unembedding: &Mat, tail_fraction: f64) -> Result<Self> {
        if !(tail_fraction > 0.0 && tail_fraction < 1.0) {
            return Err(Error::InvalidArgument("tail_fraction must lie in (0, 1)".into()));
        }
        let d = unembedding.nrows();
        if d == 0 || unembedding.ncols() == 0 {
            return Err(Error::shape("empty unembedding"));
        }
        let gram = unembedding * unembedding.transpose();
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let t = ((tail_fraction * d as f64).ceil() as usize).clamp(1, d);
        let cols: Vec<_> = order[..t].iter().map(|&i| eig.eigenvectors.column(i)).collect();
        Ok(Self {
            basis: Mat::from_columns(&cols),
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// `‖proj(row)‖ / ‖row‖` onto the null space.
    pub fn composition(&self, row: &Vector) -> Result<f64> {
        if row.len() != self.basis.nrows() {
            return Err(Error::shape("decoder row width does not match unembedding"));
        }
        let n = row.norm();
        if !(n > 0.0) {
            return Err(Error::InvalidArgument("zero decoder row".into()));
        }
        let coords = self.basis.transpose() * row;
        Ok((coords.norm() / n).min(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyScore {
    /// Norm of the decoder row; stands in for the feature's maximum output
    /// magnitude when activations are not at hand.
    pub max_activation_proxy: f64,
    pub nullspace_composition: f64,
}

pub fn entropy_feature_score(decoder_row: &Vector, unembedding: &Mat, tail_fraction: f64) -> Result<EntropyScore> {
    let ns = NullSpace::from_unembedding(unembedding, tail_fraction)?;
    score_with(&ns, decoder_row)
}

pub fn score_with(ns: &NullSpace, decoder_row: &Vector) -> Result<EntropyScore> {
    Ok(EntropyScore {
        nullspace_composition: ns.composition(decoder_row)?,
        max_activation_proxy: decoder_row.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn labels_partition() {
        let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<usize>>();
        // Feature 0 in every variant of its groups; 1 in one variant; 3 never.
        let sets = vec![
            vec![set(&[0, 1]), set(&[0]), set(&[0, 2])],
            vec![set(&[2]), set(&[]), set(&[2])],
        ];
        let labels = classify_semantic_structural(&sets, 4).unwrap();
        let kinds: Vec<FeatureKind> = labels.iter().map(|l| l.label).collect();
        assert_eq!(
            kinds,
            vec![FeatureKind::Structural, FeatureKind::Semantic, FeatureKind::Semantic, FeatureKind::Dead]
        );
        assert!(classify_semantic_structural(&vec![], 2).is_err());
        assert!(classify_semantic_structural(&vec![vec![]], 2).is_err());
    }

    #[test]
    fn nullspace_extremes() {
        let mut r = rng::seeded(6);
        // Build W_U = U diag(s) Vᵀ with known singular directions.
        let d = 50;
        let u = crate::linalg::orthonormal_columns(rng::gaussian_mat(&mut r, d, d, 1.0));
        let vt = crate::linalg::orthonormal_columns(rng::gaussian_mat(&mut r, 80, d, 1.0)).transpose();
        let s: Vec<f64> = (0..d).map(|i| 10.0 - 0.15 * i as f64).collect();
        let w_u = &u * Mat::from_diagonal(&Vector::from_vec(s)) * vt;
        let ns = NullSpace::from_unembedding(&w_u, 0.02).unwrap();
        assert_eq!(ns.dim(), 1);
        let bottom = u.column(d - 1).into_owned();
        assert!((ns.composition(&(bottom * 3.0)).unwrap() - 1.0).abs() < 1e-9);
        let top = u.column(0).into_owned();
        assert!(ns.composition(&top).unwrap() < 1e-9);
        assert!(ns.composition(&Vector::zeros(d)).is_err());
        let sc = entropy_feature_score(&(u.column(0) * 2.0), &w_u, 0.02).unwrap();
        assert!((sc.max_activation_proxy - 2.0).abs() < 1e-12);
    }
}
