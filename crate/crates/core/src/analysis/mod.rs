// SPDX-License-Identifier: MIT OR Apache-2.0

//! Downstream uses of (transferred) features: sparse probing, steering
//! vectors, attribution correlation, structural/semantic labels, and
//! entropy-feature scoring.

pub mod attribution;
pub mod features;
pub mod probe;
pub mod steering;

pub use attribution::{attribution_correlation, AttributionInputs, TokenSet};
pub use features::{classify_semantic_structural, FeatureKind, FeatureLabel, NullSpace};
pub use probe::{eval_probe, select_features, train_probe, ProbeConfig, ProbeSpec};
pub use steering::{apply_clamp, compute_steering_vector, relative_transfer_gap, SteeringVector};
