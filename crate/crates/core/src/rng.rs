// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`Rng`], a PCG generator with a
//! 64-bit LCG state. Named substreams let one root seed fan out to
//! independent, stable streams per pipeline stage.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = rand_pcg::Pcg32;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derive a child seed for the substream `name` of `root`.
pub fn substream(root: u64, name: &str) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a(name)))
}

/// Derive a child seed from an integer index (epochs, trials).
pub fn indexed(root: u64, index: u64) -> u64 {
    splitmix64(root.wrapping_add(splitmix64(index.wrapping_mul(GOLDEN))))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian matrix with the given standard deviation.
pub fn gaussian_mat(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> crate::Mat {
    // Fill row by row so the draw order matches row-major reading.
    let mut m = crate::Mat::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = std * normal(rng);
        }
    }
    m
}
