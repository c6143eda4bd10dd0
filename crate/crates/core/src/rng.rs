//! Reproducible random streams.
//!
//! Every stochastic quantity is drawn from a ChaCha stream addressed by
//! `(seed, domain, index)`. ChaCha is counter based, so a path's stream does
//! not depend on how many other paths were generated before it or on which
//! thread produced it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tags keeping unrelated draws on disjoint streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Paths = 1,
    Probes = 2,
    InitialPoints = 3,
    Invariant = 4,
    TestPoints = 5,
    Transitions = 6,
    Refinement = 7,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for item `index` of the given domain.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let key = mix(seed ^ mix(domain as u64).rotate_left(17));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

pub fn normal<R: rand::Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Fill `out` with independent N(0, var) draws.
pub fn fill_normal<R: rand::Rng>(rng: &mut R, std_dev: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = std_dev * normal(rng);
    }
}

/// Uniform point in the Euclidean ball of radius `radius` around `center`.
pub fn uniform_ball<R: rand::Rng>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    ball_point(rng, center, radius, 1.0 / center.len() as f64)
}

/// Point in the ball whose radius is uniform on `[0, radius]`.
pub fn uniform_radius_ball<R: rand::Rng>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    ball_point(rng, center, radius, 1.0)
}

fn ball_point<R: rand::Rng>(rng: &mut R, center: &[f64], radius: f64, exponent: f64) -> Vec<f64> {
    let n = center.len();
    let mut dir = vec![0.0; n];
    let mut norm = 0.0;
    while norm < 1e-300 {
        fill_normal(rng, 1.0, &mut dir);
        norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let u: f64 = rng.random();
    let r = radius * u.powf(exponent);
    center
        .iter()
        .zip(&dir)
        .map(|(c, d)| c + r * d / norm)
        .collect()
}
