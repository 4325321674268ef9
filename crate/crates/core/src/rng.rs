//! Seed derivation and random draws.
//!
//! A master seed is split into independent per-component streams by hashing
//! `(master, component)` through SplitMix64. Each stream seeds a ChaCha8
//! generator, so changing how one component consumes randomness never shifts
//! another component's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::Mat;

pub type SwepRng = ChaCha8Rng;

/// Consumers of randomness that get their own stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Data,
    Init,
    Noise,
    Dropout,
    Shuffle,
    Subsample,
    Analysis,
}

impl Component {
    fn tag(self) -> u64 {
        match self {
            Component::Data => 1,
            Component::Init => 2,
            Component::Noise => 3,
            Component::Dropout => 4,
            Component::Shuffle => 5,
            Component::Subsample => 6,
            Component::Analysis => 7,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn component_seed(master: u64, component: Component) -> u64 {
    splitmix64(splitmix64(master) ^ component.tag().wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn component_rng(master: u64, component: Component) -> SwepRng {
    SwepRng::seed_from_u64(component_seed(master, component))
}

pub fn seeded(seed: u64) -> SwepRng {
    SwepRng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.random::<f64>())
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    standard_normal(rng, rows, cols) * std
}
