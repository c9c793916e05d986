//! Sub-seed derivation for reproducible parallel sampling.
//!
//! Every randomized stage owns a base seed and derives one sub-seed per work
//! item (calibration index, perturbation index, restart, run). Work items can
//! then be processed in any order, on any number of threads, and the output is
//! still bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout the crate. ChaCha8 is platform-stable, so seeded
/// streams are bit-identical across architectures.
pub(crate) type Rng = ChaCha8Rng;

/// Stage tags keep sub-seed streams from different pipeline stages disjoint
/// even when they share a base seed and index.
///
/// Public so external tooling can reproduce any intermediate draw of a run
/// from its base seed alone.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stage {
    DataGen = 1,
    CalNoise = 2,
    CalScoreU = 3,
    EvalNoise = 4,
    EvalSetU = 5,
    Attack = 6,
    Run = 7,
    BatchScoreU = 8,
    Concentration = 9,
}

/// Derive a sub-seed from `(seed, tag, index)` with SplitMix64-style mixing.
///
/// The mix is bijective per stage, so distinct `(tag, index)` pairs under one
/// base seed give distinct sub-seeds.
pub fn subseed(seed: u64, tag: u64, index: u64) -> u64 {
    mix(seed ^ mix(tag.wrapping_mul(0x9e3779b97f4a7c15) ^ mix(index)))
}

pub(crate) fn stage_rng(seed: u64, stage: Stage, index: u64) -> Rng {
    Rng::seed_from_u64(subseed(seed, stage as u64, index))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
