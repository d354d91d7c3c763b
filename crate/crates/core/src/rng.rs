//! Seeded substreams.
//!
//! Every random draw is keyed by `(seed, sample index, timestep, purpose)`.
//! Each key maps to its own ChaCha stream, so the order in which samples are
//! visited (serial or parallel) never changes the numbers they receive, and a
//! new purpose tag never perturbs draws made under existing tags.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a draw is used for. Distinct tags give independent streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Marginal = 1,
    Step = 2,
    Endpoint = 3,
    Posterior = 4,
    BatchIndex = 5,
    Timestep = 6,
    SelfCondition = 7,
    Init = 8,
    Data = 9,
    Split = 10,
    MonteCarlo = 11,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes two words into one; used to fold extra key material into a seed.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(17))
}

/// Derives the independent stream for one `(seed, sample, t, purpose)` key.
pub fn substream(seed: u64, sample: u64, t: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    let mut h = splitmix64(seed);
    for (i, word) in [sample, t, purpose as u64, 0x5EED].into_iter().enumerate() {
        h = splitmix64(h ^ word.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        bytes[i * 8..(i + 1) * 8].copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Source of the standard-normal perturbations used by the samplers.
///
/// `Zero` replaces every draw with 0, which turns each stochastic operation
/// into its mean path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    Zero,
    Seeded(u64),
}

impl Noise {
    /// Fills `out` with standard-normal draws for one key.
    pub fn fill(&self, out: &mut [f64], sample: u64, t: u64, purpose: Purpose) {
        match *self {
            Noise::Zero => out.fill(0.0),
            Noise::Seeded(seed) => {
                let mut rng = substream(seed, sample, t, purpose);
                for v in out.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
        }
    }

    /// A derived noise source, e.g. one per training step.
    pub fn derive(&self, key: u64) -> Noise {
        match *self {
            Noise::Zero => Noise::Zero,
            Noise::Seeded(seed) => Noise::Seeded(mix(seed, key)),
        }
    }
}
