//! Counter-based random stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(seed, stream kind, epoch, draw index)`. Streams are independent of
//! call order and of how many values earlier epochs consumed, so a batch
//! can be re-drawn for a given epoch (backtracking bumps the draw index)
//! without disturbing any other stream, and two runs with the same seed
//! produce bit-identical sample sequences.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Independent stream families. The discriminant is folded into the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Channel gains used to build per-epoch sample batches (and the
    /// Monte-Carlo proxies, which must share the batch stream so that a
    /// proxy over the same count reproduces the batch exactly).
    ChannelBatch,
    /// Everything the plant simulator consumes: slot channel gains,
    /// success coins, process noise.
    Plant,
    /// Probe points for constant estimation (curvature, drift).
    Probe,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::ChannelBatch => 1,
            StreamKind::Plant => 2,
            StreamKind::Probe => 3,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the ChaCha stream for `(seed, kind, epoch, draw)`.
pub fn stream(seed: u64, kind: StreamKind, epoch: u64, draw: u64) -> ChaCha12Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    // Absorb the key tuple, then squeeze four words. SplitMix is a
    // bijective mixer, so distinct tuples give distinct states.
    for v in [kind.tag(), epoch, draw] {
        let mixed = splitmix64(&mut state);
        state ^= v.wrapping_mul(0xD134_2543_DE82_EF95) ^ mixed;
    }
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Exponential draw with the given mean, by inverse CDF. Uses exactly one
/// uniform per draw, so sample streams extend deterministically when a
/// larger count is requested from the same stream.
pub fn sample_exp<R: rand::Rng>(rng: &mut R, mean: f64) -> f64 {
    let u: f64 = rng.random();
    -mean * (1.0 - u).ln()
}
