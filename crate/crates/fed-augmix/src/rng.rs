//! Seeded RNG streams. Every stochastic component takes an explicit
//! stream so full runs are reproducible from a single seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Independent substream for a named component of a run.
///
/// Mixes the label and indices into the base seed so distinct
/// (client, round, purpose) triples never share a stream.
pub fn substream(base_seed: u64, label: &str, a: u64, b: u64) -> Rng {
    let mut h: u64 = 0xcbf29ce484222325 ^ base_seed;
    for byte in label.bytes() {
        h = (h ^ byte as u64).wrapping_mul(0x100000001b3);
    }
    h = (h ^ a).wrapping_mul(0x100000001b3);
    h = (h ^ b).wrapping_mul(0x100000001b3);
    ChaCha12Rng::seed_from_u64(h)
}
