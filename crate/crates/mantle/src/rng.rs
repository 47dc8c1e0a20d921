//! Seeded random streams.
//!
//! Every random decision in the crate draws from a ChaCha20 generator so
//! that a run is fully determined by its seed. Independent concerns get
//! independent streams (ChaCha's 64-bit stream id) derived from one root
//! seed; this keeps, say, parameter initialization stable when the number
//! of draws made by the data generator changes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stream ids for the fixed purposes a run draws randomness for.
///
/// The numeric values are part of the reproducibility contract: changing
/// them changes every artifact produced from a given seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Network parameter initialization.
    Init = 1,
    /// Synthetic dataset construction.
    Data = 2,
    /// Training-time draws: batch shuffling and reparameterization noise.
    Train = 3,
    /// Latent sampling for generation commands.
    Sample = 4,
    /// Auxiliary draws in tests and oracles.
    Test = 5,
}

/// ChaCha20 generator for `seed`, positioned on the given purpose stream.
pub fn stream(seed: u64, purpose: Stream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Stream::Init).random();
        let b: u64 = stream(7, Stream::Init).random();
        let c: u64 = stream(7, Stream::Data).random();
        let d: u64 = stream(8, Stream::Init).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
