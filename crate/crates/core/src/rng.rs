//! Counter-based randomness keyed by `(seed, iteration, prompt, draw)`.
//!
//! Every draw is addressed independently, so the value a sampler sees never
//! depends on evaluation order or on how work is split across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Address of a single random draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DrawKey {
    pub seed: u64,
    pub iteration: u64,
    pub prompt: u64,
    pub draw: u64,
}

impl DrawKey {
    pub fn new(seed: u64, iteration: u64, prompt: u64, draw: u64) -> Self {
        Self {
            seed,
            iteration,
            prompt,
            draw,
        }
    }

    pub fn with_draw(self, draw: u64) -> Self {
        Self { draw, ..self }
    }

    fn generator(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.iteration.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.prompt);
        // one u64 = two 32-bit words
        rng.set_word_pos(u128::from(self.draw) * 2);
        rng
    }

    /// Raw 64 random bits for this address.
    pub fn bits(&self) -> u64 {
        self.generator().next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&self) -> f64 {
        (self.bits() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Seeded sequential generator for instance construction (random games,
/// token MDPs, property tests).
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
