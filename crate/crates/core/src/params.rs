//! Named parameter blocks and deterministic initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};

/// Seeded source for weight initialization.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(lo..hi)).collect()
    }

    /// Glorot-uniform for a `fan_in -> fan_out` map.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Vec<f64> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(fan_in * fan_out, -a, a)
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Something that owns named `f64` blocks in a fixed order.
pub trait Blocks {
    fn blocks(&self) -> Vec<(String, &Vec<f64>)>;
    fn blocks_mut(&mut self) -> Vec<(String, &mut Vec<f64>)>;

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, v)| v.len()).sum()
    }
}

/// Puts every block on the tape, as trainable leaves or as constants.
pub fn bind<B: Blocks + ?Sized>(tape: &mut Tape, params: &B, trainable: bool) -> Vec<Var> {
    params
        .blocks()
        .into_iter()
        .map(|(_, v)| {
            if trainable {
                tape.param(v.clone())
            } else {
                tape.constant(v.clone())
            }
        })
        .collect()
}
