//! Counter-based random substreams.
//!
//! Every random quantity in a run is addressed by a path of integers
//! (seed, domain, window, iteration, phase, sample, user, ...). The path is
//! hashed into a 64-bit key which either seeds a ChaCha stream or is turned
//! directly into a uniform variate. Batch items therefore never share state
//! and can be evaluated in any order or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep substreams of different subsystems apart.
pub mod domain {
    pub const CHANNEL: u64 = 0x11;
    pub const LARGE_SCALE: u64 = 0x12;
    pub const USV: u64 = 0x21;
    pub const URA: u64 = 0x31;
    pub const TRAFFIC: u64 = 0x41;
    pub const ASSIGN: u64 = 0x42;
    pub const TOPOLOGY: u64 = 0x43;
    pub const BUS: u64 = 0x51;
    pub const TRAIN: u64 = 0x61;
    pub const SYNTHETIC: u64 = 0x71;
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a seed and a path into a 64-bit key.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed), |acc, &p| {
        mix64(acc ^ mix64(p.wrapping_add(0x632B_E59B_D9B4_E019)))
    })
}

/// Independent ChaCha stream for the given path.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// Uniform variate in [0, 1) addressed by a path (53 bits of precision).
pub fn uniform(seed: u64, path: &[u64]) -> f64 {
    (derive(seed, path) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Phase of a batch inside one solver iteration.
pub mod phase {
    /// Batch drawn with the base-point probabilities.
    pub const ANCHOR: u64 = 0;
    /// Batch drawn with the intermediate-point probabilities.
    pub const MAIN: u64 = 1;
    /// Monte-Carlo evaluation at residual checkpoints.
    pub const CHECKPOINT: u64 = 2;
    /// Single batch of the projected-ascent baseline.
    pub const BASELINE: u64 = 3;
    /// Offline diagnostics and benchmarks.
    pub const DIAGNOSTIC: u64 = 4;
}

/// Address of one batch of samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BatchKey {
    pub seed: u64,
    pub window: u64,
    pub iteration: u64,
    pub phase: u64,
}

impl BatchKey {
    pub fn new(seed: u64, window: u64, iteration: u64, phase: u64) -> Self {
        Self {
            seed,
            window,
            iteration,
            phase,
        }
    }

    /// Stream used to draw the channel of sample `j`.
    pub fn channel_rng(&self, j: usize) -> ChaCha8Rng {
        substream(
            self.seed,
            &[domain::CHANNEL, self.window, self.iteration, self.phase, j as u64],
        )
    }

    /// Stream for any other per-sample randomness, separated by `tag`.
    pub fn sample_rng(&self, j: usize, tag: u64) -> ChaCha8Rng {
        substream(
            self.seed,
            &[tag, self.window, self.iteration, self.phase, j as u64],
        )
    }

    /// Activation coin of `user` in sample `j`. Each user owns its coin, so a
    /// user can draw it locally without seeing anybody else's state.
    pub fn coin(&self, j: usize, user: usize) -> f64 {
        uniform(
            self.seed,
            &[
                domain::USV,
                self.window,
                self.iteration,
                self.phase,
                j as u64,
                user as u64,
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn paths_are_order_sensitive() {
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(8, &[1]));
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
    }

    #[test]
    fn uniform_is_in_unit_interval_and_roughly_flat() {
        let n = 20_000;
        let mut mean = 0.0;
        for i in 0..n {
            let u = uniform(3, &[i]);
            assert!((0.0..1.0).contains(&u));
            mean += u;
        }
        mean /= n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn substreams_repeat() {
        let a: Vec<u32> = substream(1, &[4, 5]).random_iter().take(4).collect();
        let b: Vec<u32> = substream(1, &[4, 5]).random_iter().take(4).collect();
        assert_eq!(a, b);
    }
}
