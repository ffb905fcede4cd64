//! Counter-based random streams.
//!
//! Every normal deviate used by the particle engines is a pure function of
//! `(seed, particle, step, channel)`. The key of a ChaCha8 generator is derived
//! from `(seed, channel)`, the particle index selects the 64-bit stream, and the
//! step index selects one 64-byte block inside that stream. A block yields eight
//! standard normals through the Box–Muller transform, so results never depend on
//! thread scheduling or on how many deviates other particles consumed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of normal deviates produced per `(particle, step, channel)` block.
pub const NORMALS_PER_BLOCK: usize = 8;

const WORDS_PER_BLOCK: u128 = 16;

/// Independent noise sources. Each channel uses a distinct generator key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Initial-condition draws.
    Init,
    /// Brownian motion driving the X (position) coordinate.
    B,
    /// Brownian motion driving the Y coordinate, or the moderated particles.
    W,
    /// Resampling indices for bootstrap standard errors.
    Bootstrap,
    /// Randomized test data (symbol-bound probes, spot checks).
    Aux,
}

impl Channel {
    fn tag(self) -> u64 {
        match self {
            Channel::Init => 0x494e_4954,
            Channel::B => 0x4252_4f57_4e42,
            Channel::W => 0x4252_4f57_4e57,
            Channel::Bootstrap => 0x424f_4f54,
            Channel::Aux => 0x4155_58,
        }
    }
}

fn key(seed: u64, channel: Channel) -> [u8; 32] {
    let mut k = [0u8; 32];
    k[..8].copy_from_slice(&seed.to_le_bytes());
    k[8..16].copy_from_slice(&channel.tag().to_le_bytes());
    k[16..24].copy_from_slice(&0x6d63_6b65_616e_u64.to_le_bytes());
    k
}

/// A generator positioned at the start of `particle`'s stream on `channel`.
///
/// Used for variable-length draws (initial conditions, bootstrap indices).
pub fn stream_rng(seed: u64, particle: u64, channel: Channel) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(key(seed, channel));
    rng.set_stream(particle);
    rng
}

fn unit_open(word: u64) -> f64 {
    // (0, 1]: never zero, so ln() is finite.
    ((word >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

fn box_muller(w1: u64, w2: u64) -> (f64, f64) {
    let r = (-2.0 * unit_open(w1).ln()).sqrt();
    let theta = std::f64::consts::TAU * unit_open(w2);
    (r * theta.cos(), r * theta.sin())
}

/// Eight standard normal deviates for `(seed, particle, step, channel)`.
pub fn rng_stream(seed: u64, particle: u64, step: u64, channel: Channel) -> [f64; NORMALS_PER_BLOCK] {
    let mut rng = ChaCha8Rng::from_seed(key(seed, channel));
    rng.set_stream(particle);
    rng.set_word_pos(step as u128 * WORDS_PER_BLOCK);
    normals_from(&mut rng)
}

fn normals_from(rng: &mut ChaCha8Rng) -> [f64; NORMALS_PER_BLOCK] {
    let mut out = [0.0; NORMALS_PER_BLOCK];
    for pair in out.chunks_exact_mut(2) {
        let (a, b) = box_muller(rng.next_u64(), rng.next_u64());
        pair[0] = a;
        pair[1] = b;
    }
    out
}

/// Per-particle generators advanced one block per step.
///
/// Produces exactly the same deviates as [`rng_stream`] but reuses ChaCha's
/// internal multi-block buffer, which matters when every particle draws at
/// every step. Steps must be requested in increasing order starting at
/// `first_step`.
pub struct ParticleStreams {
    rngs: Vec<ChaCha8Rng>,
}

impl ParticleStreams {
    pub fn new(seed: u64, stream_ids: &[u64], channel: Channel, first_step: u64) -> Self {
        let base = ChaCha8Rng::from_seed(key(seed, channel));
        let rngs = stream_ids
            .iter()
            .map(|&id| {
                let mut rng = base.clone();
                rng.set_stream(id);
                rng.set_word_pos(first_step as u128 * WORDS_PER_BLOCK);
                rng
            })
            .collect();
        Self { rngs }
    }

    pub fn len(&self) -> usize {
        self.rngs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rngs.is_empty()
    }

    /// Deviates of the next block for particle `i`.
    pub fn next_block(&mut self, i: usize) -> [f64; NORMALS_PER_BLOCK] {
        normals_from(&mut self.rngs[i])
    }

    pub fn streams_mut(&mut self) -> &mut [ChaCha8Rng] {
        &mut self.rngs
    }
}

/// Draws the next block from an already positioned generator.
pub fn next_block(rng: &mut ChaCha8Rng) -> [f64; NORMALS_PER_BLOCK] {
    normals_from(rng)
}

/// The first `k` deviates of the next block (the remaining words of the block
/// are skipped, so stream alignment with [`rng_stream`] is kept).
pub fn next_normals(rng: &mut ChaCha8Rng, k: usize) -> [f64; NORMALS_PER_BLOCK] {
    let mut out = [0.0; NORMALS_PER_BLOCK];
    let pairs = k.div_ceil(2).min(NORMALS_PER_BLOCK / 2);
    for p in 0..pairs {
        let (a, b) = box_muller(rng.next_u64(), rng.next_u64());
        out[2 * p] = a;
        out[2 * p + 1] = b;
    }
    for _ in 2 * pairs..WORDS_PER_BLOCK as usize / 2 {
        rng.next_u64();
    }
    out
}

/// Uniform on (0, 1] from a raw word.
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    unit_open(rng.next_u64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_inputs_same_output() {
        assert_eq!(rng_stream(7, 3, 11, Channel::B), rng_stream(7, 3, 11, Channel::B));
        assert_ne!(rng_stream(7, 3, 11, Channel::B), rng_stream(7, 3, 12, Channel::B));
        assert_ne!(rng_stream(7, 3, 11, Channel::B), rng_stream(7, 4, 11, Channel::B));
        assert_ne!(rng_stream(7, 3, 11, Channel::B), rng_stream(8, 3, 11, Channel::B));
    }

    #[test]
    fn buffered_streams_match_stateless_blocks() {
        let ids: Vec<u64> = (0..5).collect();
        let mut streams = ParticleStreams::new(42, &ids, Channel::W, 3);
        for step in 3..40u64 {
            for (i, &id) in ids.iter().enumerate() {
                assert_eq!(streams.next_block(i), rng_stream(42, id, step, Channel::W));
            }
        }
    }

    #[test]
    fn partial_blocks_keep_alignment() {
        let mut streams = ParticleStreams::new(9, &[4], Channel::B, 0);
        for step in 0..10u64 {
            let full = rng_stream(9, 4, step, Channel::B);
            let k = (step % 4) as usize + 1;
            let part = next_normals(&mut streams.streams_mut()[0], k);
            assert_eq!(&part[..k], &full[..k]);
        }
    }

    #[test]
    fn channels_are_uncorrelated() {
        // 10^6 paired draws; correlation SE is 1/sqrt(n).
        let n_blocks = 125_000u64;
        let (mut sab, mut n) = (0.0, 0.0);
        for p in 0..n_blocks {
            let a = rng_stream(1, p, 0, Channel::B);
            let b = rng_stream(1, p, 0, Channel::W);
            for k in 0..NORMALS_PER_BLOCK {
                sab += a[k] * b[k];
                n += 1.0;
            }
        }
        let corr = sab / n;
        assert!(corr.abs() < 3.0 / n.sqrt(), "corr = {corr}");
    }

    #[test]
    fn standard_normal_moments() {
        let n_blocks = 125_000u64;
        let mut draws = Vec::with_capacity(1_000_000);
        for p in 0..n_blocks {
            draws.extend_from_slice(&rng_stream(99, p, 5, Channel::W));
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean = {mean}");
        // Var of the sample variance of N(0,1) is 2/n.
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "var = {var}");
    }
}
