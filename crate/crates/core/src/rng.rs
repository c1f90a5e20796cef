//! Seeded, stream-addressable random number generation.
//!
//! Every noise consumer in the pipeline owns an [`RngStream`] identified by
//! `(seed, stream_id)`. Per-document work derives child streams from the
//! parent identity plus structural tags (iteration, document index), so
//! parallel execution order and thread count never change a trajectory.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic substream of the global seed.
///
/// Same `(seed, stream_id)` yields a bit-identical variate sequence; distinct
/// stream ids yield independent ChaCha8 streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    chacha: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut chacha = ChaCha8Rng::seed_from_u64(seed);
        chacha.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            chacha,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive an independent child stream from structural tags.
    ///
    /// The derivation is a pure function of `(seed, stream_id, tags)`, so it
    /// can be called from any worker at any time.
    pub fn derived(seed: u64, tags: &[u64]) -> Self {
        let mut state = seed ^ 0x6a09_e667_f3bc_c908;
        let mut acc = splitmix64(&mut state);
        for &t in tags {
            state ^= t.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            acc ^= splitmix64(&mut state);
        }
        let child_seed = splitmix64(&mut state);
        RngStream::new(child_seed, acc)
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn open_uniform(&mut self) -> f64 {
        loop {
            let u: f64 = self.chacha.gen();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.chacha.gen()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.chacha)
    }

    pub fn gen_range(&mut self, n: usize) -> usize {
        self.chacha.gen_range(0..n)
    }

    /// Sample `m` distinct indices from `0..n` (partial Fisher-Yates).
    pub fn sample_without_replacement(&mut self, n: usize, m: usize) -> Vec<usize> {
        assert!(m <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = i + self.gen_range(n - i);
            pool.swap(i, j);
        }
        pool.truncate(m);
        pool
    }

    /// Position of the stream, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.chacha.get_word_pos()
    }

    /// Rebuild a stream at an exact saved position.
    pub fn restore(seed: u64, stream_id: u64, word_pos: u128) -> Self {
        let mut s = RngStream::new(seed, stream_id);
        s.chacha.set_word_pos(word_pos);
        s
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.chacha.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.chacha.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.chacha.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.chacha.try_fill_bytes(dest)
    }
}
