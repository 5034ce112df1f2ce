//! Seeded, splittable random streams.
//!
//! Every stochastic operation takes an explicit [`RngStream`]. Streams are
//! ChaCha8 generators keyed by a 64-bit derivation path, so a child stream
//! obtained with [`RngStream::fork`] depends only on the parent's key and the
//! child id, never on how many draws the parent has already made. That is
//! what lets parallel rollouts get independent substreams deterministically.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Vector;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    key: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_key(seed, splitmix64(seed))
    }

    fn with_key(seed: u64, key: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(key);
        inner.set_stream(splitmix64(key ^ 0xA5A5_A5A5_5A5A_5A5A));
        Self { seed, key, inner }
    }

    /// The root seed this stream was derived from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream. Does not advance `self`.
    pub fn fork(&self, id: u64) -> RngStream {
        let key = splitmix64(self.key ^ splitmix64(id.wrapping_mul(0xD6E8_FEB8_6659_FD93)));
        Self::with_key(self.seed, key)
    }

    /// Child stream named by a label, for readable call sites.
    pub fn fork_named(&self, label: &str) -> RngStream {
        let id = label.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
        });
        self.fork(id)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn standard_normal_vec(&mut self, n: usize) -> Vector {
        Vector::from_iterator(n, (0..n).map(|_| self.standard_normal()))
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi > lo {
            lo + (hi - lo) * self.inner.random::<f64>()
        } else {
            lo
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
