//! Counter-based pseudo random numbers.
//!
//! Output `i` (starting at 1) of a stream is `splitmix64(seed + i * 0x9E3779B97F4A7C15)`,
//! so every value is a pure function of `(seed, i)` and identical on every
//! platform. Normal samples come from Box–Muller on consecutive pairs of
//! outputs: the pair `(u1, u2)` taken from outputs `2j+1, 2j+2` yields
//! `r·cos θ` for element `2j` and `r·sin θ` for element `2j+1` in row-major
//! order, with `u1 ∈ (0, 1]` and `u2 ∈ [0, 1)`. An odd trailing sine is dropped.
//! The transcendental functions come from `libm` so results do not depend on
//! the platform math library.

use alloc::vec::Vec;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a parent seed and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_add(1).wrapping_mul(GAMMA)))
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * INV_2_53
    }

    /// Uniform in `(0, 1]`.
    fn uniform_open_zero(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * INV_2_53
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open_zero();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }

    /// One standard normal sample (consumes a full Box–Muller pair).
    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    /// `len` samples from `Normal(mean, stddev)` in stream order.
    pub fn normals(&mut self, len: usize, mean: f64, stddev: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(len + 1);
        while out.len() < len {
            let (a, b) = self.normal_pair();
            out.push(mean + stddev * a);
            if out.len() < len {
                out.push(mean + stddev * b);
            }
        }
        out
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
