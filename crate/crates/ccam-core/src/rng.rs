//! Deterministic counter-based random number generator.
//!
//! Every source of randomness in this crate goes through [`CounterRng`], a
//! SplitMix64 generator: the n-th output is `mix64(seed + n * GAMMA)`, a pure
//! function of the seed and a 64-bit counter. That makes streams trivially
//! reproducible across runs and platforms (the mixer is integer-only) and lets
//! independent substreams be derived by re-keying with [`CounterRng::derive`].

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalization mixer from SplitMix64.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 counter generator.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed, counter: 0 }
    }

    /// Independent substream keyed by `stream`. Streams derived with distinct
    /// tags from the same parent seed are decorrelated by the mixer.
    pub fn derive(&self, stream: u64) -> CounterRng {
        CounterRng::new(mix64(self.seed ^ mix64(stream.wrapping_mul(GAMMA) ^ 0xA5A5_A5A5_A5A5_A5A5)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 24 bits of mantissa (exact in f32).
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Uniform integer in [0, n). Uses the multiply-high reduction; the bias
    /// for n << 2^64 is negligible for this crate's purposes.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (computed in f64, returned as f32).
    pub fn normal(&mut self) -> f32 {
        let u1 = ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample an index from a probability vector by CDF scan. The final
    /// bucket absorbs any rounding slack so the draw always lands.
    pub fn categorical(&mut self, probs: &[f32]) -> usize {
        debug_assert!(!probs.is_empty());
        let u = self.next_f32();
        let mut acc = 0.0f32;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}
