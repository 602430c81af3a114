//! Seedable, splittable 64-bit generator.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): state advances by
//! the golden-gamma `0x9E3779B97F4A7C15` and each output is the state passed
//! through the `mix64` finalizer. Sub-streams are derived by hashing a
//! stream name (FNV-1a 64) and an index into the parent seed, so every
//! consumer (training, bootstrap, pairing) can be reproduced independently
//! and in any language from the same base seed.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Child generator for the named stream at `index`. Deterministic in
    /// `(seed, name, index)` and independent of how much the parent has
    /// been consumed.
    pub fn stream(seed: u64, name: &str, index: u64) -> Self {
        let a = mix64(seed ^ fnv1a(name.as_bytes()));
        let b = mix64(a.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))));
        Self::new(b)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by rejection sampling (no modulo bias).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        // Largest multiple of `bound` representable; reject draws above it.
        let zone = u64::MAX - (u64::MAX % bound + 1) % bound;
        loop {
            let r = self.next_u64();
            if r <= zone {
                return r % bound;
            }
        }
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Fisher-Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
