//! SplitMix64, the single source of randomness for parameter init, test
//! adapters and sampled decoding. Kept in-tree because bit-exact output is
//! part of the parameter checksum contract.

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi], rounded to f32.
    pub fn uniform_f32(&mut self, lo: f32, hi: f32) -> f32 {
        let u = self.next_f64();
        let v = lo as f64 + (hi as f64 - lo as f64) * u;
        (v as f32).clamp(lo, hi)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // multiply-shift; bias is negligible for the small ranges used here
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }
}
