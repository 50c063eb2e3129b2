//! Deterministic pseudo-randomness.
//!
//! Every stochastic operation in this crate takes an explicit [`Prng`]; there
//! is no global generator. The generator is SplitMix64 (Steele et al., the
//! seeder behind `java.util.SplittableRandom`): a single `u64` of state, so a
//! generator mid-stream can be persisted in a checkpoint and restored exactly.
//!
//! Normal deviates use Box-Muller. Each call consumes exactly two uniforms
//! and uses only the cosine branch — slightly wasteful, but the generator
//! state stays a bare `u64` (no cached spare), which keeps resume-from-
//! checkpoint bit-exact.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 generator with explicit, persistable state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn seed(seed: u64) -> Self {
        Prng { state: seed }
    }

    /// Derive an independent child generator for a named substream.
    /// `derive(seed, a)` and `derive(seed, b)` are decorrelated for `a != b`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut p = Prng::seed(seed ^ stream.wrapping_mul(GOLDEN));
        // burn one output so adjacent streams do not share their first value
        p.next_u64();
        p
    }

    /// Split off an independent child generator, advancing `self`.
    pub fn split(&mut self) -> Prng {
        Prng::seed(self.next_u64())
    }

    /// Raw generator state, for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    /// Restore a generator from checkpointed state.
    pub fn from_state(state: u64) -> Self {
        Prng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // 53 uniform bits are plenty for the small n used here
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal deviate via Box-Muller (cosine branch).
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1]: avoids ln(0)
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Vector of standard normal deviates.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Seed from OS entropy (time + pid). Used only when the caller did not
    /// supply a seed; the chosen value is reported so runs can be replayed.
    pub fn entropy_seed() -> u64 {
        use std::time::{SystemTime, UNIX_EPOCH};
        let t = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default();
        let mut p = Prng::seed(t.as_nanos() as u64 ^ (std::process::id() as u64) << 32);
        p.next_u64()
    }
}
