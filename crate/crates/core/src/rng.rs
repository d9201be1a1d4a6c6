//! Seed schedules and replayable Gaussian streams.
//!
//! Every random quantity in a run is a pure function of `(seed, index)`:
//!
//! ```text
//! uniform_k(seed) = mix64(seed + (k + 1) * GOLDEN)     (SplitMix64, counter form)
//! normal pair j   = Box-Muller(uniform_{2j}, uniform_{2j+1}), cos output first
//! derive(base, t) = mix64(base ^ (t * GOLDEN))
//! ```
//!
//! The counter form makes streams seekable in O(1), so a perturbation can be
//! re-drawn at any point without replaying earlier draws. These constants are
//! part of the report format: changing them changes every recorded run.

use std::f64::consts::TAU;

/// `2^64 / φ`, the SplitMix64 increment.
pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer. A bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Domain tags used to split one user seed into independent schedules.
pub mod domain {
    pub const PERTURBATION: u64 = 0x7065_7274_7572_6221;
    pub const BATCH: u64 = 0x6261_7463_6821_2121;
    pub const FACTORS: u64 = 0x6661_6374_6f72_7321;
    pub const INIT: u64 = 0x696e_6974_2121_2121;
    pub const TRIALS: u64 = 0x7472_6961_6c73_2121;
    pub const SWEEP: u64 = 0x7377_6565_7021_2121;
    pub const PROBLEM: u64 = 0x7072_6f62_6c65_6d21;
}

/// Deterministic per-iteration seeds `ζ_t`.
///
/// `derive` is injective in `t` for a fixed base: multiplication by an odd
/// constant, xor with a constant and `mix64` are all bijections on `u64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedSchedule {
    base_seed: u64,
}

impl SeedSchedule {
    pub const fn new(base_seed: u64) -> Self {
        Self { base_seed }
    }

    pub const fn base_seed(&self) -> u64 {
        self.base_seed
    }

    #[inline]
    pub fn derive(&self, t: u64) -> u64 {
        mix64(self.base_seed ^ t.wrapping_mul(GOLDEN))
    }

    /// An independent schedule for another purpose (batches, factors, ...).
    pub fn child(&self, tag: u64) -> SeedSchedule {
        SeedSchedule::new(mix64(self.base_seed.wrapping_add(mix64(tag))))
    }
}

/// Free-function form of [`SeedSchedule::derive`].
pub fn derive_seed(schedule: &SeedSchedule, t: u64) -> u64 {
    schedule.derive(t)
}

/// Counter-based uniform generator.
#[derive(Clone, Debug)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    #[inline]
    pub fn bits_at(seed: u64, k: u64) -> u64 {
        mix64(seed.wrapping_add(k.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let x = Self::bits_at(self.seed, self.counter);
        self.counter = self.counter.wrapping_add(1);
        x
    }

    /// Uniform on `(0, 1]` with 53 bits of resolution.
    #[inline]
    pub fn next_open01(&mut self) -> f64 {
        to_open01(self.next_u64())
    }

    /// Uniform integer in `0..n` (multiply-shift; bias is below 2^-40 for desk sizes).
    #[inline]
    pub fn next_below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

#[inline]
fn to_open01(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Replayable stream of standard normal draws.
///
/// Draw `c` is the `c % 2` output of Box-Muller pair `c / 2`, so the stream
/// can be positioned anywhere with [`GaussianStream::seek`].
#[derive(Clone, Debug)]
pub struct GaussianStream {
    seed: u64,
    cursor: u64,
    cached: Option<(u64, f64)>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, cursor: 0, cached: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn seek(&mut self, cursor: u64) {
        self.cursor = cursor;
    }

    fn pair(&self, j: u64) -> (f64, f64) {
        let u1 = to_open01(CounterRng::bits_at(self.seed, 2 * j));
        let u2 = to_open01(CounterRng::bits_at(self.seed, 2 * j + 1));
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = TAU * u2;
        (radius * angle.cos(), radius * angle.sin())
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        let c = self.cursor;
        self.cursor += 1;
        if let Some((at, z)) = self.cached.take() {
            if at == c {
                return z;
            }
        }
        let (z0, z1) = self.pair(c / 2);
        if c.is_multiple_of(2) {
            self.cached = Some((c + 1, z1));
            z0
        } else {
            z1
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.next_normal();
        }
    }

    /// Next `k` draws. `k = 0` yields an empty vector.
    pub fn sample_normal_vec(&mut self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; k];
        self.fill_normal(&mut v);
        v
    }

    /// Skip `k` draws without generating them.
    pub fn skip(&mut self, k: u64) {
        self.cursor += k;
    }
}
