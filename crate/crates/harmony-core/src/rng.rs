//! Deterministic counter-based random generator.
//!
//! Every random draw in this crate comes from this generator so that runs are
//! reproducible from a single `u64` seed. The construction is stateless in
//! the sense that the `i`-th output is a pure function of `(seed, i)`:
//!
//! ```text
//! raw(seed, i) = mix(seed + (i + 1) * 0x9E3779B97F4A7C15)
//! ```
//!
//! where `mix` is the 64-bit finalizer
//!
//! ```text
//! z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//! z ^= z >> 27; z *= 0x94D049BB133111EB;
//! z ^= z >> 31;
//! ```
//!
//! (all operations wrapping). Uniform doubles take the top 53 bits of `raw`;
//! Gaussian draws apply the Box-Muller transform to two consecutive uniforms.
//! Independent substreams are derived by hashing a salt into the seed with
//! the same finalizer. Seeds are stable for one build of this crate on all
//! platforms; they are not intended to be portable to other implementations.

const GAMMA: u64 = 0x9E3779B97F4A7C15;

/// 64-bit avalanche finalizer.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// The `i`-th raw 64-bit output of the stream keyed by `seed`.
#[inline]
pub fn raw(seed: u64, counter: u64) -> u64 {
    mix(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)))
}

/// Derive the seed of an independent substream.
pub fn substream(seed: u64, salt: u64) -> u64 {
    mix(seed ^ mix(salt ^ 0xA0761D6478BD642F))
}

/// Stateful cursor over one stream.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
    spare_gaussian: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            spare_gaussian: None,
        }
    }

    /// Substream cursor; see [`substream`].
    pub fn substream(&self, salt: u64) -> Self {
        Self::new(substream(self.seed, salt))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = raw(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by multiply-shift.
    pub fn next_below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        let x = self.next_u64() as u128;
        ((x * bound as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller on consecutive uniforms. The second
    /// value of each pair is cached, so a single stream yields the sequence
    /// `r0*cos(t0), r0*sin(t0), r1*cos(t1), ...`.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(g) = self.spare_gaussian.take() {
            return g;
        }
        // 1 - u keeps the argument of ln strictly positive.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = crate::math::sqrt(-2.0 * crate::math::ln(u1));
        let theta = 2.0 * crate::math::PI * u2;
        self.spare_gaussian = Some(r * crate::math::sin(theta));
        r * crate::math::cos(theta)
    }

    /// Fill a slice with standard normal draws.
    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.next_gaussian();
        }
    }
}
