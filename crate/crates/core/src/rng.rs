//! Counter-based seeded randomness.
//!
//! Draws are a pure function of (seed, counter): the integer stream is
//! bit-identical across platforms, and normal deviates (Box–Muller over the
//! counter stream) match to within 1 ulp, since only `ln`/`sqrt`/`cos` touch
//! libm. No platform sampler is involved.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// A statistically independent stream derived from (seed, label).
    /// Pure function of its inputs, so named sub-streams are reproducible
    /// no matter how much the parent stream has been consumed.
    pub fn derive(&self, label: u64) -> Rng {
        Rng {
            seed: mix(self.seed ^ mix(label.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller; consumes two uniforms per draw and
    /// discards the sine partner so the stream position stays predictable.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]: keeps ln away from 0
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal with mean 0 and standard deviation `sigma`, sampled as
    /// `sigma * standard_normal` so scaling the deviation rescales the
    /// stream exactly.
    pub fn normal(&mut self, sigma: f64) -> f64 {
        sigma * self.standard_normal()
    }

    /// Uniform integer in [0, bound) via rejection; exact and portable.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "Rng::below requires a positive bound");
        let bound = bound as u64;
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// Seeded Fisher–Yates permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}
