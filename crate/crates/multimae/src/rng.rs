//! Seedable, cross-platform random number generation.
//!
//! The generator is xoshiro256++ seeded through the SplitMix64 finalizer, both
//! public-domain algorithms with well-defined 64-bit semantics on every
//! platform. All randomness in the crate flows through [`Rng`] so that a run
//! is a pure function of its seed.
//!
//! Stream splitting rule: independent streams are derived with
//! [`Rng::stream`] from `(base_seed, tags...)`, where the tags name the
//! consumer, e.g. `(seed, [STREAM_MASK, step, sample])` for the mask plan of
//! one sample in one step. Folding the tags through the SplitMix64 mixer makes
//! the derivation order-sensitive and collision-resistant for practical use.

/// SplitMix64 finalizer; bijective 64-bit mixer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags for the documented splitting rule.
pub mod streams {
    /// Mask-plan sampling, tagged per (step, sample slot).
    pub const MASK: u64 = 1;
    /// Data augmentation, tagged per (step, sample slot).
    pub const AUGMENT: u64 = 2;
    /// Batch-order shuffling, tagged per epoch.
    pub const ORDER: u64 = 3;
    /// Parameter initialization.
    pub const INIT: u64 = 4;
    /// Synthetic scene generation, tagged per sample id.
    pub const SCENE: u64 = 5;
}

/// Fold `(seed, tags...)` into a single derived seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = mix(seed ^ 0xa076_1d64_78bd_642f);
    for &t in tags {
        acc = mix(acc ^ mix(t));
    }
    acc
}

/// xoshiro256++ generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    /// Seed the four state words by walking SplitMix64 from `seed`.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut next = || {
            sm = sm.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        };
        let s = [next(), next(), next(), next()];
        Rng { s }
    }

    /// Derive an independent stream from `(seed, tags...)`.
    pub fn stream(seed: u64, tags: &[u64]) -> Self {
        Rng::from_seed(derive_seed(seed, tags))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe under `ln`.
    pub fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) without modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bool_with(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller (cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Standard normal truncated to [-2, 2] by rejection.
    pub fn truncated_normal(&mut self) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z;
            }
        }
    }

    /// Gamma(alpha, 1) via Marsaglia-Tsang squeeze; alpha < 1 is boosted
    /// through Gamma(alpha + 1) * U^(1/alpha).
    pub fn gamma(&mut self, alpha: f64) -> f64 {
        assert!(alpha > 0.0, "gamma requires alpha > 0");
        if alpha < 1.0 {
            let boost = self.gamma(alpha + 1.0);
            let u = self.next_f64_open();
            return boost * u.powf(1.0 / alpha);
        }
        let d = alpha - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = (1.0 + c * x).powi(3);
            if v <= 0.0 {
                continue;
            }
            let u = self.next_f64_open();
            if u < 1.0 - 0.0331 * x.powi(4) {
                return d * v;
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Partial Fisher-Yates: k distinct values from [0, n), returned sorted.
    pub fn sample_without_replacement(&mut self, k: usize, n: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from [0, {n})");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        let mut picked: Vec<usize> = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
