//! Deterministic random streams.
//!
//! One `RngStream` per purpose (parameter init, mixing plans, Gumbel noise,
//! data order), each derived from the master seed and a fixed label so that
//! adding draws to one stream never perturbs another. The generator is
//! xoshiro256++ seeded through splitmix64, which keeps runs bit-reproducible
//! across platforms.

/// FNV-1a 64-bit hash, used to fold stream labels into the seed.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 state walker (seeding and label derivation only).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
}

/// xoshiro256++ stream with label-derived seeding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    s: [u64; 4],
}

impl RngStream {
    /// Derive a stream from the master seed and a purpose label.
    pub fn new(master_seed: u64, label: &str) -> Self {
        let mut sm = SplitMix64::new(master_seed ^ fnv1a64(label.as_bytes()));
        let mut s = [sm.next_u64(), sm.next_u64(), sm.next_u64(), sm.next_u64()];
        if s == [0, 0, 0, 0] {
            s[0] = 1; // xoshiro state must not be all-zero
        }
        RngStream { s }
    }

    /// Restore a stream from a saved state (checkpoint round trip).
    pub fn from_state(s: [u64; 4]) -> Self {
        RngStream { s }
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Modulo reduction; the bias is far below
    /// anything observable at the stream lengths used here.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Approximate standard normal via Irwin–Hall (sum of 12 uniforms minus 6).
    /// Uses only IEEE add/mul, so sampled values are bit-identical on every
    /// platform — generated corpora can be pinned as golden files.
    pub fn normal(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.uniform();
        }
        acc - 6.0
    }

    /// Standard Gumbel(0, 1) sample.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().max(1e-12);
        -(-u.ln()).ln()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// A random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

/// The fixed stream labels used by the pipeline.
pub mod labels {
    pub const INIT: &str = "init";
    pub const MIXING: &str = "mixing";
    pub const GUMBEL: &str = "gumbel";
    pub const DATA: &str = "data";
}
