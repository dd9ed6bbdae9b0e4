//! Seeded, splittable random streams.
//!
//! Backed by ChaCha20, a counter-based generator, so streams are bit-identical
//! across platforms. Floating-point transforms use `libm` for the same reason.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Identifier of the generator algorithm, echoed into reports.
pub const RNG_ALGORITHM: &str = "chacha20-splitmix64-streams";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Clone, Debug)]
pub struct RngState {
    spec: RngSpec,
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a label, used to derive child streams.
fn label_hash(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::from_spec(RngSpec { seed, stream: 0 })
    }

    pub fn from_spec(spec: RngSpec) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(spec.seed);
        inner.set_stream(spec.stream);
        Self {
            spec,
            inner,
            spare_normal: None,
        }
    }

    pub fn spec(&self) -> RngSpec {
        self.spec
    }

    /// An independent stream derived from this one's seed and a label.
    ///
    /// The child depends only on `(seed, stream, label)`, never on how many
    /// values the parent has drawn.
    pub fn split(&self, label: &str) -> Self {
        let stream = splitmix64(self.spec.stream ^ label_hash(label));
        Self::from_spec(RngSpec {
            seed: self.spec.seed,
            stream,
        })
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal sample (Box-Muller, pairs cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
