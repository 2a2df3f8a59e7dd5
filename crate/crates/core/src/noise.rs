//! Counter-addressable Gaussian noise.
//!
//! Every standard normal draw is a pure function of
//! `(seed, path_index, purpose_tag, index)`: the first three select a ChaCha8
//! key, the index selects a 64-bit word of its keystream, and the word is mapped
//! through the inverse normal CDF. Paths can therefore be simulated in any
//! order, on any number of workers, and any draw can be regenerated on its own.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Role of a Brownian driver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PurposeTag(pub u32);

impl PurposeTag {
    /// Fast-process driver `W¹`.
    pub const FAST: PurposeTag = PurposeTag(0);
    /// Slow-process driver `W²`.
    pub const SLOW: PurposeTag = PurposeTag(1);
    /// Extra driver `W̃` of the limiting fluctuation equation.
    pub const LIMIT: PurposeTag = PurposeTag(2);
    /// Initial spread of particle clouds.
    pub const INITIAL: PurposeTag = PurposeTag(3);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub path_index: u64,
    pub tag: PurposeTag,
}

impl NoiseStream {
    pub fn new(seed: u64, path_index: u64, tag: PurposeTag) -> Self {
        Self { seed, path_index, tag }
    }

    fn key(&self) -> [u8; 32] {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.path_index.to_le_bytes());
        key[16..20].copy_from_slice(&self.tag.0.to_le_bytes());
        key[20..28].copy_from_slice(b"slowfast");
        key
    }

    /// Sequential reader positioned at draw index 0.
    pub fn gaussians(&self) -> Gaussians {
        Gaussians {
            rng: ChaCha8Rng::from_seed(self.key()),
        }
    }

    /// Standard normal draw number `index`.
    pub fn normal_at(&self, index: u64) -> f64 {
        let mut g = self.gaussians();
        g.seek(index);
        g.next_normal()
    }
}

/// The pair of identifiers that selects all driver streams of one path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathNoise {
    pub seed: u64,
    pub path_index: u64,
}

impl PathNoise {
    pub fn new(seed: u64, path_index: u64) -> Self {
        Self { seed, path_index }
    }

    pub fn stream(&self, tag: PurposeTag) -> NoiseStream {
        NoiseStream::new(self.seed, self.path_index, tag)
    }
}

pub struct Gaussians {
    rng: ChaCha8Rng,
}

impl Gaussians {
    /// Position the reader so the next draw is number `index`.
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(2 * index as u128);
    }

    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11;
        (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        inverse_normal_cdf(self.next_uniform())
    }

    /// Fill `out` with independent `N(0, variance)` draws where `scale = sqrt(variance)`.
    #[inline]
    pub fn fill_scaled(&mut self, scale: f64, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = scale * self.next_normal();
        }
    }
}

/// Acklam's rational approximation of the standard normal quantile
/// (relative error below 1.2e-9 on (0, 1)).
#[inline]
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p > 1.0 - P_LOW {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}
