//! Payment model calibrated on the measured conditional distribution of
//! the payment ratio given the delivered quality.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::economy::{RHO_MIN};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityBin {
    pub label: &'static str,
    pub mean: f64,
    pub std: f64,
}

/// Fail (q = 0), partial (0 < q < 0.5), adequate (0.5 <= q < 1), pass (q = 1).
pub const ORACLE_BINS: [QualityBin; 4] = [
    QualityBin { label: "fail", mean: 0.593, std: 0.189 },
    QualityBin { label: "partial", mean: 0.672, std: 0.213 },
    QualityBin { label: "adequate", mean: 0.868, std: 0.192 },
    QualityBin { label: "pass", mean: 0.980, std: 0.094 },
];

/// Poster that samples a Gaussian per quality bin and clamps into the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePoster {
    pub bins: [(f64, f64); 4],
    pub floor: f64,
}

impl Default for OraclePoster {
    fn default() -> Self {
        Self {
            bins: ORACLE_BINS.map(|b| (b.mean, b.std)),
            floor: RHO_MIN,
        }
    }
}

impl OraclePoster {
    pub fn bin_index(quality: f64) -> usize {
        if quality <= 0.0 {
            0
        } else if quality < 0.5 {
            1
        } else if quality < 1.0 {
            2
        } else {
            3
        }
    }

    pub fn bin_mean(&self, quality: f64) -> f64 {
        self.bins[Self::bin_index(quality)].0
    }

    /// Clamped draw, after adding `shift` to the raw Gaussian sample.
    pub fn decide_payment(&self, quality: f64, shift: f64, rng: &mut SimRng) -> f64 {
        let (mean, std) = self.bins[Self::bin_index(quality)];
        let raw = if std > 0.0 {
            Normal::new(mean, std).expect("finite bin parameters").sample(rng)
        } else {
            mean
        };
        (raw + shift).clamp(self.floor, 1.0)
    }

    /// Noise-free payment: the bin mean, clamped.
    pub fn deterministic_payment(&self, quality: f64, shift: f64) -> f64 {
        (self.bin_mean(quality) + shift).clamp(self.floor, 1.0)
    }
}
