//! Uniform `B`-bit scalar quantizer applied to real and imaginary parts.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::linalg::{CMat, C64};

/// Half-width of the granular region in units of the per-satellite scale.
pub const RANGE_SIGMAS: f64 = 3.0;

/// Bins `(e_{b-1}, e_b]` for `b = 1..2^B` with uniform inner thresholds over
/// `[-3 scale, 3 scale]` and unbounded outer bins. Indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub bits: u32,
    pub scale: f64,
}

impl Quantizer {
    pub fn new(bits: u32, scale: f64) -> Result<Self> {
        if bits == 0 || bits > 16 {
            return Err(config_err(format!("quantizer resolution {bits} outside 1..=16 bits")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(config_err("quantizer scale must be positive and finite"));
        }
        Ok(Self { bits, scale })
    }

    /// Scale from the RMS of the real parts of `yf`; an all-zero block gets 1.
    pub fn for_observation(bits: u32, yf: &CMat) -> Result<Self> {
        let n = yf.len().max(1) as f64;
        let rms = (yf.iter().map(|v| v.re * v.re).sum::<f64>() / n).sqrt();
        Self::new(bits, if rms > 0.0 { rms } else { 1.0 })
    }

    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    pub fn step(&self) -> f64 {
        2.0 * RANGE_SIGMAS * self.scale / self.levels() as f64
    }

    fn low_edge(&self) -> f64 {
        -RANGE_SIGMAS * self.scale
    }

    /// Threshold `e_b`, `b = 0..=2^B`.
    pub fn threshold(&self, b: u32) -> f64 {
        if b == 0 {
            f64::NEG_INFINITY
        } else if b >= self.levels() {
            f64::INFINITY
        } else {
            self.low_edge() + b as f64 * self.step()
        }
    }

    pub fn index(&self, x: f64) -> u32 {
        let t = ((x - self.low_edge()) / self.step()).ceil() - 1.0;
        if t.is_nan() {
            return 0;
        }
        t.clamp(0.0, (self.levels() - 1) as f64) as u32
    }

    /// `(lo, hi]` of bin `idx`.
    pub fn bounds(&self, idx: u32) -> (f64, f64) {
        (self.threshold(idx), self.threshold(idx + 1))
    }

    /// Reconstruction point: the centre of the bin on the uniform grid.
    pub fn point(&self, idx: u32) -> f64 {
        self.low_edge() + (idx as f64 + 0.5) * self.step()
    }

    pub fn quantize(&self, v: C64) -> (u32, u32) {
        (self.index(v.re), self.index(v.im))
    }

    pub fn dequantize(&self, idx: (u32, u32)) -> C64 {
        C64::new(self.point(idx.0), self.point(idx.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bit_is_a_sign_quantizer() {
        let q = Quantizer::new(1, 2.0).unwrap();
        assert_eq!(q.threshold(1), 0.0);
        assert_eq!(q.index(-1e-9), 0);
        assert_eq!(q.index(0.0), 0);
        assert_eq!(q.index(1e-9), 1);
        assert_eq!(q.bounds(1), (0.0, f64::INFINITY));
        assert_eq!(q.bounds(0), (f64::NEG_INFINITY, 0.0));
    }

    #[test]
    fn codewords_are_fixed_points() {
        for bits in 1..=8 {
            let q = Quantizer::new(bits, 0.7).unwrap();
            for b in 0..q.levels() {
                let p = q.point(b);
                assert_eq!(q.index(p), b);
                let (lo, hi) = q.bounds(b);
                assert!(p > lo && p <= hi);
            }
        }
    }

    #[test]
    fn fine_quantizer_error_bounded_by_half_step() {
        let q = Quantizer::new(12, 1.0).unwrap();
        let half = q.step() / 2.0;
        let n = 200_000;
        for i in 0..=n {
            let x = -3.0 + 6.0 * i as f64 / n as f64;
            let e = (x - q.point(q.index(x))).abs();
            assert!(e <= half * (1.0 + 1e-9), "{x} {e} {half}");
        }
    }

    #[test]
    fn thresholds_strictly_increase() {
        let q = Quantizer::new(4, 1.3).unwrap();
        for b in 0..q.levels() {
            assert!(q.threshold(b) < q.threshold(b + 1));
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Quantizer::new(0, 1.0).is_err());
        assert!(Quantizer::new(3, 0.0).is_err());
        assert!(Quantizer::new(3, f64::NAN).is_err());
    }

    #[test]
    fn zero_block_gets_unit_scale() {
        let q = Quantizer::for_observation(3, &CMat::zeros(4, 4)).unwrap();
        assert_eq!(q.scale, 1.0);
    }
}
