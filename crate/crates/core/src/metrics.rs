//! Per-trial error metrics.

use crate::linalg::{frobenius_sq, to_db, CMat};

/// Reported NMSE for an exact estimate.
pub const NMSE_FLOOR_DB: f64 = -120.0;

/// NMSE over the concatenation of the per-satellite estimates.
pub fn nmse_db(estimates: &[CMat], truth: &[CMat]) -> f64 {
    let err: f64 = estimates.iter().zip(truth).map(|(e, t)| frobenius_sq(&(e - t))).sum();
    let energy: f64 = truth.iter().map(frobenius_sq).sum();
    if energy == 0.0 {
        return if err == 0.0 { NMSE_FLOOR_DB } else { f64::INFINITY };
    }
    to_db(err / energy, NMSE_FLOOR_DB).max(NMSE_FLOOR_DB)
}

/// Fraction of users whose activity decision disagrees with the truth.
pub fn aep(estimate: &[bool], truth: &[bool]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    estimate.iter().zip(truth).filter(|(a, b)| a != b).count() as f64 / truth.len() as f64
}

/// AEP averaged over the satellites' individual decisions.
pub fn aep_per_satellite(estimates: &[Vec<bool>], truth: &[bool]) -> f64 {
    if estimates.is_empty() {
        return 0.0;
    }
    estimates.iter().map(|e| aep(e, truth)).sum::<f64>() / estimates.len() as f64
}

/// Bit errors of detected active users plus every bit of missed active
/// users, over all transmitted bits. False alarms do not count. `None` when
/// nobody transmitted.
///
/// `sent[k]` holds user `k`'s bits (empty for inactive users); `decoded`
/// pairs a user index with its hard decisions.
pub fn ber(sent: &[Vec<u8>], active: &[usize], decoded: &[(usize, &[u8])]) -> Option<f64> {
    let total: usize = active.iter().map(|&k| sent[k].len()).sum();
    if total == 0 {
        return None;
    }
    let mut errors = 0usize;
    for &k in active {
        match decoded.iter().find(|(u, _)| *u == k) {
            Some((_, bits)) => errors += sent[k].iter().zip(bits.iter()).filter(|(a, b)| a != b).count(),
            None => errors += sent[k].len(),
        }
    }
    Some(errors as f64 / total as f64)
}
