//! Multi-satellite cooperation: activity voting, stacked LS detection over
//! all satellites, and detection from quantized backhaul.

pub mod backhaul;
pub mod dequant;
pub mod quantizer;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::detect::{demap_users, freq_channel, Equalized};
use crate::error::{input_err, Result};
use crate::frame::FrameConfig;
use crate::linalg::{CMat, C64, ZERO};
use crate::rng::{complex_normal, derive_seed, rng_from_seed};

pub use dequant::{run_bayes_dequant, DequantConfig, DequantOutput, StackedObservation};
pub use quantizer::Quantizer;

/// `active_k = 1` iff at least half of the satellites report user `k`.
pub fn majority_vote(per_satellite: &[Vec<bool>]) -> Result<Vec<bool>> {
    let q = per_satellite.len();
    let k = per_satellite.first().map(|v| v.len()).ok_or_else(|| input_err("majority vote needs at least one satellite"))?;
    if per_satellite.iter().any(|v| v.len() != k) {
        return Err(input_err("activity vectors differ in length"));
    }
    Ok((0..k)
        .map(|u| {
            let votes = per_satellite.iter().filter(|v| v[u]).count();
            2 * votes >= q
        })
        .collect())
}

/// What one edge satellite hands to the central node for one frame.
#[derive(Debug, Clone)]
pub struct SatelliteReport {
    /// Cleaned frequency-domain observation `[N x N_r]`.
    pub yf: CMat,
    /// Delay-domain channel estimate `[K L x N_r]`.
    pub h: CMat,
    /// The satellite's own activity decisions.
    pub active: Vec<bool>,
}

/// Per-subcarrier channel of one satellite for the fused user list. Users the
/// satellite did not detect were not cancelled there and get zero columns.
pub fn satellite_freq_channel(report: &SatelliteReport, users: &[usize], l: usize, n: usize) -> Vec<CMat> {
    let mut h = report.h.clone();
    for (k, &a) in report.active.iter().enumerate() {
        if !a {
            h.rows_mut(k * l, l).fill(ZERO);
        }
    }
    freq_channel(&h, users, l, n)
}

/// Row-stack per-satellite channels into `[Q N_r x U]` per subcarrier.
pub fn stack_channels(per_sat: &[Vec<CMat>]) -> Vec<CMat> {
    let n = per_sat.first().map_or(0, |v| v.len());
    (0..n)
        .map(|sc| {
            let rows: usize = per_sat.iter().map(|s| s[sc].nrows()).sum();
            let u = per_sat[0][sc].ncols();
            let mut out = CMat::zeros(rows, u);
            let mut r0 = 0;
            for s in per_sat {
                out.view_mut((r0, 0), (s[sc].nrows(), u)).copy_from(&s[sc]);
                r0 += s[sc].nrows();
            }
            out
        })
        .collect()
}

/// Row-stack per-satellite observations into `[N x Q N_r]`.
pub fn stack_observations(per_sat: &[&CMat]) -> CMat {
    let n = per_sat.first().map_or(0, |m| m.nrows());
    let cols: usize = per_sat.iter().map(|m| m.ncols()).sum();
    let mut out = CMat::zeros(n, cols);
    let mut c0 = 0;
    for m in per_sat {
        out.view_mut((0, c0), (n, m.ncols())).copy_from(m);
        c0 += m.ncols();
    }
    out
}

/// LS solve of the stacked system on every occupied subcarrier.
pub fn stacked_ls(yf: &CMat, hf: &[CMat], occupied: &[bool]) -> Result<Equalized> {
    crate::detect::per_subcarrier_ls(yf, hf, occupied, crate::detect::Equalizer::ZeroForcing, 0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoopDetection {
    pub users: Vec<usize>,
    pub bits: Vec<Vec<u8>>,
    pub rank_deficient: usize,
}

/// Cooperative LS detection with perfect backhaul.
pub fn cooperative_ls(reports: &[SatelliteReport], fused: &[bool], cfg: &FrameConfig) -> Result<CoopDetection> {
    let users: Vec<usize> = fused.iter().enumerate().filter(|(_, &a)| a).map(|(k, _)| k).collect();
    if users.is_empty() {
        return Ok(CoopDetection { users, bits: Vec::new(), rank_deficient: 0 });
    }
    let per_sat: Vec<Vec<CMat>> =
        reports.iter().map(|r| satellite_freq_channel(r, &users, cfg.max_delay, cfg.data_len)).collect();
    let hf = stack_channels(&per_sat);
    let obs: Vec<&CMat> = reports.iter().map(|r| &r.yf).collect();
    let yf = stack_observations(&obs);
    let eq = stacked_ls(&yf, &hf, &cfg.occupied())?;
    Ok(CoopDetection { bits: demap_users(&eq.x, cfg), users, rank_deficient: eq.rank_deficient })
}

/// Correlation magnitude between two users' stacked channels with equal
/// angle offset `delta_theta` at every satellite.
///
/// Uses the Lagrange identity so that `c = 1` exactly when the gain vectors
/// are parallel (always the case for one satellite).
pub fn correlation_coefficient(b1: &[Complex64], b2: &[Complex64], nr: usize, delta_theta: f64) -> f64 {
    let e1: f64 = b1.iter().map(|v| v.norm_sqr()).sum();
    let e2: f64 = b2.iter().map(|v| v.norm_sqr()).sum();
    if e1 == 0.0 || e2 == 0.0 {
        return 0.0;
    }
    let mut cross = 0.0;
    for i in 0..b1.len() {
        for j in i + 1..b1.len() {
            cross += (b1[i] * b2[j] - b1[j] * b2[i]).norm_sqr();
        }
    }
    let gain = (1.0 - cross / (e1 * e2)).max(0.0).sqrt();
    let half = delta_theta / 2.0;
    let array = if half.sin().abs() < 1e-12 { 1.0 } else { ((nr as f64 * half).sin() / (nr as f64 * half.sin())).abs() };
    gain * array
}

/// Monte Carlo samples of the two-user correlation with i.i.d. unit gains.
pub fn correlation_study(q: usize, nr: usize, delta_theta: f64, trials: usize, seed: u64) -> Vec<f64> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(seed, &[q as u64, t as u64]));
            let b1: Vec<C64> = (0..q).map(|_| complex_normal(&mut rng, 1.0)).collect();
            let b2: Vec<C64> = (0..q).map(|_| complex_normal(&mut rng, 1.0)).collect();
            correlation_coefficient(&b1, &b2, nr, delta_theta)
        })
        .collect()
}

/// Sample median (mean of the two middle values for even counts).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{detect_frame, DetectConfig};
    use crate::scene::steering_from_frequencies;

    fn random_gains(q: usize, rng: &mut crate::rng::SimRng) -> Vec<C64> {
        (0..q).map(|_| complex_normal(rng, 1.0)).collect()
    }

    #[test]
    fn vote_cases() {
        let v = |rows: &[&[bool]]| majority_vote(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        assert_eq!(v(&[&[true], &[true], &[false]]), vec![true]);
        assert_eq!(v(&[&[true], &[false], &[false]]), vec![false]);
        assert_eq!(v(&[&[true], &[false]]), vec![true]);
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn correlation_single_satellite_is_one() {
        let mut rng = rng_from_seed(3);
        for _ in 0..1000 {
            let (a, b) = (random_gains(1, &mut rng), random_gains(1, &mut rng));
            assert_eq!(correlation_coefficient(&a, &b, 16, 0.0), 1.0);
        }
    }

    #[test]
    fn correlation_matches_direct_formula() {
        let mut rng = rng_from_seed(4);
        for q in 2..6 {
            let (a, b) = (random_gains(q, &mut rng), random_gains(q, &mut rng));
            let num: C64 = a.iter().zip(&b).map(|(x, y)| x.conj() * y).sum();
            let den = (a.iter().map(|v| v.norm_sqr()).sum::<f64>() * b.iter().map(|v| v.norm_sqr()).sum::<f64>()).sqrt();
            let dt = 0.3;
            let af = ((8.0 * dt / 2.0_f64).sin() / (8.0 * (dt / 2.0_f64).sin())).abs();
            let want = num.norm() / den * af;
            let got = correlation_coefficient(&a, &b, 8, dt);
            assert!((got - want).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn correlation_median_falls_with_more_satellites() {
        let meds: Vec<f64> = [1, 2, 3, 5].iter().map(|&q| median(&correlation_study(q, 16, 0.0, 2000, 7))).collect();
        assert_eq!(meds[0], 1.0);
        assert!(meds.windows(2).all(|w| w[1] < w[0]), "{meds:?}");
    }

    fn rank1_user(theta: f64, gain: C64, nr: usize) -> CMat {
        let a = steering_from_frequencies(theta, 0.0, nr, 1);
        CMat::from_fn(nr, 1, |i, _| a[i] * gain)
    }

    #[test]
    fn identical_angles_become_separable_with_three_satellites() {
        let mut rng = rng_from_seed(5);
        let nr = 8;
        for _ in 0..20 {
            let per_sat: Vec<Vec<CMat>> = (0..3)
                .map(|q| {
                    let theta = 0.4 + q as f64;
                    let mut h = CMat::zeros(nr, 2);
                    h.set_column(0, &rank1_user(theta, complex_normal(&mut rng, 1.0), nr).column(0));
                    h.set_column(1, &rank1_user(theta, complex_normal(&mut rng, 1.0), nr).column(0));
                    vec![h]
                })
                .collect();
            let single = per_sat[0][0].singular_values();
            assert!(single[1] / single[0] < 1e-10);
            let stacked = &stack_channels(&per_sat)[0];
            let sv = stacked.singular_values();
            assert!(sv[1] / sv[0] > 1e-6);
        }
    }

    #[test]
    fn single_satellite_coop_equals_local_ls() {
        let mut rng = rng_from_seed(6);
        let cfg = FrameConfig::new(16, 32, 32, 4, 1);
        let users = [0, 2];
        let h = CMat::from_fn(12, 4, |i, _| if i / 4 != 1 { complex_normal(&mut rng, 0.25) } else { ZERO });
        let y = CMat::from_fn(cfg.stream_len(), 4, |_, _| complex_normal(&mut rng, 1.0));
        let bank = crate::frame::TrainingSequenceBank::generate(3, 16, 2);
        let local = detect_frame(&y, &h, &users, &bank, &cfg, 0, 0.1, &DetectConfig::default()).unwrap();
        let yf = crate::detect::clean_frequency_frame(&y, &h, &users, &bank, &cfg, 0).unwrap();
        let report = SatelliteReport { yf, h, active: vec![true, false, true] };
        let coop = cooperative_ls(&[report], &[true, false, true], &cfg).unwrap();
        assert_eq!(coop.bits, local.bits);
    }

    #[test]
    fn noiseless_stacked_system_recovers_symbols() {
        let mut rng = rng_from_seed(8);
        let (n, u) = (6, 3);
        let per_sat: Vec<Vec<CMat>> =
            (0..3).map(|_| (0..n).map(|_| CMat::from_fn(2, u, |_, _| complex_normal(&mut rng, 1.0))).collect()).collect();
        let hf = stack_channels(&per_sat);
        let x = CMat::from_fn(n, u, |_, _| complex_normal(&mut rng, 1.0));
        let yf = CMat::from_fn(n, 6, |sc, r| (hf[sc].row(r) * x.row(sc).transpose())[0]);
        let eq = stacked_ls(&yf, &hf, &[true; 6]).unwrap();
        assert!((&eq.x - &x).norm() < 1e-10);
    }
}
