//! Single-satellite data detection: training-sequence interference
//! cancellation, cyclic folding and per-subcarrier equalisation.
//!
//! Rows of a frame slice (see [`crate::frame::frame_slice`]) are split as
//! `[non-ISI (G); head (L-1); mid (N-L+1); trail (L-1)]`. Removing the
//! training contribution from head and trail and adding the two turns the
//! data block into a circular convolution with the channel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::frame::{data_scale, FrameConfig, TrainingSequenceBank};
use crate::linalg::{dft_columns, pinv_solve, CMat, C64, ZERO};

/// Singular values below this fraction of the largest are discarded.
pub const PINV_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Equalizer {
    #[default]
    ZeroForcing,
    /// Regularised by `noise_var / data_power`; diagnostics only.
    Mmse,
}

/// Training-only reception `[c, 0_N, c]` through the estimated channel,
/// aligned with [`crate::frame::frame_slice`].
pub fn pseudo_observation(h: &CMat, users: &[usize], bank: &TrainingSequenceBank, cfg: &FrameConfig) -> Result<CMat> {
    let (m, n, l) = (cfg.ts_len, cfg.data_len, cfg.max_delay);
    if h.nrows() != bank.num_users() * l {
        return Err(input_err("channel rows do not match K * L"));
    }
    if bank.len() < m {
        return Err(input_err("training sequences shorter than ts_len"));
    }
    let nr = h.ncols();
    let rows = m + n;
    let mut out = CMat::zeros(rows, nr);
    for &k in users {
        let c = &bank.sequences[k][..m];
        // sample p of [c, 0_N, c]
        let src = |p: usize| -> f64 {
            if p < m {
                c[p]
            } else if p >= m + n && p < 2 * m + n {
                c[p - m - n]
            } else {
                0.0
            }
        };
        for d in 0..l {
            let tap = h.row(k * l + d);
            if tap.iter().all(|v| *v == ZERO) {
                continue;
            }
            for r in 0..rows {
                let p = r + l - 1;
                if p < d {
                    continue;
                }
                let s = src(p - d);
                if s == 0.0 {
                    continue;
                }
                for j in 0..nr {
                    out[(r, j)] += tap[j] * s;
                }
            }
        }
    }
    Ok(out)
}

/// `[head - head_hat + trail - trail_hat; mid]`, an `N`-row block.
pub fn cancel_and_fold(slice: &CMat, pseudo: &CMat, cfg: &FrameConfig) -> Result<CMat> {
    let (g, n, l) = (cfg.nonisi_len(), cfg.data_len, cfg.max_delay);
    let rows = cfg.frame_len();
    if slice.nrows() != rows || pseudo.shape() != slice.shape() {
        return Err(input_err("frame slice and pseudo observation must both be (M+N) x N_r"));
    }
    let nr = slice.ncols();
    let mut out = CMat::zeros(n, nr);
    for r in 0..n {
        for j in 0..nr {
            let mut v = slice[(g + r, j)];
            if r + 1 < l {
                v -= pseudo[(g + r, j)];
                v += slice[(g + n + r, j)] - pseudo[(g + n + r, j)];
            }
            out[(r, j)] = v;
        }
    }
    Ok(out)
}

/// Unitary DFT of the cleaned block along time.
pub fn to_frequency(cleaned: &CMat) -> CMat {
    dft_columns(cleaned, false)
}

/// Per-subcarrier channel `[N_r x U]` for users in `users` (sorted order):
/// the unnormalised `N`-point DFT of each zero-padded impulse response.
pub fn freq_channel(h: &CMat, users: &[usize], l: usize, n: usize) -> Vec<CMat> {
    let nr = h.ncols();
    let u = users.len();
    // [N x (U * N_r)] padded impulse responses, one column per (user, antenna)
    let mut padded = CMat::zeros(n, u * nr);
    for (ui, &k) in users.iter().enumerate() {
        for d in 0..l.min(n) {
            for j in 0..nr {
                padded[(d, ui * nr + j)] = h[(k * l + d, j)];
            }
        }
    }
    let scale = (n as f64).sqrt();
    let f = dft_columns(&padded, false);
    (0..n)
        .map(|sc| CMat::from_fn(nr, u, |j, ui| f[(sc, ui * nr + j)] * scale))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equalized {
    /// `[N x U]` estimated frequency-domain symbols (zero on empty subcarriers).
    pub x: CMat,
    /// Subcarriers whose channel was numerically rank deficient.
    pub rank_deficient: usize,
    pub max_condition: f64,
}

/// Solve `y[n] = H[n] x[n]` on every occupied subcarrier.
pub fn per_subcarrier_ls(
    yf: &CMat,
    hf: &[CMat],
    occupied: &[bool],
    equalizer: Equalizer,
    noise_var: f64,
    data_power: f64,
) -> Result<Equalized> {
    let n = yf.nrows();
    if hf.len() != n || occupied.len() != n {
        return Err(input_err("subcarrier counts disagree"));
    }
    let u = hf.first().map_or(0, |m| m.ncols());
    let solved: Vec<(Vec<C64>, bool, f64)> = (0..n)
        .into_par_iter()
        .map(|sc| {
            if !occupied[sc] || u == 0 {
                return (vec![ZERO; u], false, 1.0);
            }
            let h = &hf[sc];
            let y = yf.row(sc).transpose();
            match equalizer {
                Equalizer::ZeroForcing => {
                    let sol = pinv_solve(h, &CMat::from_column_slice(y.len(), 1, y.as_slice()), PINV_TOL);
                    (sol.x.as_slice().to_vec(), sol.rank < u, sol.condition)
                }
                Equalizer::Mmse => {
                    let reg = if data_power > 0.0 { noise_var / data_power } else { 0.0 };
                    let mut gram = h.adjoint() * h;
                    for i in 0..u {
                        gram[(i, i)] += C64::new(reg, 0.0);
                    }
                    let rhs = h.adjoint() * y;
                    let sol = pinv_solve(&gram, &CMat::from_column_slice(u, 1, rhs.as_slice()), PINV_TOL);
                    (sol.x.as_slice().to_vec(), sol.rank < u, sol.condition)
                }
            }
        })
        .collect();
    let mut x = CMat::zeros(n, u);
    let mut rank_deficient = 0;
    let mut max_condition: f64 = 1.0;
    for (sc, (v, def, cond)) in solved.into_iter().enumerate() {
        for (ui, val) in v.into_iter().enumerate() {
            x[(sc, ui)] = val;
        }
        rank_deficient += def as usize;
        max_condition = max_condition.max(cond);
    }
    Ok(Equalized { x, rank_deficient, max_condition })
}

/// Despread every user's column and take hard decisions.
pub fn demap_users(xf: &CMat, cfg: &FrameConfig) -> Vec<Vec<u8>> {
    let scale = data_scale(cfg);
    xf.column_iter()
        .map(|col| {
            let mut bits = Vec::with_capacity(cfg.bits_per_frame());
            for s in cfg.despread(col.as_slice()) {
                cfg.modulation.demap(s / scale, &mut bits);
            }
            bits
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DetectConfig {
    pub equalizer: Equalizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetection {
    /// Detected users in increasing order.
    pub users: Vec<usize>,
    /// Hard-decided bits per entry of `users`.
    pub bits: Vec<Vec<u8>>,
    pub rank_deficient: usize,
    pub max_condition: f64,
}

/// Cleaned frequency-domain observation of frame `t` at one satellite.
pub fn clean_frequency_frame(
    y: &CMat,
    h: &CMat,
    users: &[usize],
    bank: &TrainingSequenceBank,
    cfg: &FrameConfig,
    t: usize,
) -> Result<CMat> {
    let slice = crate::frame::frame_slice(y, cfg, t)?;
    let pseudo = pseudo_observation(h, users, bank, cfg)?;
    Ok(to_frequency(&cancel_and_fold(&slice, &pseudo, cfg)?))
}

/// Non-cooperative detection of frame `t` using this satellite's own channel
/// estimate and active set.
pub fn detect_frame(
    y: &CMat,
    h: &CMat,
    users: &[usize],
    bank: &TrainingSequenceBank,
    cfg: &FrameConfig,
    t: usize,
    noise_var: f64,
    det: &DetectConfig,
) -> Result<FrameDetection> {
    let yf = clean_frequency_frame(y, h, users, bank, cfg, t)?;
    let hf = freq_channel(h, users, cfg.max_delay, cfg.data_len);
    let eq = per_subcarrier_ls(&yf, &hf, &cfg.occupied(), det.equalizer, noise_var, cfg.data_power)?;
    Ok(FrameDetection {
        users: users.to_vec(),
        bits: demap_users(&eq.x, cfg),
        rank_deficient: eq.rank_deficient,
        max_condition: eq.max_condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{build_stream, frame_slice, modulate, random_bits, receive_noiseless};
    use crate::linalg::{dft, frobenius_sq};
    use crate::rng::{complex_normal, rng_from_seed};
    use crate::scene::ChannelRealization;

    struct Setup {
        bank: TrainingSequenceBank,
        real: ChannelRealization,
        streams: Vec<Vec<C64>>,
        bits: Vec<Vec<Vec<u8>>>,
        data: Vec<Vec<Vec<C64>>>,
    }

    /// `k` users, the first `active` of them transmitting, random `L`-tap
    /// channels at one satellite.
    fn setup(k: usize, active: usize, nr: usize, cfg: FrameConfig, seed: u64) -> Setup {
        let mut rng = rng_from_seed(seed);
        let l = cfg.max_delay;
        let bank = TrainingSequenceBank::generate(k, cfg.ts_len, seed + 7);
        let mut h = CMat::zeros(k * l, nr);
        for u in 0..active {
            for d in 0..l {
                for j in 0..nr {
                    h[(u * l + d, j)] = complex_normal(&mut rng, 1.0 / l as f64);
                }
            }
        }
        let activity: Vec<bool> = (0..k).map(|u| u < active).collect();
        let real = ChannelRealization {
            active_set: (0..active).collect(),
            activity,
            cirm: vec![h],
            angles: Vec::new(),
            cirs: Vec::new(),
            max_delay: l,
        };
        let mut streams = Vec::new();
        let mut bits = Vec::new();
        let mut data = Vec::new();
        for u in 0..k {
            let frames: Vec<_> = (0..cfg.num_frames)
                .map(|_| modulate(&random_bits(cfg.bits_per_frame(), &mut rng), &cfg).unwrap())
                .collect();
            bits.push(frames.iter().map(|f| f.bits.clone()).collect());
            data.push(frames.iter().map(|f| f.data_time.clone()).collect());
            streams.push(build_stream(&bank.sequences[u], &frames, &cfg));
        }
        Setup { bank, real, streams, bits, data }
    }

    fn circular(h: &CMat, user: usize, l: usize, x: &[C64]) -> CMat {
        let n = x.len();
        CMat::from_fn(n, h.ncols(), |r, j| {
            (0..l).map(|d| h[(user * l + d, j)] * x[(r + n - d) % n]).sum()
        })
    }

    #[test]
    fn zero_channel_gives_zero_pseudo_observation() {
        let cfg = FrameConfig::new(20, 32, 32, 4, 1);
        let bank = TrainingSequenceBank::generate(3, 20, 1);
        let p = pseudo_observation(&CMat::zeros(12, 2), &[0, 1, 2], &bank, &cfg).unwrap();
        assert_eq!(p.norm(), 0.0);
    }

    #[test]
    fn pseudo_observation_matches_received_training_pollution() {
        let cfg = FrameConfig::new(20, 32, 32, 5, 2);
        let s = setup(3, 1, 2, cfg.clone(), 3);
        // silence the data so the received frame holds only training
        let zero_frames: Vec<_> = (0..2)
            .map(|_| crate::frame::TspFrame { bits: vec![], symbols: vec![], data_time: vec![ZERO; 32] })
            .collect();
        let streams: Vec<_> = (0..3).map(|u| build_stream(&s.bank.sequences[u], &zero_frames, &cfg)).collect();
        let y = receive_noiseless(&streams, &s.real, 0);
        let p = pseudo_observation(&s.real.cirm[0], &[0], &s.bank, &cfg).unwrap();
        for t in 0..2 {
            let slice = frame_slice(&y, &cfg, t).unwrap();
            assert!((&slice - &p).norm() < 1e-12 * slice.norm());
        }
    }

    #[test]
    fn fold_partition_counts() {
        for (m, n, l) in [(10, 16, 1), (20, 32, 5), (12, 12, 12), (30, 8, 3)] {
            let cfg = FrameConfig::new(m, n, n, l, 1);
            let g = cfg.nonisi_len();
            let head = l - 1;
            let mid = m + n + 2 - g - 2 * l;
            assert_eq!(head + mid + head, m + n - g);
            assert_eq!(head + mid, n);
            let slice = CMat::from_element(m + n, 1, C64::new(1.0, 0.0));
            let out = cancel_and_fold(&slice, &CMat::zeros(m + n, 1), &cfg).unwrap();
            assert_eq!(out.nrows(), n);
        }
    }

    #[test]
    fn no_delay_spread_leaves_data_untouched() {
        let cfg = FrameConfig::new(16, 24, 24, 1, 1);
        let s = setup(2, 2, 3, cfg.clone(), 4);
        let y = receive_noiseless(&s.streams, &s.real, 0);
        let slice = frame_slice(&y, &cfg, 0).unwrap();
        let out = cancel_and_fold(&slice, &CMat::zeros(40, 3), &cfg).unwrap();
        assert_eq!(out, slice.rows(16, 24).into_owned());
    }

    #[test]
    fn perfect_cancellation_gives_circular_convolution() {
        let cfg = FrameConfig::new(24, 32, 32, 6, 2);
        let s = setup(4, 2, 3, cfg.clone(), 5);
        let y = receive_noiseless(&s.streams, &s.real, 0);
        let h = &s.real.cirm[0];
        let pseudo = pseudo_observation(h, &[0, 1], &s.bank, &cfg).unwrap();
        for t in 0..2 {
            let got = cancel_and_fold(&frame_slice(&y, &cfg, t).unwrap(), &pseudo, &cfg).unwrap();
            let want = circular(h, 0, 6, &s.data[0][t]) + circular(h, 1, 6, &s.data[1][t]);
            assert!((&got - &want).norm() <= 1e-10 * want.norm());
        }
    }

    #[test]
    fn training_only_cancels_to_zero() {
        let cfg = FrameConfig::new(24, 32, 32, 6, 1);
        let s = setup(2, 2, 2, cfg.clone(), 6);
        let zero = vec![crate::frame::TspFrame { bits: vec![], symbols: vec![], data_time: vec![ZERO; 32] }];
        let streams: Vec<_> = (0..2).map(|u| build_stream(&s.bank.sequences[u], &zero, &cfg)).collect();
        let y = receive_noiseless(&streams, &s.real, 0);
        let yf = clean_frequency_frame(&y, &s.real.cirm[0], &[0, 1], &s.bank, &cfg, 0).unwrap();
        assert!(yf.norm() < 1e-12);
    }

    #[test]
    fn cancellation_residual_grows_with_channel_error() {
        let cfg = FrameConfig::new(24, 32, 32, 6, 1);
        let s = setup(2, 1, 2, cfg.clone(), 7);
        let zero = vec![crate::frame::TspFrame { bits: vec![], symbols: vec![], data_time: vec![ZERO; 32] }];
        let streams: Vec<_> = (0..2).map(|u| build_stream(&s.bank.sequences[u], &zero, &cfg)).collect();
        let y = receive_noiseless(&streams, &s.real, 0);
        let mut rng = rng_from_seed(70);
        let err = CMat::from_fn(12, 2, |i, _| if i < 6 { complex_normal(&mut rng, 1.0) } else { ZERO });
        let residual = |eps: f64| {
            let h = &s.real.cirm[0] + &err * C64::new(eps, 0.0);
            frobenius_sq(&clean_frequency_frame(&y, &h, &[0], &s.bank, &cfg, 0).unwrap())
        };
        let (r0, r1, r2) = (residual(0.0), residual(1e-3), residual(1e-1));
        assert!(r0 < 1e-20 && r1 > r0 && r2 > r1);
        // the residual is quadratic in the error
        assert!(((r2 / r1) / 1e4 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn delta_channel_is_flat_in_frequency() {
        let mut h = CMat::zeros(4, 1);
        h[(0, 0)] = C64::new(1.0, 0.0);
        let hf = freq_channel(&h, &[0], 4, 16);
        assert!(hf.iter().all(|m| (m[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn frequency_transform_preserves_energy() {
        let mut rng = rng_from_seed(9);
        let x = CMat::from_fn(30, 3, |_, _| complex_normal(&mut rng, 1.0));
        assert!((to_frequency(&x).norm() - x.norm()).abs() < 1e-10);
    }

    #[test]
    fn per_subcarrier_model_holds_after_perfect_cancellation() {
        let cfg = FrameConfig::new(24, 32, 32, 6, 1);
        let s = setup(3, 3, 4, cfg.clone(), 10);
        let y = receive_noiseless(&s.streams, &s.real, 0);
        let users = [0, 1, 2];
        let yf = clean_frequency_frame(&y, &s.real.cirm[0], &users, &s.bank, &cfg, 0).unwrap();
        let hf = freq_channel(&s.real.cirm[0], &users, 6, 32);
        let xf: Vec<Vec<C64>> = users.iter().map(|&u| dft(&s.data[u][0], false)).collect();
        for n in 0..32 {
            let x = nalgebra::DVector::from_fn(3, |u, _| xf[u][n]);
            let pred = &hf[n] * x;
            let got = yf.row(n).transpose();
            assert!((pred - got).norm() < 1e-8);
        }
    }

    #[test]
    fn ls_flat_single_user() {
        let g = C64::new(0.5, -2.0);
        let hf = vec![CMat::from_element(3, 1, g); 4];
        let yf = CMat::from_fn(4, 3, |n, _| g * C64::new(n as f64, 1.0));
        let eq = per_subcarrier_ls(&yf, &hf, &[true; 4], Equalizer::ZeroForcing, 0.0, 1.0).unwrap();
        for n in 0..4 {
            assert!((eq.x[(n, 0)] - C64::new(n as f64, 1.0)).norm() < 1e-12);
        }
        assert_eq!(eq.rank_deficient, 0);
    }

    #[test]
    fn ls_orthogonal_columns_is_scaled_matched_filter() {
        let h = CMat::from_row_slice(
            3,
            2,
            &[C64::new(2.0, 0.0), ZERO, ZERO, C64::new(0.0, 3.0), ZERO, ZERO],
        );
        let y = CMat::from_row_slice(1, 3, &[C64::new(1.0, 1.0), C64::new(2.0, -1.0), C64::new(5.0, 5.0)]);
        let eq = per_subcarrier_ls(&y, &[h.clone()], &[true], Equalizer::ZeroForcing, 0.0, 1.0).unwrap();
        let mf = h.adjoint() * y.transpose();
        for u in 0..2 {
            let want = mf[u] / h.column(u).norm_squared();
            assert!((eq.x[(0, u)] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_subcarrier_is_flagged() {
        let h = CMat::from_element(3, 2, C64::new(1.0, 0.0));
        let y = CMat::from_element(1, 3, C64::new(1.0, 0.0));
        let eq = per_subcarrier_ls(&y, &[h], &[true], Equalizer::ZeroForcing, 0.0, 1.0).unwrap();
        assert_eq!(eq.rank_deficient, 1);
        assert!(eq.x.iter().all(|v| v.re.is_finite()));
    }

    #[test]
    fn noiseless_pipeline_has_no_bit_errors() {
        for (ms, map) in [(32, vec![]), (20, (0..20).map(|m| 2 + m).collect::<Vec<_>>())] {
            let mut cfg = FrameConfig::new(24, 32, ms, 6, 2);
            cfg.subcarrier_map = map;
            let s = setup(5, 3, 4, cfg.clone(), 11);
            let y = receive_noiseless(&s.streams, &s.real, 0);
            let users = [0, 1, 2];
            for t in 0..2 {
                let det =
                    detect_frame(&y, &s.real.cirm[0], &users, &s.bank, &cfg, t, 0.0, &DetectConfig::default()).unwrap();
                for (i, &u) in users.iter().enumerate() {
                    assert_eq!(det.bits[i], s.bits[u][t]);
                }
            }
        }
    }

    #[test]
    fn constellation_points_demap_to_themselves() {
        let cfg = FrameConfig::new(8, 4, 4, 1, 1);
        let bits = vec![0, 1, 1, 1, 1, 0, 0, 0];
        let f = modulate(&bits, &cfg).unwrap();
        let xf = CMat::from_column_slice(4, 1, &dft(&f.data_time, false));
        assert_eq!(demap_users(&xf, &cfg)[0], bits);
    }
}
