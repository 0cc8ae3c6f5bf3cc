//! Channel refinement: spatial smoothing, unitary 2D-ESPRIT angle estimation,
//! LS gain re-estimation and rank-1 reconstruction of each user's rows.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::linalg::{CMat, CVec, RMat, C64, ZERO};
use crate::scene::{steering_from_frequencies, AnglePair};

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 5000;

/// Orientation of `mu = 2 atan(omega)` for the selection used here and the
/// `exp(-j n mu)` steering convention.
const MU_SIGN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingConfig {
    pub gx: usize,
    pub gy: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { gx: 3, gy: 3 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self, nx: usize, ny: usize) -> Result<()> {
        if self.gx == 0 || self.gy == 0 || self.gx > nx || self.gy > ny {
            return Err(config_err(format!(
                "smoothing ({}, {}) must lie in [1, N_s] for a {nx}x{ny} array",
                self.gx, self.gy
            )));
        }
        Ok(())
    }

    pub fn sub_dims(&self, nx: usize, ny: usize) -> (usize, usize) {
        (nx + 1 - self.gx, ny + 1 - self.gy)
    }

    pub fn num_selections(&self) -> usize {
        self.gx * self.gy
    }
}

pub fn exchange(n: usize) -> RMat {
    RMat::from_fn(n, n, |i, j| if i + j + 1 == n { 1.0 } else { 0.0 })
}

/// Left-Pi-real unitary transform `Q_n`.
pub fn unitary_q(n: usize) -> CMat {
    let k = n / 2;
    let s = FRAC_1_SQRT_2;
    let mut q = CMat::zeros(n, n);
    for i in 0..k {
        q[(i, i)] = C64::new(s, 0.0);
        q[(i, n - k + i)] = C64::new(0.0, s);
        // Pi_k blocks: row n-1-i mirrors row i
        q[(n - 1 - i, i)] = C64::new(s, 0.0);
        q[(n - 1 - i, n - k + i)] = C64::new(0.0, -s);
    }
    if n % 2 == 1 {
        q[(k, k)] = C64::new(1.0, 0.0);
    }
    q
}

/// Real selection pair `(Re, Im)` of `Q_{m-1}^H J_2 Q_m`, where `J_2` keeps
/// the first `m - 1` entries.
fn selection_pair(m: usize) -> (RMat, RMat) {
    let j2 = CMat::from_fn(m - 1, m, |i, j| if i == j { C64::new(1.0, 0.0) } else { ZERO });
    let t = unitary_q(m - 1).adjoint() * j2 * unitary_q(m);
    (t.map(|v| v.re), t.map(|v| v.im))
}

fn kron_real(a: &RMat, b: &RMat) -> RMat {
    a.kronecker(b)
}

/// Immutable matrices for one subarray size.
#[derive(Debug, Clone)]
pub struct EspritWorkspace {
    pub mx: usize,
    pub my: usize,
    /// `Q_{My}^H ⊗ Q_{Mx}^H`.
    pub qh: CMat,
    pub k_mu1: RMat,
    pub k_mu2: RMat,
    pub k_nu1: RMat,
    pub k_nu2: RMat,
}

impl EspritWorkspace {
    pub fn new(mx: usize, my: usize) -> Result<Self> {
        if mx < 2 || my < 2 {
            return Err(config_err(format!("subarray {mx}x{my} too small for ESPRIT")));
        }
        let qh = unitary_q(my).adjoint().kronecker(&unitary_q(mx).adjoint());
        let (xr, xi) = selection_pair(mx);
        let (yr, yi) = selection_pair(my);
        Ok(Self {
            mx,
            my,
            qh,
            k_mu1: kron_real(&RMat::identity(my, my), &xr),
            k_mu2: kron_real(&RMat::identity(my, my), &xi),
            k_nu1: kron_real(&yr, &RMat::identity(mx, mx)),
            k_nu2: kron_real(&yi, &RMat::identity(mx, mx)),
        })
    }

    pub fn for_array(nx: usize, ny: usize, cfg: &SmoothingConfig) -> Result<Self> {
        cfg.validate(nx, ny)?;
        let (mx, my) = cfg.sub_dims(nx, ny);
        Self::new(mx, my)
    }
}

/// Stack every shifted subarray of the `[N_r x S]` observation side by side.
pub fn spatial_smooth(x: &CMat, nx: usize, ny: usize, cfg: &SmoothingConfig) -> Result<CMat> {
    cfg.validate(nx, ny)?;
    if x.nrows() != nx * ny || x.ncols() == 0 {
        return Err(input_err(format!(
            "smoothing input is {}x{}, expected {} rows and at least one column",
            x.nrows(),
            x.ncols(),
            nx * ny
        )));
    }
    let (mx, my) = cfg.sub_dims(nx, ny);
    let s = x.ncols();
    let mut out = CMat::zeros(mx * my, cfg.num_selections() * s);
    let mut block = 0;
    for gy in 0..cfg.gy {
        for gx in 0..cfg.gx {
            for iy in 0..my {
                for ix in 0..mx {
                    let src = (iy + gy) * nx + ix + gx;
                    for c in 0..s {
                        out[(iy * mx + ix, block * s + c)] = x[(src, c)];
                    }
                }
            }
            block += 1;
        }
    }
    Ok(out)
}

/// Dominant left singular vector by power iteration on `A A^T`.
pub fn dominant_left_vector(a: &RMat) -> DVector<f64> {
    let gram = a * a.transpose();
    // start from the strongest column so the iterate is never orthogonal to it
    let start = (0..a.ncols()).max_by(|&i, &j| a.column(i).norm_squared().total_cmp(&a.column(j).norm_squared()));
    let mut e = match start {
        Some(c) if a.column(c).norm() > 0.0 => a.column(c).into_owned(),
        _ => DVector::from_element(a.nrows(), 1.0),
    };
    e /= e.norm();
    for _ in 0..POWER_MAX_ITER {
        let mut next = &gram * &e;
        let n = next.norm();
        if n == 0.0 {
            break;
        }
        next /= n;
        let delta = (&next - &e).norm();
        e = next;
        if delta < POWER_TOL {
            break;
        }
    }
    e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EspritStatus {
    Ok,
    /// `mu_x^2 + mu_y^2 > pi^2`; elevation clipped to the horizon.
    Clipped,
    /// Both spatial frequencies vanish, azimuth undefined.
    AzimuthUndefined,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EspritEstimate {
    pub mu_x: f64,
    pub mu_y: f64,
    pub angles: AnglePair,
    pub status: EspritStatus,
}

fn ls_ratio(k1: &RMat, k2: &RMat, e: &DVector<f64>) -> f64 {
    let a = k1 * e;
    let b = k2 * e;
    let den = a.norm_squared();
    if den == 0.0 {
        0.0
    } else {
        a.dot(&b) / den
    }
}

/// 2D unitary ESPRIT on a smoothed observation `[M_sub x cols]`.
pub fn esprit_2d(xbar: &CMat, ws: &EspritWorkspace) -> Result<EspritEstimate> {
    if xbar.nrows() != ws.mx * ws.my || xbar.ncols() == 0 {
        return Err(input_err("smoothed observation does not match the ESPRIT workspace"));
    }
    let y = &ws.qh * xbar;
    let c = y.ncols();
    let stacked = RMat::from_fn(y.nrows(), 2 * c, |i, j| if j < c { y[(i, j)].re } else { y[(i, j - c)].im });
    let e = dominant_left_vector(&stacked);
    let mu_x = MU_SIGN * 2.0 * ls_ratio(&ws.k_mu1, &ws.k_mu2, &e).atan();
    let mu_y = MU_SIGN * 2.0 * ls_ratio(&ws.k_nu1, &ws.k_nu2, &e).atan();
    let radius = mu_x.hypot(mu_y);
    let (angles, status) = if radius < 1e-9 {
        (AnglePair::new(0.0, 0.0), EspritStatus::AzimuthUndefined)
    } else {
        let ratio = radius / PI;
        let (el, st) = if ratio > 1.0 { (PI / 2.0, EspritStatus::Clipped) } else { (ratio.asin(), EspritStatus::Ok) };
        (AnglePair::new(mu_y.atan2(mu_x), el), st)
    };
    Ok(EspritEstimate { mu_x, mu_y, angles, status })
}

/// LS gain of `row` along the steering vector `a`.
pub fn estimate_gain(a: &CVec, row: &CVec) -> C64 {
    let den = a.norm_squared();
    if den == 0.0 {
        return ZERO;
    }
    a.dotc(row) / den
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RefineConfig {
    pub smoothing: SmoothingConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRefinement {
    pub user: usize,
    /// Absolute row indices of the user's detected taps.
    pub rows: Vec<usize>,
    pub estimate: Option<EspritEstimate>,
    pub gains: Vec<C64>,
    /// Rows were replaced by the rank-1 reconstruction.
    pub refined: bool,
}

#[derive(Debug, Clone)]
pub struct RefinedChannel {
    /// `[K*L x N_r]`.
    pub h: CMat,
    pub users: Vec<UserRefinement>,
}

/// Rebuild user rows as `beta_i * a^T` from estimated spatial frequencies.
pub fn reconstruct(
    h_hat: &CMat,
    rows: &[usize],
    mu: (f64, f64),
    nx: usize,
    ny: usize,
    out: &mut CMat,
) -> Vec<C64> {
    let a = steering_from_frequencies(mu.0, mu.1, nx, ny);
    rows.iter()
        .map(|&r| {
            let row: CVec = h_hat.row(r).transpose();
            let beta = estimate_gain(&a, &row);
            for j in 0..a.len() {
                out[(r, j)] = beta * a[j];
            }
            beta
        })
        .collect()
}

/// Refine every user in `active` whose block has detected rows in `support`.
pub fn refine(
    h_hat: &CMat,
    support: &[bool],
    active: &[bool],
    block_len: usize,
    nx: usize,
    ny: usize,
    cfg: &RefineConfig,
) -> Result<RefinedChannel> {
    if h_hat.ncols() != nx * ny || support.len() != h_hat.nrows() || active.len() * block_len != h_hat.nrows() {
        return Err(input_err("refinement inputs have inconsistent shapes"));
    }
    let ws = EspritWorkspace::for_array(nx, ny, &cfg.smoothing)?;
    // rows outside the detected support keep their initial estimate
    let mut out = h_hat.clone();
    let mut users = Vec::new();
    for (k, _) in active.iter().enumerate().filter(|(_, &a)| a) {
        let rows: Vec<usize> = (k * block_len..(k + 1) * block_len).filter(|&i| support[i]).collect();
        if rows.is_empty() {
            users.push(UserRefinement { user: k, rows, estimate: None, gains: Vec::new(), refined: false });
            continue;
        }
        let x = CMat::from_fn(nx * ny, rows.len(), |i, c| h_hat[(rows[c], i)]);
        let xbar = spatial_smooth(&x, nx, ny, &cfg.smoothing)?;
        let est = esprit_2d(&xbar, &ws)?;
        let finite = est.mu_x.is_finite() && est.mu_y.is_finite();
        if est.status == EspritStatus::Clipped || !finite {
            users.push(UserRefinement { user: k, rows, estimate: Some(est), gains: Vec::new(), refined: false });
            continue;
        }
        let gains = reconstruct(h_hat, &rows, (est.mu_x, est.mu_y), nx, ny, &mut out);
        users.push(UserRefinement { user: k, rows, estimate: Some(est), gains, refined: true });
    }
    Ok(RefinedChannel { h: out, users })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{complex_normal, rng_from_seed};
    use crate::scene::steering_vector;
    use rand::Rng;

    fn max_abs(m: &CMat) -> f64 {
        m.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    fn unitary_err(q: &CMat) -> f64 {
        max_abs(&(q.adjoint() * q - CMat::identity(q.ncols(), q.ncols())))
    }

    #[test]
    fn q_matrices_are_unitary_and_left_pi_real() {
        for n in 1..9 {
            let q = unitary_q(n);
            assert!(unitary_err(&q) < 1e-12, "n={n}");
            let pi = exchange(n).map(|v| C64::new(v, 0.0));
            // Pi conj(Q) = Q
            assert!(max_abs(&(&pi * q.map(|v| v.conj()) - &q)) < 1e-12);
        }
        assert_eq!(unitary_q(1)[(0, 0)], C64::new(1.0, 0.0));
    }

    #[test]
    fn selection_matrices_are_real_valued_shapes() {
        let ws = EspritWorkspace::new(4, 3).unwrap();
        assert_eq!(ws.k_mu1.shape(), (3 * 3, 12));
        assert_eq!(ws.k_nu1.shape(), (2 * 4, 12));
        assert!(EspritWorkspace::new(1, 3).is_err());
    }

    #[test]
    fn smoothing_trivial_cases() {
        let mut rng = rng_from_seed(1);
        let x = CMat::from_fn(16, 2, |_, _| complex_normal(&mut rng, 1.0));
        let same = spatial_smooth(&x, 4, 4, &SmoothingConfig { gx: 1, gy: 1 }).unwrap();
        assert_eq!(same, x);
        let x4 = CMat::from_fn(4, 1, |i, _| C64::new(i as f64, 0.0));
        let s = spatial_smooth(&x4, 2, 2, &SmoothingConfig { gx: 2, gy: 2 }).unwrap();
        assert_eq!(s.shape(), (1, 4));
        let mut got: Vec<f64> = s.iter().map(|v| v.re).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(spatial_smooth(&x, 4, 4, &SmoothingConfig { gx: 5, gy: 1 }).is_err());
    }

    #[test]
    fn smoothed_single_source_is_rank_one() {
        let a = steering_vector(AnglePair::new(0.7, 0.4), 10, 10);
        let x = CMat::from_fn(100, 3, |i, c| a[i] * C64::new(1.0 + c as f64, -0.5 * c as f64));
        let xbar = spatial_smooth(&x, 10, 10, &SmoothingConfig::default()).unwrap();
        let cov = &xbar * xbar.adjoint();
        let mut ev: Vec<f64> = cov.singular_values().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        assert!(ev[1] / ev[0] < 1e-12, "{:?}", &ev[..3]);
    }

    fn source_matrix(angles: AnglePair, snaps: usize, seed: u64) -> CMat {
        let mut rng = rng_from_seed(seed);
        let a = steering_vector(angles, 10, 10);
        let g: Vec<C64> = (0..snaps).map(|_| complex_normal(&mut rng, 1.0)).collect();
        CMat::from_fn(100, snaps, |i, c| a[i] * g[c])
    }

    #[test]
    fn noiseless_angles_recovered() {
        let cfg = SmoothingConfig::default();
        let ws = EspritWorkspace::for_array(10, 10, &cfg).unwrap();
        let truth = AnglePair::new(0.5, 0.3);
        let xbar = spatial_smooth(&source_matrix(truth, 3, 2), 10, 10, &cfg).unwrap();
        let est = esprit_2d(&xbar, &ws).unwrap();
        assert_eq!(est.status, EspritStatus::Ok);
        assert!((est.angles.azimuth - truth.azimuth).abs() < 1e-6, "{est:?}");
        assert!((est.angles.elevation - truth.elevation).abs() < 1e-6, "{est:?}");
    }

    #[test]
    fn spatial_frequencies_recovered_in_every_quadrant() {
        let cfg = SmoothingConfig::default();
        let ws = EspritWorkspace::for_array(10, 10, &cfg).unwrap();
        let mut rng = rng_from_seed(9);
        for i in 0..40 {
            let truth = AnglePair::new(rng.random_range(-PI..PI), rng.random_range(0.05..1.3));
            let (mx, my) = truth.spatial_frequencies();
            let xbar = spatial_smooth(&source_matrix(truth, 2, i), 10, 10, &cfg).unwrap();
            let est = esprit_2d(&xbar, &ws).unwrap();
            assert!((est.mu_x - mx).abs() < 1e-7 && (est.mu_y - my).abs() < 1e-7, "{truth:?} {est:?}");
        }
    }

    #[test]
    fn boresight_source_flags_undefined_azimuth() {
        let cfg = SmoothingConfig::default();
        let ws = EspritWorkspace::for_array(10, 10, &cfg).unwrap();
        let xbar = spatial_smooth(&source_matrix(AnglePair::new(1.0, 0.0), 2, 3), 10, 10, &cfg).unwrap();
        let est = esprit_2d(&xbar, &ws).unwrap();
        assert_eq!(est.status, EspritStatus::AzimuthUndefined);
        assert_eq!(est.angles.elevation, 0.0);
    }

    #[test]
    fn estimate_is_scale_invariant() {
        let cfg = SmoothingConfig::default();
        let ws = EspritWorkspace::for_array(10, 10, &cfg).unwrap();
        let mut rng = rng_from_seed(4);
        let mut x = source_matrix(AnglePair::new(-2.0, 0.6), 3, 5);
        x += CMat::from_fn(100, 3, |_, _| complex_normal(&mut rng, 0.05));
        let xbar = spatial_smooth(&x, 10, 10, &cfg).unwrap();
        let a = esprit_2d(&xbar, &ws).unwrap();
        let b = esprit_2d(&(&xbar * C64::new(-3.0, 7.5)), &ws).unwrap();
        assert!((a.mu_x - b.mu_x).abs() < 1e-8 && (a.mu_y - b.mu_y).abs() < 1e-8);
    }

    #[test]
    fn gain_projection_cases() {
        let a = steering_vector(AnglePair::new(0.2, 0.9), 4, 4);
        let beta = C64::new(0.3, -1.1);
        assert!((estimate_gain(&a, &(&a * beta)) - beta).norm() < 1e-14);
        // orthogonal: a shifted by one DFT bin along x
        let b = steering_from_frequencies(2.0 * PI / 4.0, 0.0, 4, 4);
        let a0 = steering_from_frequencies(0.0, 0.0, 4, 4);
        assert!(estimate_gain(&a0, &b).norm() < 1e-14);
        // noisy row against the normal-equation solve
        let mut rng = rng_from_seed(8);
        let row = CVec::from_fn(16, |_, _| complex_normal(&mut rng, 1.0));
        let am = CMat::from_column_slice(16, 1, a.as_slice());
        let normal = (am.adjoint() * &am).try_inverse().unwrap() * am.adjoint() * &row;
        assert!((estimate_gain(&a, &row) - normal[0]).norm() < 1e-10);
    }

    fn user_block(angles: AnglePair, taps: &[(usize, C64)], l: usize) -> CMat {
        let a = steering_vector(angles, 10, 10);
        let mut h = CMat::zeros(l, 100);
        for &(t, g) in taps {
            for j in 0..100 {
                h[(t, j)] = g * a[j];
            }
        }
        h
    }

    #[test]
    fn noiseless_single_user_refines_exactly() {
        let l = 8;
        let mut h = CMat::zeros(3 * l, 100);
        let blk = user_block(AnglePair::new(2.4, 0.35), &[(1, C64::new(0.9, 0.1)), (4, C64::new(-0.2, 0.3))], l);
        h.view_mut((l, 0), (l, 100)).copy_from(&blk);
        let support: Vec<bool> = (0..3 * l).map(|i| i == l + 1 || i == l + 4).collect();
        let out = refine(&h, &support, &[false, true, false], l, 10, 10, &RefineConfig::default()).unwrap();
        let nmse = (&out.h - &h).norm_squared() / h.norm_squared();
        assert!(10.0 * nmse.log10() <= -60.0, "{nmse}");
        assert!(out.users[0].refined);
    }

    #[test]
    fn refined_blocks_are_rank_one() {
        let mut rng = rng_from_seed(12);
        let l = 4;
        let h = CMat::from_fn(2 * l, 100, |_, _| complex_normal(&mut rng, 1.0));
        let support = vec![true; 2 * l];
        let out = refine(&h, &support, &[true, true], l, 10, 10, &RefineConfig::default()).unwrap();
        for k in 0..2 {
            let blk = out.h.rows(k * l, l).into_owned();
            let sv = blk.singular_values();
            assert!(sv[1] / sv[0] < 1e-10);
        }
    }

    #[test]
    fn unrefined_rows_pass_through() {
        let h = CMat::from_element(8, 100, C64::new(1.0, 0.0));
        let out = refine(&h, &[false; 8], &[true, false], 4, 10, 10, &RefineConfig::default()).unwrap();
        assert_eq!(out.h, h);
        assert!(!out.users[0].refined);
        let none = refine(&h, &[true; 8], &[false, false], 4, 10, 10, &RefineConfig::default()).unwrap();
        assert_eq!(none.h, h);
    }

    #[test]
    fn refine_is_deterministic() {
        let mut rng = rng_from_seed(13);
        let h = CMat::from_fn(8, 100, |_, _| complex_normal(&mut rng, 1.0));
        let s = vec![true; 8];
        let a = refine(&h, &s, &[true, true], 4, 10, 10, &RefineConfig::default()).unwrap();
        let b = refine(&h, &s, &[true, true], 4, 10, 10, &RefineConfig::default()).unwrap();
        assert_eq!(a.h, b.h);
    }
}
