//! Reference estimators: SOMP and support-aware LS.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::linalg::{pinv_solve, CMat, RMat, C64};
use crate::oamp::{detect_aus, join, split};

const LS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SompConfig {
    /// Hard cap on selected columns; `None` lets the residual rule decide.
    pub max_columns: Option<usize>,
    /// Stop once `||R||_F <= slack * sqrt(G N_r) * sigma_n`.
    pub residual_slack: f64,
}

impl Default for SompConfig {
    fn default() -> Self {
        Self { max_columns: None, residual_slack: 1.05 }
    }
}

#[derive(Debug, Clone)]
pub struct SompOutput {
    pub h: CMat,
    /// Selected columns in selection order.
    pub selected: Vec<usize>,
    pub support: Vec<bool>,
    pub active: Vec<bool>,
    /// Residual Frobenius norm after each selection, starting with `||Y||_F`.
    pub residuals: Vec<f64>,
}

fn restricted_ls(psi: &RMat, y: &CMat, cols: &[usize]) -> CMat {
    let a = CMat::from_fn(psi.nrows(), cols.len(), |i, j| C64::new(psi[(i, cols[j])], 0.0));
    pinv_solve(&a, y, LS_TOL).x
}

fn scatter(rows: &[usize], x: &CMat, total: usize) -> CMat {
    let mut h = CMat::zeros(total, x.ncols());
    for (i, &r) in rows.iter().enumerate() {
        h.set_row(r, &x.row(i));
    }
    h
}

/// Greedy joint-support recovery with an LS re-fit after every selection.
pub fn somp(y: &CMat, psi: &RMat, noise_var: f64, block_len: usize, cfg: &SompConfig) -> Result<SompOutput> {
    let (g, n) = psi.shape();
    if y.nrows() != g {
        return Err(input_err(format!("observation has {} rows, sensing matrix {g}", y.nrows())));
    }
    if block_len == 0 || n % block_len != 0 {
        return Err(input_err("block length must divide the number of columns"));
    }
    // the relative floor stops an exact fit from chasing round-off
    let tol = (cfg.residual_slack * ((g * y.ncols()) as f64 * noise_var).sqrt()).max(1e-12 * y.norm());
    let cap = cfg.max_columns.unwrap_or(g).min(g).min(n);
    let col_norms: Vec<f64> = psi.column_iter().map(|c| c.norm_squared()).collect();
    let psit = psi.transpose();

    let mut selected: Vec<usize> = Vec::new();
    let mut taken = vec![false; n];
    let mut x = CMat::zeros(0, y.ncols());
    let mut resid = y.clone();
    let mut residuals = vec![y.norm()];
    while selected.len() < cap && *residuals.last().expect("seeded above") > tol {
        let corr = &psit * split(&resid);
        let best = (0..n)
            .filter(|&j| !taken[j] && col_norms[j] > 0.0)
            .map(|j| (j, corr.row(j).norm_squared() / col_norms[j]))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((j, score)) = best else { break };
        if score <= 0.0 {
            break;
        }
        taken[j] = true;
        selected.push(j);
        x = restricted_ls(psi, y, &selected);
        let fit = join(&(psi.select_columns(&selected) * split(&x)));
        resid = y - fit;
        residuals.push(resid.norm());
    }
    let h = scatter(&selected, &x, n);
    let mut support = vec![false; n];
    for &j in &selected {
        support[j] = true;
    }
    let active = detect_aus(&support, block_len);
    Ok(SompOutput { h, selected, support, active, residuals })
}

/// LS on the known nonzero rows; every other row is zero.
pub fn oracle_ls(y: &CMat, psi: &RMat, rows: &[usize]) -> Result<CMat> {
    if y.nrows() != psi.nrows() {
        return Err(input_err("observation and sensing matrix disagree on rows"));
    }
    if rows.len() > psi.nrows() {
        return Err(input_err(format!("support of {} rows exceeds {} observations", rows.len(), psi.nrows())));
    }
    if rows.is_empty() {
        return Ok(CMat::zeros(psi.ncols(), y.ncols()));
    }
    Ok(scatter(rows, &restricted_ls(psi, y, rows), psi.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{complex_normal, rng_from_seed, standard_normal};
    use rand::seq::index::sample;

    fn psi(g: usize, n: usize, seed: u64) -> RMat {
        let mut rng = rng_from_seed(seed);
        RMat::from_fn(g, n, |_, _| standard_normal(&mut rng))
    }

    fn sparse(n: usize, nr: usize, rows: &[usize], seed: u64) -> CMat {
        let mut rng = rng_from_seed(seed);
        let mut h = CMat::zeros(n, nr);
        for &r in rows {
            for c in 0..nr {
                h[(r, c)] = complex_normal(&mut rng, 1.0);
            }
        }
        h
    }

    fn observe(p: &RMat, h: &CMat) -> CMat {
        join(&(p * split(h)))
    }

    #[test]
    fn one_sparse_noiseless_in_one_step() {
        let p = psi(24, 60, 1);
        let h = sparse(60, 4, &[17], 2);
        let out = somp(&observe(&p, &h), &p, 0.0, 4, &SompConfig::default()).unwrap();
        assert_eq!(out.selected, vec![17]);
        assert!((&out.h - &h).norm() < 1e-9);
        assert_eq!(out.active.iter().filter(|&&a| a).count(), 1);
        assert!(out.active[4]);
    }

    #[test]
    fn zero_observation_selects_nothing() {
        let p = psi(16, 40, 3);
        let out = somp(&CMat::zeros(16, 3), &p, 0.0, 4, &SompConfig::default()).unwrap();
        assert!(out.selected.is_empty());
        assert!(out.h.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn residual_non_increasing_and_no_repeats() {
        let p = psi(40, 120, 4);
        let h = sparse(120, 6, &[3, 50, 51, 99], 5);
        let mut y = observe(&p, &h);
        let mut rng = rng_from_seed(6);
        y.iter_mut().for_each(|v| *v += complex_normal(&mut rng, 0.5));
        let cfg = SompConfig { max_columns: Some(12), residual_slack: 0.0 };
        let out = somp(&y, &p, 0.5, 4, &cfg).unwrap();
        assert_eq!(out.selected.len(), 12);
        let mut s = out.selected.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 12);
        assert!(out.residuals.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn high_snr_support_recall() {
        let (g, n, k) = (64, 160, 8);
        let mut hits = 0;
        let mut total = 0;
        for seed in 0..100u64 {
            let p = psi(g, n, 1000 + seed);
            let mut rng = rng_from_seed(2000 + seed);
            let rows: Vec<usize> = sample(&mut rng, n, k).into_vec();
            let h = sparse(n, 8, &rows, 3000 + seed);
            let mut y = observe(&p, &h);
            let nv = 1e-4;
            y.iter_mut().for_each(|v| *v += complex_normal(&mut rng, nv));
            let out = somp(&y, &p, nv, 8, &SompConfig { max_columns: Some(k), residual_slack: 1.05 }).unwrap();
            hits += rows.iter().filter(|r| out.support[**r]).count();
            total += k;
        }
        assert!(hits as f64 / total as f64 >= 0.95, "{hits}/{total}");
    }

    #[test]
    fn oracle_ls_cases() {
        let p = psi(30, 80, 7);
        let rows = [2, 9, 40, 41, 77];
        let h = sparse(80, 5, &rows, 8);
        let y = observe(&p, &h);
        assert!((oracle_ls(&y, &p, &rows).unwrap() - &h).norm() < 1e-9);
        assert!(oracle_ls(&y, &p, &[]).unwrap().iter().all(|v| v.norm() == 0.0));
        assert!(oracle_ls(&y, &p, &(0..31).collect::<Vec<_>>()).is_err());
    }

    #[test]
    fn oracle_ls_matches_normal_equations() {
        let p = psi(30, 80, 9);
        let rows = [1, 5, 33, 60];
        let mut rng = rng_from_seed(10);
        let y = CMat::from_fn(30, 3, |_, _| complex_normal(&mut rng, 1.0));
        let got = oracle_ls(&y, &p, &rows).unwrap();
        let a = CMat::from_fn(30, 4, |i, j| C64::new(p[(i, rows[j])], 0.0));
        let want = (a.adjoint() * &a).try_inverse().unwrap() * a.adjoint() * &y;
        for (i, &r) in rows.iter().enumerate() {
            assert!((got.row(r) - want.row(i)).norm() < 1e-10);
        }
    }

    #[test]
    fn oracle_ls_error_scales_with_noise() {
        let p = psi(60, 100, 11);
        let rows: Vec<usize> = (0..10).map(|i| i * 9).collect();
        let h = sparse(100, 16, &rows, 12);
        let clean = observe(&p, &h);
        let err_at = |nv: f64| {
            let mut total = 0.0;
            for s in 0..20u64 {
                let mut rng = rng_from_seed(100 + s);
                let y = CMat::from_fn(60, 16, |i, j| clean[(i, j)] + complex_normal(&mut rng, nv));
                total += (oracle_ls(&y, &p, &rows).unwrap() - &h).norm_squared();
            }
            10.0 * (total / h.norm_squared()).log10()
        };
        let slope = (err_at(1e-1) - err_at(1e-3)) / 20.0;
        assert!((slope - 1.0).abs() < 0.05, "{slope}");
    }
}
