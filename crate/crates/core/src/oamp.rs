//! OAMP for the multiple-measurement-vector model `Y = Psi H + N` with a
//! Bernoulli-Gaussian prior, EM hyperparameter learning and a common row
//! support across antennas.
//!
//! The sensing matrix is real, so complex `[n x N_r]` matrices are stored as
//! real `[n x 2 N_r]` matrices (real parts, then imaginary parts) and every
//! product with `Psi` is a real GEMM. The LMMSE stage is diagonal in the SVD
//! basis: `Psi = U diag(s) V^T`, `W = c V diag(w) U^T` with
//! `w_g = s_g / (v s_g^2 + sigma^2)` and `c = KL / sum_g w_g s_g`.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::linalg::{CMat, RMat, C64};

/// Lower bound applied to `v`, `tau` and the NLE denominator.
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SvdCache {
    /// `[G x G]`.
    pub u: RMat,
    /// Descending singular values.
    pub sigma: Vec<f64>,
    /// `[KL x G]`.
    pub v: RMat,
    /// `sum_g s_g^2 = tr(Psi^T Psi)`.
    pub trace_gram: f64,
}

impl SvdCache {
    pub fn new(psi: &RMat) -> Result<Self> {
        let (g, n) = psi.shape();
        if g > n {
            return Err(input_err(format!("sensing matrix must be wide, got {g}x{n}")));
        }
        let svd = psi.clone().svd(true, true);
        let u0 = svd.u.ok_or_else(|| Error::Numerical("SVD did not return U".into()))?;
        let vt0 = svd.v_t.ok_or_else(|| Error::Numerical("SVD did not return V".into()))?;
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        let u = RMat::from_fn(g, g, |r, c| u0[(r, order[c])]);
        let v = RMat::from_fn(n, g, |r, c| vt0[(order[c], r)]);
        let trace_gram = sigma.iter().map(|s| s * s).sum();
        Ok(Self { u, sigma, v, trace_gram })
    }

    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    pub fn reconstruct(&self) -> RMat {
        let mut us = self.u.clone();
        for (c, s) in self.sigma.iter().enumerate() {
            us.column_mut(c).scale_mut(*s);
        }
        us * self.v.transpose()
    }

    /// Diagonal LMMSE weights for error measure `v` and noise variance `noise_var`.
    pub fn le_weights(&self, v: f64, noise_var: f64) -> LeWeights {
        let w: Vec<f64> = self
            .sigma
            .iter()
            .map(|&s| if s > 0.0 { s / (v * s * s + noise_var).max(VAR_FLOOR) } else { 0.0 })
            .collect();
        let tr: f64 = w.iter().zip(&self.sigma).map(|(w, s)| w * s).sum();
        let c = self.cols() as f64 / tr;
        LeWeights { w, c }
    }

    /// Dense de-correlated estimator `W`, `[KL x G]`.
    pub fn dense_w(&self, v: f64, noise_var: f64) -> RMat {
        let lw = self.le_weights(v, noise_var);
        let mut vw = self.v.clone();
        for (c, w) in lw.w.iter().enumerate() {
            vw.column_mut(c).scale_mut(lw.c * w);
        }
        vw * self.u.transpose()
    }

    /// `(tr(B B^T), tr(W W^T))` with `B = I - W Psi`, in `O(G)`.
    pub fn traces(&self, v: f64, noise_var: f64) -> (f64, f64) {
        let lw = self.le_weights(v, noise_var);
        let p2: f64 = lw.w.iter().zip(&self.sigma).map(|(w, s)| (lw.c * w * s).powi(2)).sum();
        let w2: f64 = lw.w.iter().map(|w| (lw.c * w).powi(2)).sum();
        (p2 - self.cols() as f64, w2)
    }
}

#[derive(Debug, Clone)]
pub struct LeWeights {
    pub w: Vec<f64>,
    pub c: f64,
}

/// Bernoulli-Gaussian posterior of one entry observed as `r = h + CN(0, tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub lambda: f64,
    pub a: C64,
    pub b: f64,
    pub mean: C64,
    pub var: f64,
}

pub fn scalar_posterior(r: C64, tau: f64, rho: f64, mu: C64, gamma: f64) -> Posterior {
    let tau = tau.max(VAR_FLOOR);
    let s = tau + gamma;
    let a = (mu * tau + r * gamma) / s;
    let b = tau * gamma / s;
    let lambda = if rho <= 0.0 {
        0.0
    } else if rho >= 1.0 {
        1.0
    } else {
        let l = (tau / s).ln() + r.norm_sqr() / tau - (r - mu).norm_sqr() / s;
        let z = rho.ln() - (1.0 - rho).ln() + l;
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        }
    };
    let mean = a * lambda;
    let var = (lambda * (a.norm_sqr() + b) - mean.norm_sqr()).max(0.0);
    Posterior { lambda, a, b, mean, var }
}

/// Energy-based row detector: row `i` is active when more than `eta` of the
/// antennas satisfy `|h_ij|^2 > eps_ratio * max |h|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyDetector {
    pub eps_ratio: f64,
    pub eta: f64,
}

impl Default for EnergyDetector {
    fn default() -> Self {
        Self { eps_ratio: 0.02, eta: 0.5 }
    }
}

impl EnergyDetector {
    pub fn detect_support(&self, h: &CMat) -> Vec<bool> {
        let max = h.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let eps = self.eps_ratio * max;
        let nr = h.ncols() as f64;
        (0..h.nrows())
            .map(|i| {
                if max == 0.0 {
                    return false;
                }
                let hits = h.row(i).iter().filter(|v| v.norm_sqr() > eps).count();
                hits as f64 / nr > self.eta
            })
            .collect()
    }
}

/// User `k` is active iff any row of its block of `l` rows is set.
pub fn detect_aus(kappa: &[bool], l: usize) -> Vec<bool> {
    kappa.chunks(l).map(|b| b.iter().any(|&x| x)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OampConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// Initial activity probability; `None` uses 0.1.
    pub prior_sparsity: Option<f64>,
    /// Weight of the new NLE output when mixing with the previous one.
    pub damping: f64,
    pub detector: EnergyDetector,
}

impl Default for OampConfig {
    fn default() -> Self {
        Self { max_iter: 50, tol: 1e-6, prior_sparsity: None, damping: 0.7, detector: EnergyDetector::default() }
    }
}

/// Iteration state. Complex matrices use the split-real layout.
#[derive(Debug, Clone)]
pub struct OampState {
    pub d: RMat,
    /// NLE error measure per antenna column.
    pub v: Vec<f64>,
    /// LE error measure per antenna column.
    pub tau: Vec<f64>,
    /// `[KL x N_r]`.
    pub rho: RMat,
    pub mu: Vec<C64>,
    pub gamma: Vec<f64>,
    pub lambda: RMat,
    /// Posterior means.
    pub xi: RMat,
    pub zeta: RMat,
    pub iter: usize,
    /// `V^T d`, kept between the NLE error measure and the next LE.
    vtd: RMat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Column averages of the error measures.
    pub v: f64,
    pub tau: f64,
    pub nmse_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OampOutput {
    pub h: CMat,
    pub support: Vec<bool>,
    pub active: Vec<bool>,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
}

pub fn split(m: &CMat) -> RMat {
    let (r, c) = m.shape();
    RMat::from_fn(r, 2 * c, |i, j| if j < c { m[(i, j)].re } else { m[(i, j - c)].im })
}

pub fn join(m: &RMat) -> CMat {
    let (r, c2) = m.shape();
    let c = c2 / 2;
    CMat::from_fn(r, c, |i, j| C64::new(m[(i, j)], m[(i, j + c)]))
}

/// Solver bound to one observation; the SVD cache may be shared.
pub struct OampSolver<'a> {
    cache: &'a SvdCache,
    /// `U^T Y`, split layout.
    uty: RMat,
    y_energy: Vec<f64>,
    noise_var: f64,
    nr: usize,
    block_len: usize,
    cfg: OampConfig,
}

impl<'a> OampSolver<'a> {
    pub fn new(cache: &'a SvdCache, y: &CMat, noise_var: f64, block_len: usize, cfg: OampConfig) -> Result<Self> {
        if y.nrows() != cache.rows() {
            return Err(input_err(format!("observation has {} rows, sensing matrix {}", y.nrows(), cache.rows())));
        }
        if block_len == 0 || !cache.cols().is_multiple_of(block_len) {
            return Err(input_err("block length must divide the number of columns"));
        }
        let ys = split(y);
        let uty = cache.u.transpose() * &ys;
        let y_energy = y.column_iter().map(|c| c.norm_squared()).collect();
        Ok(Self { cache, uty, y_energy, noise_var, nr: y.ncols(), block_len, cfg })
    }

    pub fn init_state(&self) -> OampState {
        let n = self.cache.cols();
        let g = self.cache.rows() as f64;
        let rho0 = self.cfg.prior_sparsity.unwrap_or(0.1).clamp(1e-6, 1.0);
        let gamma = self
            .y_energy
            .iter()
            .map(|e| ((e - g * self.noise_var) / (self.cache.trace_gram * rho0)).max(VAR_FLOOR))
            .collect();
        OampState {
            d: RMat::zeros(n, 2 * self.nr),
            v: vec![1.0; self.nr],
            tau: vec![1.0; self.nr],
            rho: RMat::from_element(n, self.nr, rho0),
            mu: vec![C64::new(0.0, 0.0); self.nr],
            gamma,
            lambda: RMat::zeros(n, self.nr),
            xi: RMat::zeros(n, 2 * self.nr),
            zeta: RMat::zeros(n, self.nr),
            iter: 0,
            vtd: RMat::zeros(self.cache.rows(), 2 * self.nr),
        }
    }

    /// `U^T (Y - Psi d)` from the cached `V^T d`.
    fn residual_u(&self, state: &OampState) -> RMat {
        let mut res = self.uty.clone();
        for (g, s) in self.cache.sigma.iter().enumerate() {
            for c in 0..res.ncols() {
                res[(g, c)] -= s * state.vtd[(g, c)];
            }
        }
        res
    }

    /// De-correlated linear estimate `r_j = d_j + W_j (y_j - Psi d_j)`; also sets `tau`.
    pub fn le_step(&self, state: &mut OampState) -> RMat {
        let mut res = self.residual_u(state);
        let n = self.cache.cols() as f64;
        for j in 0..self.nr {
            let v = state.v[j];
            let lw = self.cache.le_weights(v, self.noise_var);
            for (g, w) in lw.w.iter().enumerate() {
                res[(g, j)] *= lw.c * w;
                res[(g, j + self.nr)] *= lw.c * w;
            }
            let (tb, tw) = self.cache.traces(v, self.noise_var);
            state.tau[j] = ((tb * v + tw * self.noise_var) / n).max(VAR_FLOOR);
        }
        let mut r = state.d.clone();
        r.gemm(1.0, &self.cache.v, &res, 1.0);
        r
    }

    /// Posterior computation and divergence-free correction.
    pub fn nle_step(&self, state: &mut OampState, r: &RMat) -> RMat {
        let n = self.cache.cols();
        let nr = self.nr;
        let mut d = RMat::zeros(n, 2 * nr);
        for j in 0..nr {
            let tau = state.tau[j];
            let mut zsum = 0.0;
            for i in 0..n {
                let rv = C64::new(r[(i, j)], r[(i, j + nr)]);
                let p = scalar_posterior(rv, tau, state.rho[(i, j)], state.mu[j], state.gamma[j]);
                state.lambda[(i, j)] = p.lambda;
                state.xi[(i, j)] = p.mean.re;
                state.xi[(i, j + nr)] = p.mean.im;
                state.zeta[(i, j)] = p.var;
                // reuse d as scratch for a
                d[(i, j)] = p.a.re;
                d[(i, j + nr)] = p.a.im;
                zsum += p.var;
            }
            let zbar = zsum / n as f64;
            let c = tau / (tau - zbar).max(VAR_FLOOR);
            let slope = zbar / tau;
            self.em_column(state, j, &d);
            for i in 0..n {
                d[(i, j)] = c * (state.xi[(i, j)] - slope * r[(i, j)]);
                d[(i, j + nr)] = c * (state.xi[(i, j + nr)] - slope * r[(i, j + nr)]);
            }
        }
        d
    }

    /// EM update of `mu_j`, `gamma_j` from the posteriors of column `j`;
    /// `a` holds the posterior slab means in split layout.
    fn em_column(&self, state: &mut OampState, j: usize, a: &RMat) {
        let n = self.cache.cols();
        let nr = self.nr;
        let mut lsum = 0.0;
        let mut msum = C64::new(0.0, 0.0);
        for i in 0..n {
            let l = state.lambda[(i, j)];
            lsum += l;
            msum += C64::new(a[(i, j)], a[(i, j + nr)]) * l;
        }
        if lsum <= 0.0 {
            return;
        }
        let mu_old = state.mu[j];
        let mut gsum = 0.0;
        for i in 0..n {
            let l = state.lambda[(i, j)];
            let ai = C64::new(a[(i, j)], a[(i, j + nr)]);
            let tau = state.tau[j];
            let gamma = state.gamma[j];
            let b = tau * gamma / (tau + gamma);
            gsum += l * ((mu_old - ai).norm_sqr() + b);
        }
        state.mu[j] = msum / lsum;
        state.gamma[j] = (gsum / lsum).max(VAR_FLOOR);
    }

    /// Row-average activity probabilities across antennas.
    pub fn refine_activity(state: &mut OampState) {
        refine_activity_prob(&state.lambda, &mut state.rho);
    }

    /// NLE error measures `v_j` from the new `d`; refreshes the cached `V^T d`.
    pub fn update_v(&self, state: &mut OampState) {
        state.vtd = self.cache.v.transpose() * &state.d;
        let res = self.residual_u(state);
        let g = self.cache.rows() as f64;
        for j in 0..self.nr {
            let e = res.column(j).norm_squared() + res.column(j + self.nr).norm_squared();
            state.v[j] = ((e - g * self.noise_var) / self.cache.trace_gram).max(VAR_FLOOR);
        }
    }

    pub fn run(&self, truth: Option<&CMat>) -> Result<OampOutput> {
        let mut state = self.init_state();
        let mut trace = Vec::new();
        let truth_energy = truth.map(|t| t.norm_squared());
        for it in 0..self.cfg.max_iter {
            state.iter = it + 1;
            let r = self.le_step(&mut state);
            let d_new = self.nle_step(&mut state, &r);
            Self::refine_activity(&mut state);
            let diff = (&d_new - &state.d).norm();
            let prev = state.d.norm();
            let beta = self.cfg.damping;
            state.d = if beta >= 1.0 { d_new } else { &d_new * beta + &state.d * (1.0 - beta) };
            self.update_v(&mut state);
            let finite = state.v.iter().chain(&state.tau).all(|x| x.is_finite());
            if !finite || !state.d.iter().all(|x| x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite OAMP state at iteration {}", it + 1)));
            }
            let nmse_db = match (truth, truth_energy) {
                (Some(t), Some(e)) if e > 0.0 => {
                    let err = (&join(&state.xi) - t).norm_squared();
                    Some(10.0 * (err / e).log10())
                }
                _ => None,
            };
            let nr = self.nr as f64;
            trace.push(IterationRecord {
                iter: it + 1,
                v: state.v.iter().sum::<f64>() / nr,
                tau: state.tau.iter().sum::<f64>() / nr,
                nmse_db,
            });
            if prev > 0.0 && diff / prev < self.cfg.tol {
                break;
            }
        }
        let h = join(&state.xi);
        let support = self.cfg.detector.detect_support(&h);
        let active = detect_aus(&support, self.block_len);
        Ok(OampOutput { h, support, active, iterations: state.iter, trace })
    }
}

/// `rho_{i,j} <- mean_j lambda_{i,j}` for every row.
pub fn refine_activity_prob(lambda: &RMat, rho: &mut RMat) {
    let nr = lambda.ncols() as f64;
    for i in 0..lambda.nrows() {
        let m = lambda.row(i).sum() / nr;
        rho.row_mut(i).fill(m);
    }
}

/// One-shot JADCE at a single satellite.
pub fn run_oamp_mmv(y: &CMat, cache: &SvdCache, noise_var: f64, block_len: usize, cfg: OampConfig) -> Result<OampOutput> {
    OampSolver::new(cache, y, noise_var, block_len, cfg)?.run(None)
}
