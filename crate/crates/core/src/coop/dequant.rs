//! Cooperative detection from mixed-resolution observations: iterative
//! dequantization (truncated-Gaussian means), per-subcarrier LMMSE and a
//! per-symbol variational update under the constellation prior.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coop::backhaul::{decode, encode, payload_bits};
use crate::coop::quantizer::Quantizer;
use crate::coop::{satellite_freq_channel, stack_channels, stacked_ls, CoopDetection, SatelliteReport};
use crate::detect::demap_users;
use crate::error::{input_err, Error, Result};
use crate::frame::{data_scale, FrameConfig};
use crate::linalg::{dft, pinv_solve, CMat, CVec, C64, ZERO};

const VAR_FLOOR: f64 = 1e-12;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Where the fusion happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackhaulMode {
    /// Ground fusion: every satellite's observation is quantized.
    Msctp,
    /// Satellite 0 fuses and keeps its own observation at full precision.
    Mscbp,
}

impl BackhaulMode {
    pub fn is_central(self, q: usize) -> bool {
        matches!(self, BackhaulMode::Mscbp) && q == 0
    }

    pub fn edge_count(self, q: usize) -> usize {
        match self {
            BackhaulMode::Msctp => q,
            BackhaulMode::Mscbp => q.saturating_sub(1),
        }
    }
}

/// `exp(x^2) erfc(x)` for `x >= 0`.
pub fn erfcx(x: f64) -> f64 {
    if x < 25.0 {
        (x * x).exp() * libm::erfc(x)
    } else {
        let x2 = x * x;
        let series = 1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2);
        series / (x * std::f64::consts::PI.sqrt())
    }
}

/// Standardised mean of a standard normal truncated to `(a, b)` with
/// `0 <= a < b`, evaluated through `erfcx` so that far-tail bins stay finite.
fn upper_tail_mean(a: f64, b: f64) -> f64 {
    let s2 = std::f64::consts::SQRT_2;
    // common factor exp(-a^2/2) cancels between numerator and denominator
    let r = if b.is_infinite() { 0.0 } else { (-(b * b - a * a) / 2.0).exp() };
    let num = FRAC_1_SQRT_2PI * (1.0 - r);
    let den = 0.5 * (erfcx(a / s2) - if r == 0.0 { 0.0 } else { r * erfcx(b / s2) });
    num / den
}

/// Mean of `N(mu, s^2)` truncated to `(lo, hi]`.
pub fn truncated_normal_mean(mu: f64, s: f64, lo: f64, hi: f64) -> f64 {
    if !(lo < hi) {
        return lo;
    }
    if s <= 0.0 {
        return mu.clamp(lo, hi);
    }
    let (a, b) = ((lo - mu) / s, (hi - mu) / s);
    if b - a < 1e-8 {
        return 0.5 * (lo + hi);
    }
    let t = if a >= 0.0 {
        upper_tail_mean(a, b)
    } else if b <= 0.0 {
        -upper_tail_mean(-b, -a)
    } else {
        let phi = |x: f64| if x.is_infinite() { 0.0 } else { FRAC_1_SQRT_2PI * (-x * x / 2.0).exp() };
        let cdf = |x: f64| 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
        (phi(a) - phi(b)) / (cdf(b) - cdf(a))
    };
    let m = mu + s * t;
    if m.is_finite() {
        m.clamp(lo, hi)
    } else {
        let (l, h) = (lo.max(mu - 40.0 * s), hi.min(mu + 40.0 * s));
        0.5 * (l + h)
    }
}

/// Stacked mixed-resolution observation of one frame at the central node.
#[derive(Debug, Clone)]
pub struct StackedObservation {
    /// Per subcarrier `[R x U]`, `R = Q N_r`.
    pub h: Vec<CMat>,
    /// `[N x R]` bin bounds; real bounds in `.re`, imaginary in `.im`.
    pub lo: CMat,
    pub hi: CMat,
    /// `[N x R]` full-precision value or quantizer reconstruction point.
    pub point: CMat,
    /// Full-precision rows.
    pub exact: Vec<bool>,
    pub users: Vec<usize>,
    /// Bits carried over the backhaul per frame.
    pub backhaul_bits: usize,
}

impl StackedObservation {
    /// Quantize every edge satellite's report through the byte-level payload
    /// and stack the results. `bits = None` keeps all rows at full precision.
    pub fn build(
        reports: &[SatelliteReport],
        users: &[usize],
        mode: BackhaulMode,
        bits: Option<u32>,
        cfg: &FrameConfig,
    ) -> Result<Self> {
        let n = cfg.data_len;
        let nr = reports.first().map(|r| r.yf.ncols()).ok_or_else(|| input_err("no satellite reports"))?;
        let rows = reports.len() * nr;
        let mut lo = CMat::zeros(n, rows);
        let mut hi = CMat::zeros(n, rows);
        let mut point = CMat::zeros(n, rows);
        let mut exact = vec![false; rows];
        let mut backhaul_bits = 0;
        for (q, rep) in reports.iter().enumerate() {
            if rep.yf.shape() != (n, nr) {
                return Err(input_err("report observation has the wrong shape"));
            }
            let full = mode.is_central(q) || bits.is_none();
            if full {
                for r in 0..nr {
                    exact[q * nr + r] = true;
                    for sc in 0..n {
                        let v = rep.yf[(sc, r)];
                        lo[(sc, q * nr + r)] = v;
                        hi[(sc, q * nr + r)] = v;
                        point[(sc, q * nr + r)] = v;
                    }
                }
                if !mode.is_central(q) {
                    backhaul_bits += 2 * n * nr * 64;
                }
                continue;
            }
            let b = bits.expect("checked above");
            let quant = Quantizer::for_observation(b, &rep.yf)?;
            let payload = encode(&quant, &rep.yf);
            backhaul_bits += payload_bits(n, nr, b);
            let dec = decode(&payload, b, n, nr)?;
            let qz = dec.quantizer;
            for sc in 0..n {
                for r in 0..nr {
                    let (ire, iim) = dec.at(sc, r);
                    let (lre, hre) = qz.bounds(ire);
                    let (lim, him) = qz.bounds(iim);
                    lo[(sc, q * nr + r)] = C64::new(lre, lim);
                    hi[(sc, q * nr + r)] = C64::new(hre, him);
                    point[(sc, q * nr + r)] = qz.dequantize((ire, iim));
                }
            }
        }
        let per_sat: Vec<Vec<CMat>> =
            reports.iter().map(|r| satellite_freq_channel(r, users, cfg.max_delay, n)).collect();
        Ok(Self { h: stack_channels(&per_sat), lo, hi, point, exact, users: users.to_vec(), backhaul_bits })
    }
}

/// Stacked LS on the reconstruction points, ignoring the quantization model.
pub fn ls_on_points(obs: &StackedObservation, cfg: &FrameConfig) -> Result<CoopDetection> {
    if obs.users.is_empty() {
        return Ok(CoopDetection { users: Vec::new(), bits: Vec::new(), rank_deficient: 0 });
    }
    let eq = stacked_ls(&obs.point, &obs.h, &cfg.occupied())?;
    Ok(CoopDetection { users: obs.users.clone(), bits: demap_users(&eq.x, cfg), rank_deficient: eq.rank_deficient })
}

/// Dequantized observation of one subcarrier (Module A). `var_y[r]` is the
/// complex variance of row `r` around its prior mean `y_a[r]`.
pub fn module_a(y_a: &CVec, lo: &[C64], hi: &[C64], exact: &[bool], var_y: &[f64]) -> CVec {
    CVec::from_fn(y_a.len(), |r, _| {
        if exact[r] {
            lo[r]
        } else {
            let s = (var_y[r] / 2.0).sqrt();
            C64::new(
                truncated_normal_mean(y_a[r].re, s, lo[r].re, hi[r].re),
                truncated_normal_mean(y_a[r].im, s, lo[r].im, hi[r].im),
            )
        }
    })
}

/// LMMSE update of one subcarrier (Module B); returns the posterior mean and
/// the mean diagonal of `(H^H H + noise/var_a I)^{-1}`.
pub fn module_b(y_p: &CVec, x_a: &CVec, var_a: f64, h: &CMat, gram: &CMat, noise_var: f64) -> (CVec, f64) {
    let u = x_a.len();
    if var_a <= VAR_FLOOR {
        return (x_a.clone(), 0.0);
    }
    let mut a = gram.clone();
    let reg = noise_var / var_a;
    for i in 0..u {
        a[(i, i)] += C64::new(reg, 0.0);
    }
    let rhs = h.adjoint() * (y_p - h * x_a);
    let inv = match a.clone().cholesky() {
        Some(c) => c.inverse(),
        None => pinv_solve(&a, &CMat::identity(u, u), 1e-12).x,
    };
    let x_p = x_a + &inv * rhs;
    let md = (0..u).map(|i| inv[(i, i)].re).sum::<f64>() / u.max(1) as f64;
    (x_p, md)
}

/// Symbol posteriors of one user (Module C).
///
/// `xp` is the despread observation `F x_t + noise` of length `M_s`. With
/// `mixing = None` the unitary DFT makes the per-symbol statistic the IDFT of
/// `xp`; otherwise `mixing` holds the columns `f_m` and the cross terms use
/// the previous means in `mean`.
pub fn module_c(
    xp: &[C64],
    mixing: Option<&CMat>,
    var: f64,
    points: &[C64],
    log_prior: &[f64],
    mean: &mut [C64],
    var_out: &mut [f64],
    post: &mut [f64],
) {
    let ms = xp.len();
    let np = points.len();
    let var = var.max(VAR_FLOOR);
    let prev: Vec<C64> = mean.to_vec();
    let z = match mixing {
        None => dft(xp, true),
        Some(_) => Vec::new(),
    };
    let mut g = vec![0.0; np];
    for m in 0..ms {
        match mixing {
            None => {
                for (i, s) in points.iter().enumerate() {
                    g[i] = -(z[m] - s).norm_sqr() / var + log_prior[m * np + i];
                }
            }
            Some(f) => {
                let fm = f.column(m);
                let mut resid: CVec = CVec::from_column_slice(xp);
                for (mp, xm) in prev.iter().enumerate() {
                    if mp != m && *xm != ZERO {
                        resid -= f.column(mp) * *xm;
                    }
                }
                let fnorm = fm.norm_squared();
                let corr = fm.dotc(&resid);
                for (i, s) in points.iter().enumerate() {
                    g[i] = -(fnorm * s.norm_sqr() - 2.0 * (corr.conj() * s).re) / var + log_prior[m * np + i];
                }
            }
        }
        let gmax = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = gmax + g.iter().map(|v| (v - gmax).exp()).sum::<f64>().ln();
        let mut e = ZERO;
        let mut e2 = 0.0;
        for i in 0..np {
            let lq = g[i] - lse;
            post[m * np + i] = lq;
            let p = lq.exp();
            e += points[i] * p;
            e2 += points[i].norm_sqr() * p;
        }
        mean[m] = e;
        var_out[m] = (e2 - e.norm_sqr()).max(0.0);
    }
}

/// Spread assumed around the prior observation mean in Module A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleAVariance {
    /// Noise only.
    Noise,
    /// Noise plus the prior symbol variance seen through the channel,
    /// `noise + var_a * sum_u |h_ru|^2`. With a noise-only spread the first
    /// pass (zero prior mean) drags every quantized row to its bin edge nearest
    /// zero while full-precision rows stay put, and the near-hard symbol
    /// posteriors that follow never recover.
    #[default]
    Predictive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DequantConfig {
    pub max_iter: usize,
    /// Stop when no symbol posterior moves more than this in total variation.
    pub tol: f64,
    pub module_a_variance: ModuleAVariance,
}

impl Default for DequantConfig {
    fn default() -> Self {
        Self { max_iter: 20, tol: 1e-6, module_a_variance: ModuleAVariance::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DequantOutput {
    pub users: Vec<usize>,
    pub bits: Vec<Vec<u8>>,
    pub iterations: usize,
    /// Posterior symbol means `[M_s x U]`.
    pub symbols: CMat,
}

/// Iterate Modules A, B, C and the prior update; hard decisions at the end.
pub fn run_bayes_dequant(
    obs: &StackedObservation,
    noise_var: f64,
    cfg: &FrameConfig,
    dq: &DequantConfig,
) -> Result<DequantOutput> {
    let u = obs.users.len();
    let (n, ms) = (cfg.data_len, cfg.used_subcarriers);
    if u == 0 {
        return Ok(DequantOutput { users: Vec::new(), bits: Vec::new(), iterations: 0, symbols: CMat::zeros(ms, 0) });
    }
    if obs.h.len() != n || obs.lo.nrows() != n {
        return Err(input_err("stacked observation does not match the frame"));
    }
    let points = cfg.modulation.points();
    let np = points.len();
    let scale = data_scale(cfg);
    let occupied = cfg.occupied();
    let n_occ = occupied.iter().filter(|&&o| o).count().max(1) as f64;
    let grams: Vec<CMat> = obs.h.par_iter().map(|h| h.adjoint() * h).collect();

    let mut x_a = vec![CVec::zeros(u); n];
    let mut var_a: Vec<f64> = occupied.iter().map(|&o| if o { scale * scale } else { 0.0 }).collect();
    let mut log_prior = vec![-(np as f64).ln(); ms * np * u];
    let mut means = CMat::zeros(ms, u);
    let mut iterations = 0;

    for it in 0..dq.max_iter {
        iterations = it + 1;
        // Modules A and B per subcarrier
        let per_sc: Vec<(CVec, f64)> = (0..n)
            .into_par_iter()
            .map(|sc| {
                if !occupied[sc] {
                    return (x_a[sc].clone(), 0.0);
                }
                let y_a = &obs.h[sc] * &x_a[sc];
                let lo: Vec<C64> = obs.lo.row(sc).iter().copied().collect();
                let hi: Vec<C64> = obs.hi.row(sc).iter().copied().collect();
                let h = &obs.h[sc];
                let var_y: Vec<f64> = match dq.module_a_variance {
                    ModuleAVariance::Noise => vec![noise_var; h.nrows()],
                    ModuleAVariance::Predictive => (0..h.nrows())
                        .map(|r| noise_var + var_a[sc] * h.row(r).iter().map(|v| v.norm_sqr()).sum::<f64>())
                        .collect(),
                };
                let y_p = module_a(&y_a, &lo, &hi, &obs.exact, &var_y);
                module_b(&y_p, &x_a[sc], var_a[sc], &obs.h[sc], &grams[sc], noise_var)
            })
            .collect();
        let var_p = (noise_var / n_occ * per_sc.iter().map(|(_, md)| md).sum::<f64>()).max(VAR_FLOOR);
        if !var_p.is_finite() || per_sc.iter().any(|(x, _)| x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite())) {
            return Err(Error::Numerical(format!("dequantization diverged at iteration {}", it + 1)));
        }

        // Module C per user on the despread, unscaled symbols
        let var_sym = var_p / (scale * scale);
        let results: Vec<(Vec<C64>, Vec<f64>, Vec<f64>)> = (0..u)
            .into_par_iter()
            .map(|ui| {
                let xp: Vec<C64> = (0..ms).map(|m| per_sc[cfg.subcarrier(m)].0[ui] / scale).collect();
                let mut mean: Vec<C64> = means.column(ui).iter().copied().collect();
                let mut var = vec![0.0; ms];
                let mut post = vec![0.0; ms * np];
                let lp = &log_prior[ui * ms * np..(ui + 1) * ms * np];
                module_c(&xp, None, var_sym, &points, lp, &mut mean, &mut var, &mut post);
                (mean, var, post)
            })
            .collect();

        // total-variation change of the symbol posteriors
        let mut tv: f64 = 0.0;
        for (ui, (_, _, post)) in results.iter().enumerate() {
            let old = &log_prior[ui * ms * np..(ui + 1) * ms * np];
            for m in 0..ms {
                let d: f64 = (0..np).map(|i| (post[m * np + i].exp() - old[m * np + i].exp()).abs()).sum();
                tv = tv.max(0.5 * d);
            }
        }

        // prior update: posteriors become the next priors
        let mut mean_var = vec![0.0; ms];
        for (ui, (mean, var, post)) in results.into_iter().enumerate() {
            log_prior[ui * ms * np..(ui + 1) * ms * np].copy_from_slice(&post);
            for m in 0..ms {
                means[(m, ui)] = mean[m];
                mean_var[m] += var[m] / u as f64;
            }
        }
        for ui in 0..u {
            let col: Vec<C64> = means.column(ui).iter().copied().collect();
            let xf = cfg.spread(&col);
            for sc in 0..n {
                x_a[sc][ui] = xf[sc] * scale;
            }
        }
        var_a.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..ms {
            var_a[cfg.subcarrier(m)] = mean_var[m] * scale * scale;
        }
        if tv < dq.tol {
            break;
        }
    }

    let bits = (0..u)
        .map(|ui| {
            let lp = &log_prior[ui * ms * np..(ui + 1) * ms * np];
            let mut out = Vec::with_capacity(cfg.bits_per_frame());
            for m in 0..ms {
                let best = (0..np).max_by(|&a, &b| lp[m * np + a].total_cmp(&lp[m * np + b])).unwrap_or(0);
                cfg.modulation.label_bits(best, &mut out);
            }
            out
        })
        .collect();
    Ok(DequantOutput { users: obs.users.clone(), bits, iterations, symbols: means })
}
