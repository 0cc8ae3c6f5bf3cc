//! Dense complex linear algebra and DFT helpers shared across modules.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;

pub type C64 = Complex64;
pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;
pub type RMat = DMatrix<f64>;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Result of a least-squares solve through the pseudo-inverse.
#[derive(Debug, Clone)]
pub struct LsSolution {
    pub x: CMat,
    /// Numerical rank after truncation.
    pub rank: usize,
    /// Ratio of largest to smallest retained singular value.
    pub condition: f64,
}

/// Least-squares solve `min ||a x - b||` with singular values below
/// `rel_tol * sigma_max` treated as zero.
pub fn pinv_solve(a: &CMat, b: &CMat, rel_tol: f64) -> LsSolution {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return LsSolution { x: CMat::zeros(n, b.ncols()), rank: 0, condition: f64::INFINITY };
    }
    if m > 2 * n {
        // tall systems: reduce to the n x n triangular factor first, which
        // has the same singular values and the same minimum-norm solution
        let qr = a.clone().qr();
        let mut qb = b.clone();
        qr.q_tr_mul(&mut qb);
        return pinv_solve(&qr.r(), &qb.rows(0, n).into_owned(), rel_tol);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rel_tol * smax;
    let mut rank = 0;
    let mut smin = f64::INFINITY;
    let uhb = u.adjoint() * b;
    let mut scaled = CMat::zeros(svd.singular_values.len(), b.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            smin = smin.min(s);
            for c in 0..b.ncols() {
                scaled[(i, c)] = uhb[(i, c)] / s;
            }
        }
    }
    let x = vt.adjoint() * scaled;
    let condition = if rank == 0 { f64::INFINITY } else { smax / smin };
    LsSolution { x, rank, condition }
}

/// Unitary DFT along the rows of every column: `F_N * x` with
/// `[F_N]_{m,n} = exp(-j 2 pi m n / N) / sqrt(N)`.
pub fn dft_columns(x: &CMat, inverse: bool) -> CMat {
    let n = x.nrows();
    let mut out = x.clone();
    if n == 0 {
        return out;
    }
    let fft = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    let scale = 1.0 / (n as f64).sqrt();
    for mut col in out.column_iter_mut() {
        let slice = col.as_mut_slice();
        fft.process(slice);
        for v in slice.iter_mut() {
            *v *= scale;
        }
    }
    out
}

/// Unitary DFT of a vector.
pub fn dft(x: &[C64], inverse: bool) -> Vec<C64> {
    let m = CMat::from_column_slice(x.len(), 1, x);
    dft_columns(&m, inverse).as_slice().to_vec()
}

pub fn frobenius_sq(m: &CMat) -> f64 {
    m.iter().map(|v| v.norm_sqr()).sum()
}

/// `10 log10(ratio)` with a floor for exact zeros.
pub fn to_db(ratio: f64, floor_db: f64) -> f64 {
    if ratio <= 0.0 {
        floor_db
    } else {
        (10.0 * ratio.log10()).max(floor_db)
    }
}
