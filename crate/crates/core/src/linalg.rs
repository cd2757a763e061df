//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance on |R_jj| below which a QR factor is treated as rank deficient.
pub(crate) const RANK_TOL: f64 = 1e-10;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Thin QR of `a` with a rank check on the diagonal of R.
pub(crate) struct ThinQr {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl ThinQr {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() < a.ncols() {
            return Err(Error::CollinearDesign);
        }
        let qr = a.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let diag_max = (0..r.ncols()).fold(0.0_f64, |acc, j| acc.max(r[(j, j)].abs()));
        if diag_max == 0.0 || (0..r.ncols()).any(|j| r[(j, j)].abs() <= RANK_TOL * diag_max) {
            return Err(Error::CollinearDesign);
        }
        Ok(Self { q, r })
    }

    /// Least-squares coefficients for `b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let qtb = self.q.transpose() * b;
        self.r
            .solve_upper_triangular(&qtb)
            .expect("nonsingular R checked at construction")
    }

    /// Residual of `b` after projection onto the column space.
    pub fn residual(&self, b: &DVector<f64>) -> DVector<f64> {
        b - &self.q * (self.q.transpose() * b)
    }
}

/// Ordinary least squares coefficients of `y` on `a`.
pub fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(ThinQr::new(a)?.solve(y))
}

/// Orthonormal basis (as columns) of the orthogonal complement of col(`x`).
pub fn orthonormal_complement(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let qr = ThinQr::new(x)?;
    let proj = DMatrix::identity(n, n) - &qr.q * qr.q.transpose();
    let eig = SymmetricEigen::new(symmetrize(&proj));
    let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 0.5).collect();
    let mut basis = DMatrix::zeros(n, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        basis.set_column(c, &eig.eigenvectors.column(k));
    }
    Ok(basis)
}

/// Orthonormal basis of the vectors orthogonal to the all-ones vector (n × (n-1)).
pub fn centered_basis(n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(n, n.saturating_sub(1));
    for j in 1..n {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            h[(i, j - 1)] = 1.0 / norm;
        }
        h[(j, j - 1)] = -(j as f64) / norm;
    }
    h
}

/// Flip `v` so its first coordinate that is not negligible is positive.
pub fn canonical_sign(v: &mut DVector<f64>) {
    let scale = v.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    if scale == 0.0 {
        return;
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * scale) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
