//! Worst-case confounding bias over centered unit-norm confounders with a
//! prescribed Moran's I.
//!
//! Writing U = PWa with P a Helmert basis of 1⊥ and PᵀSP = W diag(t) Wᵀ, the
//! problem becomes: maximize bᵀa subject to ‖a‖ = 1 and Σ μₖaₖ² = I₀ with
//! μₖ = tₖ/λ₁(S). Stationary points have aₖ ∝ bₖ / (1 + θ(μₖ − I₀)) and the
//! global maximum is the one with every denominator positive; θ solves a
//! monotone secular equation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{bias_bound, BiasBoundInput};
use crate::error::{Error, Result};
use crate::gls::ImpliedWeights;
use crate::linalg::{centered_basis, symmetrize};
use crate::structures::{SpatialStructure, WeightProgram};

const GROUP_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
struct Group {
    mu: f64,
    beta: f64,
    /// Unit direction in a-space; along b when beta > 0.
    dir: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct MaxBiasSolver {
    groups: Vec<Group>,
    basis: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxBiasPoint {
    pub moran: f64,
    pub gamma: f64,
    /// None when no centered vector attains this Moran's I.
    pub max_bias: Option<f64>,
    /// Analytic bound at Σ(U−Ū)² = 1; None for a general covariance.
    pub analytic_bound: Option<f64>,
}

impl MaxBiasSolver {
    pub fn new(l: &DVector<f64>, st: &SpatialStructure) -> Result<Self> {
        let n = st.n();
        if l.len() != n {
            return Err(Error::Dimension("l and S differ in size".into()));
        }
        if n < 3 {
            return Err(Error::InvalidArgument("max bias needs at least three units".into()));
        }
        let lambda1 = st.lambda_max();
        if lambda1 <= 0.0 {
            return Err(Error::MoranUndefined("S has no positive eigenvalue".into()));
        }
        let p = centered_basis(n);
        let t = symmetrize(&(p.transpose() * st.s() * &p));
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..n - 1).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let w = DMatrix::from_fn(n - 1, n - 1, |i, j| eig.eigenvectors[(i, order[j])]);
        let mu: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k] / lambda1).collect();
        let basis = &p * &w;
        let b = basis.transpose() * l;

        let mut groups: Vec<Group> = Vec::new();
        let mut start = 0;
        while start < mu.len() {
            let mut end = start + 1;
            while end < mu.len() && mu[start] - mu[end] <= GROUP_TOL {
                end += 1;
            }
            let mut dir = DVector::zeros(n - 1);
            for k in start..end {
                dir[k] = b[k];
            }
            let mut beta = dir.norm();
            if beta <= 1e-13 * b.norm() {
                beta = 0.0;
                dir.fill(0.0);
            }
            if beta > 0.0 {
                dir /= beta;
            } else {
                dir[start] = 1.0;
            }
            let mean_mu = mu[start..end].iter().sum::<f64>() / (end - start) as f64;
            groups.push(Group { mu: mean_mu, beta, dir });
            start = end;
        }
        Ok(Self { groups, basis })
    }

    /// Attainable range of Moran's I over centered vectors.
    pub fn range(&self) -> (f64, f64) {
        (self.groups.last().expect("nonempty").mu, self.groups[0].mu)
    }

    /// Max of lᵀU and a maximizing U, or None when `i0` is out of range.
    pub fn solve(&self, i0: f64) -> Option<(f64, DVector<f64>)> {
        let (lo_mu, hi_mu) = self.range();
        let tol = GROUP_TOL * hi_mu.abs().max(1.0);
        if i0 < lo_mu - tol || i0 > hi_mu + tol {
            return None;
        }
        let amps = self.amplitudes(i0.clamp(lo_mu, hi_mu), tol);
        let norm = amps.iter().map(|s| s * s).sum::<f64>().sqrt();
        let mut a = DVector::zeros(self.basis.ncols());
        let mut value = 0.0;
        for (g, s) in self.groups.iter().zip(&amps) {
            a.axpy(s / norm, &g.dir, 1.0);
            value += g.beta * s / norm;
        }
        Some((value, &self.basis * a))
    }

    /// Unnormalized amplitude of each group at the optimum.
    fn amplitudes(&self, i0: f64, tol: f64) -> Vec<f64> {
        let g = &self.groups;
        let last = g.len() - 1;
        let point = |k: usize| {
            let mut s = vec![0.0; g.len()];
            s[k] = g[k].beta.max(1.0);
            s
        };
        if g.len() == 1 || (g[0].mu - i0).abs() <= tol {
            return point(0);
        }
        if (g[last].mu - i0).abs() <= tol {
            return point(last);
        }
        if g.iter().all(|gr| gr.beta == 0.0) {
            let mut s = vec![0.0; g.len()];
            let (d0, dl) = (g[0].mu - i0, i0 - g[last].mu);
            s[0] = dl.sqrt();
            s[last] = d0.sqrt();
            return s;
        }
        let d: Vec<f64> = g.iter().map(|gr| gr.mu - i0).collect();
        let theta_lo = -1.0 / d[0];
        let theta_hi = -1.0 / d[last];
        let secular = |theta: f64, skip: Option<usize>| -> f64 {
            (0..g.len())
                .filter(|&k| Some(k) != skip)
                .map(|k| d[k] * (g[k].beta / (1.0 + theta * d[k])).powi(2))
                .sum()
        };
        let amps = |theta: f64| -> Vec<f64> { (0..g.len()).map(|k| g[k].beta / (1.0 + theta * d[k])).collect() };

        if g[last].beta == 0.0 {
            let gh = secular(theta_hi, Some(last));
            if gh >= 0.0 {
                let mut s = amps(theta_hi);
                s[last] = (gh / -d[last]).sqrt();
                return s;
            }
        }
        if g[0].beta == 0.0 {
            let gl = secular(theta_lo, Some(0));
            if gl <= 0.0 {
                let mut s = amps(theta_lo);
                s[0] = (-gl / d[0]).sqrt();
                return s;
            }
        }
        let (mut lo, mut hi) = (theta_lo, theta_hi);
        let mut theta = 0.5 * (lo + hi);
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            theta = mid;
            if secular(mid, None) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        amps(theta)
    }
}

/// Worst-case |γ lᵀU| over centered unit-norm U with I(U; S) = I₀, for each
/// pair of grid values.
pub fn max_bias_curve(
    iw: &ImpliedWeights,
    st: &SpatialStructure,
    morans: &[f64],
    gammas: &[f64],
) -> Result<Vec<MaxBiasPoint>> {
    if morans.iter().chain(gammas).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("grid values must be finite".into()));
    }
    let solver = MaxBiasSolver::new(&iw.l, st)?;
    let additive = st.program() == WeightProgram::Additive && st.sigma2() > 0.0;
    let mut out = Vec::with_capacity(morans.len() * gammas.len());
    for &i0 in morans {
        let best = solver.solve(i0).map(|(v, _)| v);
        for &gamma in gammas {
            let analytic_bound = if additive && (0.0..=1.0).contains(&i0) {
                Some(bias_bound(&BiasBoundInput { gamma, moran_i: i0, sum_sq: 1.0, c0: iw.c0 }, st)?)
            } else {
                None
            };
            out.push(MaxBiasPoint { moran: i0, gamma, max_bias: best.map(|v| gamma.abs() * v), analytic_bound });
        }
    }
    Ok(out)
}
