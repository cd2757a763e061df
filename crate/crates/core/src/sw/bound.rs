use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structures::SpatialStructure;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwBoundInput {
    /// Moran's I of the confounder under the structure whose eigenvectors were balanced.
    pub moran_i: f64,
    /// Lipschitz constant of the control mean function in U.
    pub eps1: f64,
    /// Sup-norm error of the basis approximation.
    pub eps2: f64,
    /// Σ|ξₖ|δₖ.
    pub eps3: f64,
    /// Number of top eigenvectors of that structure in the basis.
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwBound {
    pub bias_bound: f64,
    pub variance: Option<f64>,
    pub explanation: Option<String>,
}

pub fn epsilon3(xi: &[f64], deltas: &[f64]) -> Result<f64> {
    if xi.len() != deltas.len() {
        return Err(Error::Dimension("coefficients and thresholds differ in length".into()));
    }
    Ok(xi.iter().zip(deltas).map(|(x, d)| if *x == 0.0 { 0.0 } else { x.abs() * d }).sum())
}

/// σ₁²/n_t + σ₀² Σ_{Z=0}wᵢ².
pub fn sw_variance(control_weights: &[f64], n_treated: usize, sigma0_sq: f64, sigma1_sq: f64) -> f64 {
    sigma1_sq / n_treated as f64 + sigma0_sq * control_weights.iter().map(|w| w * w).sum::<f64>()
}

/// ε₃ + 2[ε₂ + ε₁√(λ₁(1 − I)/(λ₁ − λ_{H+1}))], with the conditional variance
/// when noise levels (σ₀², σ₁²) and weights are supplied.
pub fn sw_bias_variance_bound(
    st: &SpatialStructure,
    inp: &SwBoundInput,
    variance_of: Option<(&[f64], usize, f64, f64)>,
) -> Result<SwBound> {
    if !(0.0..=1.0 + 1e-10).contains(&inp.moran_i) {
        return Err(Error::InvalidArgument(format!("Moran's I {} outside [0, 1]", inp.moran_i)));
    }
    if [inp.eps1, inp.eps2, inp.eps3].iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::InvalidArgument("epsilons must be nonnegative".into()));
    }
    let lam = st.eigvals();
    let l1 = st.lambda_max();
    let l_next = if inp.h < lam.len() { lam[inp.h] } else { 0.0 };
    let variance = variance_of.map(|(w, nt, s0, s1)| sw_variance(w, nt, s0, s1));
    let gap = l1 - l_next;
    if inp.h >= lam.len() {
        // the basis spans every eigenvector, so U is reproduced exactly
        return Ok(SwBound { bias_bound: inp.eps3 + 2.0 * inp.eps2, variance, explanation: None });
    }
    if !(gap > 0.0) {
        return Ok(SwBound {
            bias_bound: f64::INFINITY,
            variance,
            explanation: Some(format!(
                "top eigenvalue equals eigenvalue {} ({l1}); the eigenvector approximation term is unbounded",
                inp.h + 1
            )),
        });
    }
    let tail = (l1 * (1.0 - inp.moran_i.min(1.0)) / gap).max(0.0).sqrt();
    Ok(SwBound { bias_bound: inp.eps3 + 2.0 * (inp.eps2 + inp.eps1 * tail), variance, explanation: None })
}
