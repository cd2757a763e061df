//! Moran's I, confounding-bias bounds and weight diagnostics.

mod maxbias;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{DistanceMatrix, SpatialDataset};
use crate::error::{Error, Result};
use crate::structures::{SpatialStructure, StructureKind, WeightProgram};

pub use maxbias::{max_bias_curve, MaxBiasPoint, MaxBiasSolver};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoranResult {
    pub value: f64,
    /// Same statistic from the eigen-sum Σλᵢ(vᵢᵀũ)²/λ₁ with ũ centered and unit norm.
    pub eigen_sum: f64,
    pub centered: bool,
    pub kind: StructureKind,
}

/// Σ(Uᵢ − Ū)² and the centered vector, rejecting (numerically) constant input.
pub fn centered(u: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let n = u.len();
    if n < 2 {
        return Err(Error::MoranUndefined("need at least two units".into()));
    }
    let mean = u.mean();
    let c = u.map(|v| v - mean);
    let ss = c.norm_squared();
    let scale = u.amax();
    if !(ss > 1e-12 * n as f64 * scale * scale) {
        return Err(Error::MoranUndefined("vector is constant".into()));
    }
    Ok((c, ss))
}

/// Normalized Moran's I, (U−Ū)ᵀS(U−Ū) / (λ₁ Σ(Uᵢ−Ū)²).
pub fn morans_i(u: &DVector<f64>, st: &SpatialStructure) -> Result<MoranResult> {
    if u.len() != st.n() {
        return Err(Error::Dimension(format!("U has {} entries, S is {}x{}", u.len(), st.n(), st.n())));
    }
    let lambda1 = st.lambda_max();
    if lambda1 <= 0.0 {
        return Err(Error::MoranUndefined("S has no positive eigenvalue".into()));
    }
    let (c, ss) = centered(u)?;
    let quad = c.dot(&(st.s() * &c));
    let unit = &c / ss.sqrt();
    let coef = st.eigvecs().transpose() * unit;
    let eigen_sum = coef.iter().zip(st.eigvals().iter()).map(|(a, l)| l * a * a).sum::<f64>() / lambda1;
    Ok(MoranResult {
        value: (quad / (lambda1 * ss)).max(0.0),
        eigen_sum: eigen_sum.max(0.0),
        centered: true,
        kind: st.kind(),
    })
}

/// Inputs of the analytic bias bound for GLS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasBoundInput {
    pub gamma: f64,
    pub moran_i: f64,
    /// Σ(Uᵢ − Ū)².
    pub sum_sq: f64,
    /// σ²Σwᵢ² + ρ²Σλₖ(lᵀvₖ)².
    pub c0: f64,
}

impl BiasBoundInput {
    pub fn from_confounder(gamma: f64, u: &DVector<f64>, c0: f64, st: &SpatialStructure) -> Result<Self> {
        let m = morans_i(u, st)?;
        let (_, sum_sq) = centered(u)?;
        Ok(Self { gamma, moran_i: m.value, sum_sq, c0 })
    }
}

/// Upper bound on |γ lᵀU| for the GLS weights of an additive covariance.
pub fn bias_bound(inp: &BiasBoundInput, st: &SpatialStructure) -> Result<f64> {
    if st.program() == WeightProgram::General || st.sigma2() <= 0.0 {
        return Err(Error::InvalidArgument("bias bound needs sigma2 > 0".into()));
    }
    if inp.c0 < 0.0 || inp.sum_sq < 0.0 {
        return Err(Error::InvalidArgument("c0 and sum of squares must be nonnegative".into()));
    }
    let (s2, r2) = (st.sigma2(), st.rho2());
    let a = s2 + r2 * st.lambda_max();
    let b = s2 + r2 * st.lambda_min();
    let m = s2 + r2 * st.lambda_max() * inp.moran_i;
    let ratio = (a + b).powi(2) / (4.0 * a * b * m);
    Ok(inp.gamma.abs() * (inp.c0 * ratio * inp.sum_sq).sqrt())
}

/// 1/Σwᵢ².
pub fn effective_sample_size(w: &[f64]) -> Result<f64> {
    let ss: f64 = w.iter().map(|v| v * v).sum();
    if !(ss > 0.0) {
        return Err(Error::InvalidArgument("weights are all zero".into()));
    }
    Ok(1.0 / ss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub name: String,
    pub treated_before: f64,
    pub treated_after: f64,
    pub control_before: f64,
    pub control_after: f64,
    /// treated_after − control_after.
    pub imbalance: f64,
}

/// Weighted and unweighted group means of each covariate and extra column.
///
/// `w` holds a weight for every unit; "before" columns are plain group means.
pub fn balance_report(
    ds: &SpatialDataset,
    w: &DVector<f64>,
    extra: &[(String, DVector<f64>)],
) -> Result<Vec<BalanceRow>> {
    let n = ds.n();
    if w.len() != n || extra.iter().any(|(_, c)| c.len() != n) {
        return Err(Error::Dimension("balance report columns must have n entries".into()));
    }
    let z = ds.z();
    let (nt, nc) = (ds.n_treated() as f64, ds.n_control() as f64);
    let row = |name: &str, col: &[f64]| {
        let (mut tb, mut ta, mut cb, mut ca) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if z[i] {
                tb += col[i] / nt;
                ta += w[i] * col[i];
            } else {
                cb += col[i] / nc;
                ca += w[i] * col[i];
            }
        }
        BalanceRow {
            name: name.to_string(),
            treated_before: tb,
            treated_after: ta,
            control_before: cb,
            control_after: ca,
            imbalance: ta - ca,
        }
    };
    let mut out = Vec::new();
    for (j, name) in ds.covariate_names().iter().enumerate() {
        let col: Vec<f64> = ds.x().column(j).iter().copied().collect();
        out.push(row(name, &col));
    }
    for (name, col) in extra {
        out.push(row(name, col.as_slice()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRow {
    pub id: String,
    pub z: bool,
    pub abs_weight: f64,
    pub proximity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// "distance_m" or "opposite_share_in_cluster".
    pub proximity_measure: String,
    pub rows: Vec<LocalizationRow>,
    /// Moran's I of the signed weights l.
    pub moran_l: f64,
}

/// Per-unit |wᵢ| against proximity to the opposite treatment group, plus I(l; S).
///
/// Proximity is the distance to the nearest opposite-group unit, except for
/// random-effects structures where it is the share of opposite-group units in
/// the same cluster.
pub fn localization_report(
    ds: &SpatialDataset,
    w: &DVector<f64>,
    st: &SpatialStructure,
    distances: Option<&DistanceMatrix>,
) -> Result<LocalizationReport> {
    let n = ds.n();
    if w.len() != n || st.n() != n {
        return Err(Error::Dimension("localization report".into()));
    }
    let z = ds.z();
    let l = DVector::from_fn(n, |i, _| if z[i] { w[i] } else { -w[i] });
    let moran_l = morans_i(&l, st)?.value;
    let (measure, proximity): (&str, Vec<f64>) = if st.kind() == StructureKind::Re {
        let codes = ds.cluster();
        let prox = (0..n)
            .map(|i| {
                let members: Vec<usize> = (0..n).filter(|&j| j != i && codes[j] == codes[i]).collect();
                if members.is_empty() {
                    0.0
                } else {
                    members.iter().filter(|&&j| z[j] != z[i]).count() as f64 / members.len() as f64
                }
            })
            .collect();
        ("opposite_share_in_cluster", prox)
    } else {
        let d = distances.ok_or_else(|| Error::InvalidArgument("distances required for proximity".into()))?;
        if d.n() != n {
            return Err(Error::Dimension("distance matrix size".into()));
        }
        let prox = (0..n)
            .map(|i| (0..n).filter(|&j| z[j] != z[i]).map(|j| d.get(i, j)).fold(f64::INFINITY, f64::min))
            .collect();
        ("distance_m", prox)
    };
    let rows = (0..n)
        .map(|i| LocalizationRow {
            id: ds.ids()[i].clone(),
            z: z[i],
            abs_weight: w[i].abs(),
            proximity: proximity[i],
        })
        .collect();
    Ok(LocalizationReport { proximity_measure: measure.to_string(), rows, moran_l })
}

/// Moran's I of a vector against an arbitrary PSD matrix with known top eigenvalue.
pub fn morans_i_dense(u: &DVector<f64>, s: &DMatrix<f64>, lambda1: f64) -> Result<f64> {
    let (c, ss) = centered(u)?;
    Ok((c.dot(&(s * &c)) / (lambda1 * ss)).max(0.0))
}
