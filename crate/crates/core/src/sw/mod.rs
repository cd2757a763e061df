//! Spatial weighting: minimum-dispersion nonnegative control weights that
//! balance covariates exactly and selected eigenvectors approximately.

mod bound;
mod design;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::linalg::{quantile_sorted, sample_sd};
use crate::qp::{solve_ineq, QpProblem, QpSettings, QpStatus};
use crate::structures::SpatialStructure;

pub use bound::{epsilon3, sw_bias_variance_bound, sw_variance, SwBound, SwBoundInput};
pub use design::{
    select_eigenvectors, AugColumn, AugmentedDesign, Basis, ColumnGroup, DeltaSpec, HIGHER_ORDER_DELTA,
};

/// Slack allowed on each balance row after the solve.
pub const BALANCE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwBalanceRow {
    pub name: String,
    pub group: ColumnGroup,
    pub treated_mean: f64,
    pub control_before: f64,
    pub control_after: f64,
    pub delta: f64,
    /// control_after − treated_mean.
    pub imbalance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSummary {
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    pub polished: bool,
    pub kkt_stationarity_residual: f64,
    pub primal_feasibility_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub dropped: usize,
    pub se: f64,
    pub level: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Estimates of the successful replicates in replicate order.
    pub estimates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwFit {
    /// Weight of every unit: 1/n_t for treated, the solved weight for controls.
    pub weights: DVector<f64>,
    pub deltas: Vec<f64>,
    pub balance: Vec<SwBalanceRow>,
    pub tau: Option<f64>,
    pub risk_ratio: Option<f64>,
    /// Σ of squared control weights.
    pub dispersion: f64,
    pub ess: f64,
    pub bootstrap: Option<BootstrapSummary>,
    pub qp: QpSummary,
    pub warnings: Vec<String>,
}

impl SwFit {
    pub fn control_weights(&self, z: &[bool]) -> Vec<f64> {
        (0..z.len()).filter(|&i| !z[i]).map(|i| self.weights[i]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SwOptions {
    pub bootstrap: usize,
    pub seed: u64,
    pub level: f64,
    pub settings: QpSettings,
}

impl Default for SwOptions {
    fn default() -> Self {
        Self { bootstrap: 0, seed: 0, level: 0.95, settings: QpSettings::default() }
    }
}

/// The balancing program on a given set of rows.
fn build_problem(basis: &DMatrix<f64>, z: &[bool], deltas: &[f64]) -> Result<(QpProblem, Vec<usize>, DVector<f64>)> {
    let n = z.len();
    let controls: Vec<usize> = (0..n).filter(|&i| !z[i]).collect();
    let nt = n - controls.len();
    if nt == 0 || controls.is_empty() {
        return Err(Error::InvalidDataset("need treated and control units".into()));
    }
    let k = basis.ncols();
    let treated_mean = DVector::from_fn(k, |j, _| (0..n).filter(|&i| z[i]).map(|i| basis[(i, j)]).sum::<f64>() / nt as f64);
    let m = controls.len();
    let eq: Vec<usize> = (0..k).filter(|&j| deltas[j] == 0.0).collect();
    let ineq: Vec<usize> = (0..k).filter(|&j| deltas[j] > 0.0 && deltas[j].is_finite()).collect();

    let mut a_eq = DMatrix::zeros(eq.len() + 1, m);
    let mut b_eq = DVector::zeros(eq.len() + 1);
    a_eq.row_mut(0).fill(1.0);
    b_eq[0] = 1.0;
    for (r, &j) in eq.iter().enumerate() {
        for (c, &i) in controls.iter().enumerate() {
            a_eq[(r + 1, c)] = basis[(i, j)];
        }
        b_eq[r + 1] = treated_mean[j];
    }
    let mut a_ineq = DMatrix::zeros(ineq.len(), m);
    let mut lo = DVector::zeros(ineq.len());
    let mut hi = DVector::zeros(ineq.len());
    for (r, &j) in ineq.iter().enumerate() {
        for (c, &i) in controls.iter().enumerate() {
            a_ineq[(r, c)] = basis[(i, j)];
        }
        lo[r] = treated_mean[j] - deltas[j];
        hi[r] = treated_mean[j] + deltas[j];
    }
    let p = QpProblem {
        q: DMatrix::identity(m, m),
        c: DVector::zeros(m),
        a_eq,
        b_eq,
        a_ineq,
        lo,
        hi,
        nonneg: true,
    };
    Ok((p, controls, treated_mean))
}

/// Solves for control weights; infeasible programs are reported as a status.
fn solve_weights(
    basis: &DMatrix<f64>,
    z: &[bool],
    deltas: &[f64],
    settings: &QpSettings,
) -> Result<(DVector<f64>, Vec<usize>, DVector<f64>, QpSummary)> {
    let (p, controls, tm) = build_problem(basis, z, deltas)?;
    let sol = solve_ineq(&p, settings)?;
    let summary = QpSummary {
        status: sol.status,
        iterations: sol.iterations,
        objective: sol.objective,
        polished: sol.polished,
        kkt_stationarity_residual: sol.kkt_stationarity_residual,
        primal_feasibility_residual: sol.primal_feasibility_residual,
    };
    Ok((sol.x, controls, tm, summary))
}

/// Smallest uniform addition t to every finite threshold that makes the
/// program feasible, padded by 1e-3 relative so that δ + t is strictly feasible.
///
/// Solved directly as min t + ε(t² + Σw²) over (w, t ≥ 0) with every finite row
/// loosened by t.
pub fn suggest_inflation(basis: &DMatrix<f64>, z: &[bool], deltas: &[f64], settings: &QpSettings) -> Result<f64> {
    let (p, _, tm) = build_problem(basis, z, &vec![f64::INFINITY; deltas.len()])?;
    let n = z.len();
    let controls: Vec<usize> = (0..n).filter(|&i| !z[i]).collect();
    let m = controls.len();
    let rows: Vec<usize> = (0..deltas.len()).filter(|&j| deltas[j].is_finite()).collect();
    let mut a_ineq = DMatrix::zeros(2 * rows.len(), m + 1);
    let mut lo = DVector::from_element(2 * rows.len(), f64::NEG_INFINITY);
    let mut hi = DVector::from_element(2 * rows.len(), f64::INFINITY);
    for (r, &j) in rows.iter().enumerate() {
        for (c, &i) in controls.iter().enumerate() {
            a_ineq[(2 * r, c)] = basis[(i, j)];
            a_ineq[(2 * r + 1, c)] = basis[(i, j)];
        }
        // Σwb − t ≤ m + δ and Σwb + t ≥ m − δ
        a_ineq[(2 * r, m)] = -1.0;
        hi[2 * r] = tm[j] + deltas[j];
        a_ineq[(2 * r + 1, m)] = 1.0;
        lo[2 * r + 1] = tm[j] - deltas[j];
    }
    let mut a_eq = DMatrix::zeros(1, m + 1);
    a_eq.view_mut((0, 0), (1, m)).copy_from(&p.a_eq.view((0, 0), (1, m)));
    let eps = 1e-9;
    let mut c = DVector::zeros(m + 1);
    c[m] = 1.0;
    let phase1 = QpProblem {
        q: DMatrix::identity(m + 1, m + 1) * eps,
        c,
        a_eq,
        b_eq: DVector::from_element(1, 1.0),
        a_ineq,
        lo,
        hi,
        nonneg: true,
    };
    let sol = crate::qp::solve_ipm(&phase1, settings)?;
    if sol.status != QpStatus::Optimal {
        return Err(Error::NotConverged { iterations: sol.iterations });
    }
    let t = sol.x[m];
    Ok(if t <= 1e-9 { 0.0 } else { t * (1.0 + 1e-3) })
}

/// Weights, balance table and (when Y is present) the ATT estimate.
pub fn sw_fit(ds: &SpatialDataset, aug: &AugmentedDesign, delta: &DeltaSpec, opts: &SwOptions) -> Result<SwFit> {
    if aug.basis.nrows() != ds.n() {
        return Err(Error::Dimension("augmented design rows differ from the dataset".into()));
    }
    let deltas = aug.resolve_deltas(delta)?;
    let z = ds.z();
    let n = ds.n();
    let (wc, controls, tm, qp) = solve_weights(&aug.basis, z, &deltas, &opts.settings)?;
    match qp.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => {
            let t = suggest_inflation(&aug.basis, z, &deltas, &opts.settings)?;
            return Err(Error::Infeasible { suggested_inflation: Some(t) });
        }
        QpStatus::MaxIter => {
            let t = suggest_inflation(&aug.basis, z, &deltas, &opts.settings)?;
            if t > 0.0 {
                return Err(Error::Infeasible { suggested_inflation: Some(t) });
            }
            return Err(Error::NotConverged { iterations: qp.iterations });
        }
    }
    let nt = ds.n_treated() as f64;
    let mut weights = DVector::from_element(n, 1.0 / nt);
    for (c, &i) in controls.iter().enumerate() {
        weights[i] = wc[c];
    }
    let mut warnings = aug.warnings.clone();
    let nc = controls.len() as f64;
    let balance: Vec<SwBalanceRow> = aug
        .columns
        .iter()
        .enumerate()
        .map(|(j, col)| {
            let after: f64 = controls.iter().enumerate().map(|(c, &i)| wc[c] * aug.basis[(i, j)]).sum();
            let before: f64 = controls.iter().map(|&i| aug.basis[(i, j)]).sum::<f64>() / nc;
            SwBalanceRow {
                name: col.name.clone(),
                group: col.group,
                treated_mean: tm[j],
                control_before: before,
                control_after: after,
                delta: deltas[j],
                imbalance: after - tm[j],
            }
        })
        .collect();
    for row in &balance {
        if row.imbalance.abs() > row.delta + BALANCE_SLACK * (1.0 + row.treated_mean.abs()) {
            warnings.push(format!("{}: imbalance {:.3e} exceeds threshold {:.3e}", row.name, row.imbalance, row.delta));
        }
    }
    let dispersion = wc.norm_squared();
    let ess = 1.0 / (1.0 / nt + dispersion);

    let (tau, risk_ratio) = match ds.y() {
        Some(y) => {
            let (t, rr) = estimate(y, z, &weights);
            if rr.is_none() {
                warnings.push("risk ratio undefined: weighted control mean is zero".into());
            }
            (Some(t), rr)
        }
        None => (None, None),
    };

    let bootstrap = if opts.bootstrap > 0 {
        let y = ds.require_y()?;
        let summary = bootstrap(&aug.basis, z, y, &deltas, opts)?;
        if summary.dropped as f64 > 0.05 * opts.bootstrap as f64 {
            warnings.push(format!("{} of {} bootstrap replicates were infeasible and dropped", summary.dropped, opts.bootstrap));
        }
        Some(summary)
    } else {
        None
    };

    Ok(SwFit { weights, deltas, balance, tau, risk_ratio, dispersion, ess, bootstrap, qp, warnings })
}

/// τ̂ = mean of treated Y − weighted control mean, and the risk ratio.
fn estimate(y: &DVector<f64>, z: &[bool], weights: &DVector<f64>) -> (f64, Option<f64>) {
    let nt = z.iter().filter(|&&t| t).count() as f64;
    let treated: f64 = (0..z.len()).filter(|&i| z[i]).map(|i| y[i]).sum::<f64>() / nt;
    let control: f64 = (0..z.len()).filter(|&i| !z[i]).map(|i| weights[i] * y[i]).sum();
    let tau = treated - control;
    let scale = y.amax().max(f64::MIN_POSITIVE);
    let rr = (control.abs() >= 1e-12 * scale).then(|| treated / control);
    (tau, rr)
}

fn bootstrap(
    basis: &DMatrix<f64>,
    z: &[bool],
    y: &DVector<f64>,
    deltas: &[f64],
    opts: &SwOptions,
) -> Result<BootstrapSummary> {
    let n = z.len();
    let results: Vec<Option<f64>> = (0..opts.bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(b as u64 + 1);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let zb: Vec<bool> = idx.iter().map(|&i| z[i]).collect();
            if zb.iter().all(|&t| t) || zb.iter().all(|&t| !t) {
                return None;
            }
            let bb = basis.select_rows(&idx);
            let yb = DVector::from_fn(n, |i, _| y[idx[i]]);
            let (wc, controls, _, qp) = solve_weights(&bb, &zb, deltas, &opts.settings).ok()?;
            if qp.status != QpStatus::Optimal {
                return None;
            }
            let mut w = DVector::zeros(n);
            for (c, &i) in controls.iter().enumerate() {
                w[i] = wc[c];
            }
            Some(estimate(&yb, &zb, &w).0)
        })
        .collect();
    let estimates: Vec<f64> = results.iter().flatten().copied().collect();
    let dropped = results.len() - estimates.len();
    if estimates.len() < 2 {
        return Err(Error::InvalidArgument("fewer than two bootstrap replicates succeeded".into()));
    }
    let mut sorted = estimates.clone();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - opts.level;
    Ok(BootstrapSummary {
        replicates: opts.bootstrap,
        dropped,
        se: sample_sd(&estimates),
        level: opts.level,
        ci_lower: quantile_sorted(&sorted, alpha / 2.0),
        ci_upper: quantile_sorted(&sorted, 1.0 - alpha / 2.0),
        estimates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JSweepPoint {
    pub j: usize,
    pub tau: Option<f64>,
    pub risk_ratio: Option<f64>,
    pub ess: Option<f64>,
    /// Error message when the fit failed at this J.
    pub error: Option<String>,
}

/// Estimates with the top J eigenvectors of every structure, for each J.
pub fn j_sweep(
    ds: &SpatialDataset,
    structures: &[&SpatialStructure],
    js: &[usize],
    basis: Basis,
    delta: &DeltaSpec,
    settings: &QpSettings,
) -> Result<Vec<JSweepPoint>> {
    let opts = SwOptions { settings: settings.clone(), ..SwOptions::default() };
    js.iter()
        .map(|&j| {
            let counts = vec![j; structures.len()];
            let aug = AugmentedDesign::build(ds, structures, &counts, basis)?;
            Ok(match sw_fit(ds, &aug, delta, &opts) {
                Ok(fit) => JSweepPoint { j, tau: fit.tau, risk_ratio: fit.risk_ratio, ess: Some(fit.ess), error: None },
                Err(e) if matches!(e, Error::Infeasible { .. } | Error::NotConverged { .. }) => {
                    JSweepPoint { j, tau: None, risk_ratio: None, ess: None, error: Some(e.to_string()) }
                }
                Err(e) => return Err(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
