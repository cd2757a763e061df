//! Oracle-equivalence checks runnable from a release binary.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::{CoordFrame, DatasetParts, SpatialDataset};
use crate::diagnostics::{morans_i, morans_i_dense, MaxBiasSolver};
use crate::error::Result;
use crate::gls::{gls_fit, implied_weights, ridge_fit};
use crate::oracles::max_bias_projected_gradient;
use crate::qp::{minimal_dispersion_problem, solve_eq, QpMethod, QpSettings};
use crate::structures::SpatialStructure;
use crate::sw::{sw_fit, AugmentedDesign, Basis, DeltaSpec, SwOptions};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Largest discrepancy observed.
    pub error: f64,
    pub tolerance: f64,
}

fn check(name: &str, error: f64, tolerance: f64) -> Check {
    Check { name: name.into(), passed: error.is_finite() && error <= tolerance, error, tolerance }
}

fn toy(n: usize, seed: u64) -> Result<SpatialDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>() * 2e4, rng.random::<f64>() * 2e4]).collect();
    let x1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z: Vec<bool> = (0..n).map(|i| coords[i][0] + 5e3 * x1[i] > 1e4).collect();
    let y = (0..n).map(|i| 0.5 * x1[i] + coords[i][1] / 1e4 + if z[i] { 1.0 } else { 0.0 }).collect();
    SpatialDataset::new(
        CoordFrame::Planar,
        DatasetParts {
            ids: (0..n).map(|i| format!("u{i}")).collect(),
            coords,
            cluster: (0..n).map(|i| format!("c{}", i % 6)).collect(),
            covariates: vec![("x1".into(), x1)],
            z,
            y: Some(y),
        },
    )
}

/// Runs every check; an `Err` means a check could not be evaluated at all.
pub fn run() -> Result<Vec<Check>> {
    let ds = toy(48, 11)?;
    let structures = [
        SpatialStructure::build_re(&ds, 1.0, 4.0)?,
        SpatialStructure::build_icar(&ds, 4, 1.0, 4.0)?,
        SpatialStructure::build_gp_matern(&ds, 1.5, 4e3, 1.0, 4.0)?,
    ];
    let y = ds.require_y()?;
    let mut out = Vec::new();

    for st in &structures {
        let kind = st.kind().as_str();
        let fit = gls_fit(&ds, st)?;
        out.push(check(&format!("{kind}: implied weights reproduce the GLS coefficient"), (fit.weights.l.dot(y) - fit.tau).abs(), 1e-10));

        let qp = solve_eq(&minimal_dispersion_problem(ds.x(), ds.z(), &st.sigma())?)?;
        out.push(check(&format!("{kind}: minimal-dispersion program matches implied weights"), (&qp.x - &fit.weights.w).amax(), 1e-8));

        let ridge = ridge_fit(&ds, st)?;
        out.push(check(&format!("{kind}: augmented ridge matches GLS"), (ridge.tau - fit.tau).abs(), 1e-8));

        let u = DVector::from_fn(ds.n(), |i, _| ds.coords()[i][0] / 1e4 + ds.x()[(i, 1)]);
        let m = morans_i(&u, st)?;
        let dense = morans_i_dense(&u, st.s(), st.lambda_max())?;
        out.push(check(&format!("{kind}: Moran's I quadratic form matches eigen sum"), (m.value - m.eigen_sum).abs().max((m.value - dense).abs()), 1e-10));

        let iw = implied_weights(&ds, st)?;
        let solver = MaxBiasSolver::new(&iw.l, st)?;
        let (lo, hi) = solver.range();
        let mut worst: f64 = 0.0;
        for frac in [0.2, 0.5, 0.8] {
            let i0 = lo + (hi - lo) * frac;
            if let Some((v, _)) = solver.solve(i0) {
                let oracle = max_bias_projected_gradient(&iw.l, st, i0, 20, 3)?;
                worst = worst.max((v - oracle).abs() / v.abs().max(1e-12));
            } else {
                worst = f64::INFINITY;
            }
        }
        out.push(check(&format!("{kind}: max-bias curve matches projected-gradient oracle"), worst, 1e-4));
    }

    let refs: Vec<&SpatialStructure> = structures.iter().collect();
    let aug = AugmentedDesign::build(&ds, &refs, &[2, 2, 2], Basis::Linear)?;
    let delta = DeltaSpec::Scalar(0.3);
    let ipm = sw_fit(&ds, &aug, &delta, &SwOptions::default())?;
    let admm_opts = SwOptions {
        settings: QpSettings { method: QpMethod::Admm, ..QpSettings::default() },
        ..SwOptions::default()
    };
    let admm = sw_fit(&ds, &aug, &delta, &admm_opts)?;
    out.push(check("SW weights: interior point matches operator splitting", (&ipm.weights - &admm.weights).amax(), 1e-5));

    let q = DMatrix::<f64>::identity(ds.n(), ds.n());
    let flat = SpatialStructure::custom(&q, 1.0, 0.0)?;
    let ols = gls_fit(&ds, &flat)?;
    let mut design = ds.x().clone().insert_column(ds.p(), 0.0);
    for i in 0..ds.n() {
        design[(i, ds.p())] = if ds.z()[i] { 1.0 } else { 0.0 };
    }
    let coef = crate::linalg::least_squares(&design, y)?;
    out.push(check("identity structure reduces to least squares", (ols.tau - coef[ds.p()]).abs(), 1e-10));
    Ok(out)
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        let checks = super::run().unwrap();
        assert!(checks.len() >= 16);
        for c in &checks {
            assert!(c.passed, "{}: {:e} > {:e}", c.name, c.error, c.tolerance);
        }
    }
}
