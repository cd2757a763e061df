//! Generalized least squares, its implied weights, the augmented ridge form and
//! the balance-dispersion curve.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::linalg::{orthonormal_complement, ThinQr};
use crate::structures::{SpatialStructure, StructureKind, WeightProgram};

/// The treatment is considered Σ⁻¹-collinear with X when the weight denominator ZᵀMZ
/// falls below this fraction of ZᵀΣ⁻¹Z.
pub const DEGENERATE_TOL: f64 = 1e-12;

/// Unit-level weights such that τ̂ = Σ_{Z=1} wᵢYᵢ − Σ_{Z=0} wᵢYᵢ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImpliedWeights {
    pub w: DVector<f64>,
    /// Signed weights, lᵢ = wᵢ for treated units and −wᵢ for controls.
    pub l: DVector<f64>,
    /// Σwᵢ².
    pub dispersion: f64,
    /// lᵀΣl, the conditional variance of τ̂ under the working covariance.
    pub c0: f64,
    /// ZᵀΣ⁻¹(I − X(XᵀΣ⁻¹X)⁻¹XᵀΣ⁻¹)Z.
    pub denominator: f64,
    /// Treated minus control weighted mean of each column of X.
    pub covariate_imbalance: Vec<f64>,
    /// Treated minus control weighted mean of each eigenvector of S, in eigenvalue order.
    pub eigen_imbalance: Vec<f64>,
    pub program: WeightProgram,
}

impl ImpliedWeights {
    fn from_signed(
        l: DVector<f64>,
        z: &[bool],
        x: &DMatrix<f64>,
        st: &SpatialStructure,
        denominator: f64,
    ) -> Self {
        let w = DVector::from_fn(l.len(), |i, _| if z[i] { l[i] } else { -l[i] });
        let sigma_l = st.sigma() * &l;
        let covariate_imbalance = (x.transpose() * &l).iter().copied().collect();
        let eigen_imbalance = (st.eigvecs().transpose() * &l).iter().copied().collect();
        Self {
            dispersion: l.norm_squared(),
            c0: l.dot(&sigma_l),
            w,
            l,
            denominator,
            covariate_imbalance,
            eigen_imbalance,
            program: st.program(),
        }
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    /// Weighted difference in means lᵀv for any unit-level vector.
    pub fn contrast(&self, v: &DVector<f64>) -> f64 {
        self.l.dot(v)
    }

    /// Σλₖ(lᵀvₖ)² = lᵀSl.
    pub fn spectral_imbalance(&self, st: &SpatialStructure) -> f64 {
        self.eigen_imbalance
            .iter()
            .zip(st.eigvals().iter())
            .map(|(b, l)| l * b * b)
            .sum()
    }

    /// 1/Σwᵢ².
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.dispersion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Gls,
    Ridge,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlsFit {
    pub method: FitMethod,
    pub covariate_names: Vec<String>,
    pub beta: DVector<f64>,
    pub tau: f64,
    /// Ridge coefficients on the retained eigenvectors (ridge fits only).
    pub gamma: Option<DVector<f64>>,
    pub weights: ImpliedWeights,
    pub kind: StructureKind,
    pub program: WeightProgram,
    pub sigma2: f64,
    pub rho2: f64,
}

/// Cholesky factor of Σ, used to whiten design columns.
pub struct SigmaFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SigmaFactor {
    pub fn new(st: &SpatialStructure) -> Result<Self> {
        let chol = Cholesky::new(st.sigma()).ok_or(Error::NotPsd {
            min: st.sigma2() + st.rho2() * st.lambda_min(),
            tol: 0.0,
        })?;
        Ok(Self { chol })
    }

    /// L⁻¹A.
    pub fn whiten(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.l_dirty().solve_lower_triangular(a).expect("cholesky factor is nonsingular")
    }

    pub fn whiten_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().solve_lower_triangular(v).expect("cholesky factor is nonsingular")
    }

    /// L⁻ᵀv.
    pub fn unwhiten_t(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.l().tr_solve_lower_triangular(v).expect("cholesky factor is nonsingular")
    }
}

fn check_dims(x: &DMatrix<f64>, z: &[bool], st: &SpatialStructure) -> Result<()> {
    if x.nrows() != z.len() || st.n() != z.len() {
        return Err(Error::Dimension(format!(
            "X has {} rows, Z has {}, S is {}x{}",
            x.nrows(),
            z.len(),
            st.n(),
            st.n()
        )));
    }
    Ok(())
}

fn z_vec(z: &[bool]) -> DVector<f64> {
    DVector::from_iterator(z.len(), z.iter().map(|&b| if b { 1.0 } else { 0.0 }))
}

/// Closed-form implied weights of the GLS treatment coefficient.
pub fn implied_weights(ds: &SpatialDataset, st: &SpatialStructure) -> Result<ImpliedWeights> {
    implied_weights_xz(ds.x(), ds.z(), st)
}

pub fn implied_weights_xz(x: &DMatrix<f64>, z: &[bool], st: &SpatialStructure) -> Result<ImpliedWeights> {
    check_dims(x, z, st)?;
    let factor = SigmaFactor::new(st)?;
    implied_weights_with(&factor, x, z, st)
}

fn implied_weights_with(
    factor: &SigmaFactor,
    x: &DMatrix<f64>,
    z: &[bool],
    st: &SpatialStructure,
) -> Result<ImpliedWeights> {
    let xw = factor.whiten(x);
    let zw = factor.whiten_vec(&z_vec(z));
    let qr = ThinQr::new(&xw)?;
    let r = qr.residual(&zw);
    let denominator = r.norm_squared();
    if denominator <= DEGENERATE_TOL * zw.norm_squared() {
        return Err(Error::TreatmentCollinear { denominator });
    }
    let l = factor.unwhiten_t(&r) / denominator;
    Ok(ImpliedWeights::from_signed(l, z, x, st, denominator))
}

/// GLS fit of Y on (X, Z) with covariance Σ.
pub fn gls_fit(ds: &SpatialDataset, st: &SpatialStructure) -> Result<GlsFit> {
    let y = ds.require_y()?;
    let fit = gls_fit_xzy(ds.x(), ds.z(), y, st)?;
    Ok(GlsFit { covariate_names: ds.covariate_names().to_vec(), ..fit })
}

pub fn gls_fit_xzy(x: &DMatrix<f64>, z: &[bool], y: &DVector<f64>, st: &SpatialStructure) -> Result<GlsFit> {
    check_dims(x, z, st)?;
    if y.len() != z.len() {
        return Err(Error::Dimension("Y length differs from n".into()));
    }
    let p = x.ncols();
    let factor = SigmaFactor::new(st)?;
    let mut design = DMatrix::zeros(x.nrows(), p + 1);
    design.columns_mut(0, p).copy_from(x);
    design.set_column(p, &z_vec(z));
    let coef = ThinQr::new(&factor.whiten(&design))?.solve(&factor.whiten_vec(y));
    let weights = implied_weights_with(&factor, x, z, st)?;
    Ok(GlsFit {
        method: FitMethod::Gls,
        covariate_names: default_names(p),
        beta: coef.rows(0, p).into_owned(),
        tau: coef[p],
        gamma: None,
        weights,
        kind: st.kind(),
        program: st.program(),
        sigma2: st.sigma2(),
        rho2: st.rho2(),
    })
}

fn default_names(p: usize) -> Vec<String> {
    (0..p).map(|j| if j == 0 { "intercept".to_string() } else { format!("x{j}") }).collect()
}

/// Eigenvalues at or below this fraction of λ₁ get an infinite ridge penalty.
pub const RIDGE_EXCLUDE_TOL: f64 = 1e-14;

/// Ridge regression of Y on (X, Z, V) with penalty σ²/(ρ²λⱼ) on the j-th eigenvector.
pub fn ridge_fit(ds: &SpatialDataset, st: &SpatialStructure) -> Result<GlsFit> {
    let y = ds.require_y()?;
    let fit = ridge_fit_xzy(ds.x(), ds.z(), y, st)?;
    Ok(GlsFit { covariate_names: ds.covariate_names().to_vec(), ..fit })
}

pub fn ridge_fit_xzy(x: &DMatrix<f64>, z: &[bool], y: &DVector<f64>, st: &SpatialStructure) -> Result<GlsFit> {
    check_dims(x, z, st)?;
    if st.program() == WeightProgram::General {
        return Err(Error::InvalidArgument("ridge form needs an additive covariance with sigma2 > 0".into()));
    }
    let n = x.nrows();
    let p = x.ncols();
    let lambda1 = st.lambda_max();
    let kept: Vec<usize> = if st.rho2() > 0.0 {
        (0..n).filter(|&k| st.eigvals()[k] > RIDGE_EXCLUDE_TOL * lambda1).collect()
    } else {
        Vec::new()
    };
    let j = kept.len();
    let cols = p + 1 + j;
    let mut a = DMatrix::zeros(n + j, cols);
    a.view_mut((0, 0), (n, p)).copy_from(x);
    a.view_mut((0, p), (n, 1)).copy_from(&z_vec(z));
    for (c, &k) in kept.iter().enumerate() {
        a.view_mut((0, p + 1 + c), (n, 1)).copy_from(&st.eigvecs().column(k));
        a[(n + c, p + 1 + c)] = (st.sigma2() / (st.rho2() * st.eigvals()[k])).sqrt();
    }
    let mut rhs = DVector::zeros(n + j);
    rhs.rows_mut(0, n).copy_from(y);
    let qr = ThinQr::new(&a)?;
    let coef = qr.solve(&rhs);

    let mut e_tau = DVector::zeros(cols);
    e_tau[p] = 1.0;
    let u = qr.r.tr_solve_upper_triangular(&e_tau).expect("nonsingular R checked at construction");
    let l = qr.q.rows(0, n) * u;
    let denominator = 1.0 / l.dot(&z_vec(z));
    let weights = ImpliedWeights::from_signed(l, z, x, st, denominator);
    Ok(GlsFit {
        method: FitMethod::Ridge,
        covariate_names: default_names(p),
        beta: coef.rows(0, p).into_owned(),
        tau: coef[p],
        gamma: Some(coef.rows(p + 1, j).into_owned()),
        weights,
        kind: st.kind(),
        program: st.program(),
        sigma2: st.sigma2(),
        rho2: st.rho2(),
    })
}

/// One point of the balance-dispersion curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rho2: f64,
    /// Σλₖ(lᵀvₖ)², the spectral imbalance of the implied weights.
    pub delta: f64,
    /// Σwᵢ².
    pub dispersion: f64,
    /// Σ(wᵢ − w̄)² + 4/n, which equals the dispersion exactly.
    pub dispersion_identity: f64,
    /// lᵀΣl = 1/(ZᵀMZ).
    pub c0: f64,
}

/// Pre-computed pieces of the balance-dispersion curve for one dataset and structure.
///
/// With N an orthonormal basis of col(X)⊥, Σ⁻¹(I − X(XᵀΣ⁻¹X)⁻¹XᵀΣ⁻¹) = N(NᵀΣN)⁻¹Nᵀ,
/// so each grid point costs one (n−p)×(n−p) Cholesky.
pub struct BalanceDispersion {
    basis: DMatrix<f64>,
    nsn: DMatrix<f64>,
    nz: DVector<f64>,
    s: DMatrix<f64>,
    z: Vec<bool>,
    sigma2: f64,
}

impl BalanceDispersion {
    pub fn new(x: &DMatrix<f64>, z: &[bool], st: &SpatialStructure) -> Result<Self> {
        check_dims(x, z, st)?;
        Self::with_basis(orthonormal_complement(x)?, z, st)
    }

    /// Uses a caller-supplied orthonormal basis of col(X)⊥.
    pub fn with_basis(basis: DMatrix<f64>, z: &[bool], st: &SpatialStructure) -> Result<Self> {
        if st.program() == WeightProgram::General {
            return Err(Error::InvalidArgument("balance-dispersion curve needs an additive covariance".into()));
        }
        let nsn = basis.transpose() * st.s() * &basis;
        let nz = basis.transpose() * z_vec(z);
        Ok(Self { basis, nsn, nz, s: st.s().clone(), z: z.to_vec(), sigma2: st.sigma2() })
    }

    pub fn signed_weights(&self, rho2: f64) -> Result<(DVector<f64>, f64)> {
        let m = self.basis.ncols();
        let a = &self.nsn * rho2 + DMatrix::identity(m, m) * self.sigma2;
        let chol = Cholesky::new(a).ok_or(Error::NotPsd { min: 0.0, tol: 0.0 })?;
        let u = chol.solve(&self.nz);
        let den = self.nz.dot(&u);
        if den <= DEGENERATE_TOL * self.nz.norm_squared() / self.sigma2.max(f64::MIN_POSITIVE) {
            return Err(Error::TreatmentCollinear { denominator: den });
        }
        Ok((&self.basis * u / den, den))
    }

    pub fn point(&self, rho2: f64) -> Result<CurvePoint> {
        let (l, den) = self.signed_weights(rho2)?;
        let n = l.len() as f64;
        let w: Vec<f64> = l.iter().zip(&self.z).map(|(v, &t)| if t { *v } else { -v }).collect();
        let wbar = w.iter().sum::<f64>() / n;
        let centered: f64 = w.iter().map(|v| (v - wbar).powi(2)).sum();
        Ok(CurvePoint {
            rho2,
            delta: l.dot(&(&self.s * &l)),
            dispersion: l.norm_squared(),
            dispersion_identity: centered + 4.0 / n,
            c0: 1.0 / den,
        })
    }
}

/// Spectral imbalance Δ and dispersion D of the GLS weights across a grid of ρ².
pub fn balance_dispersion_curve(
    ds: &SpatialDataset,
    st: &SpatialStructure,
    rho2_grid: &[f64],
) -> Result<Vec<CurvePoint>> {
    if rho2_grid.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::InvalidArgument("rho2 grid must be strictly positive".into()));
    }
    if rho2_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("rho2 grid must be strictly increasing".into()));
    }
    let bd = BalanceDispersion::new(ds.x(), ds.z(), st)?;
    rho2_grid.iter().map(|&r| bd.point(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CoordFrame, DatasetParts};
    use crate::linalg::least_squares;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, p_extra: usize, seed: u64, clusters: usize) -> SpatialDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>() * 1e4, rng.random::<f64>() * 1e4]).collect();
        let z: Vec<bool> = (0..n).map(|i| i % 3 == 0 || rng.random::<f64>() < 0.3).collect();
        let covariates = (0..p_extra)
            .map(|j| (format!("x_{j}"), (0..n).map(|_| rng.random::<f64>() - 0.5).collect()))
            .collect();
        let y = Some((0..n).map(|_| rng.random::<f64>()).collect());
        SpatialDataset::new(
            CoordFrame::Planar,
            DatasetParts {
                ids: (0..n).map(|i| format!("u{i}")).collect(),
                coords,
                cluster: (0..n).map(|i| format!("c{}", i % clusters)).collect(),
                covariates,
                z,
                y,
            },
        )
        .unwrap()
    }

    fn gp(ds: &SpatialDataset, rho2: f64) -> SpatialStructure {
        SpatialStructure::build_gp_matern(ds, 0.5, 3000.0, 1.0, rho2).unwrap()
    }

    /// Normal equations solved with an explicit inverse of Σ.
    fn normal_equations_tau(ds: &SpatialDataset, st: &SpatialStructure) -> f64 {
        let p = ds.p();
        let mut d = DMatrix::zeros(ds.n(), p + 1);
        d.columns_mut(0, p).copy_from(ds.x());
        d.set_column(p, &ds.z_vector());
        let si = st.sigma().try_inverse().unwrap();
        let lhs = d.transpose() * &si * &d;
        let rhs = d.transpose() * &si * ds.y().unwrap();
        lhs.lu().solve(&rhs).unwrap()[p]
    }

    #[test]
    fn ols_limit_and_difference_in_means() {
        let ds = toy(30, 0, 1, 3);
        let st = SpatialStructure::re_from_codes(ds.cluster(), 2.0, 0.0).unwrap();
        let iw = implied_weights(&ds, &st).unwrap();
        let (nt, nc) = (ds.n_treated() as f64, ds.n_control() as f64);
        for i in 0..ds.n() {
            let expected = if ds.z()[i] { 1.0 / nt } else { 1.0 / nc };
            assert!((iw.w[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ols_equivalence_when_rho2_zero() {
        let ds = toy(40, 2, 2, 4);
        let st = gp(&ds, 0.0);
        let fit = gls_fit(&ds, &st).unwrap();
        let mut d = DMatrix::zeros(ds.n(), ds.p() + 1);
        d.columns_mut(0, ds.p()).copy_from(ds.x());
        d.set_column(ds.p(), &ds.z_vector());
        let ols = least_squares(&d, ds.y().unwrap()).unwrap();
        assert!((fit.tau - ols[ds.p()]).abs() < 1e-10);
    }

    #[test]
    fn weighted_mean_identity_and_balance() {
        let ds = toy(6, 1, 3, 2);
        for st in [
            gp(&ds, 10.0),
            SpatialStructure::re_from_codes(ds.cluster(), 1.0, 10.0).unwrap(),
            SpatialStructure::build_icar(&ds, 2, 1.0, 10.0).unwrap(),
        ] {
            let fit = gls_fit(&ds, &st).unwrap();
            let oracle = normal_equations_tau(&ds, &st);
            let lty = fit.weights.contrast(ds.y().unwrap());
            assert!((fit.tau - oracle).abs() < 1e-10);
            assert!((lty - oracle).abs() < 1e-10);
            assert!(fit.weights.covariate_imbalance.iter().all(|b| b.abs() < 1e-10));
            let (mut st1, mut st0) = (0.0, 0.0);
            for i in 0..ds.n() {
                if ds.z()[i] {
                    st1 += fit.weights.w[i];
                } else {
                    st0 += fit.weights.w[i];
                }
            }
            assert!((st1 - 1.0).abs() < 1e-10 && (st0 - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn sigma_scale_invariance() {
        let ds = toy(25, 2, 4, 3);
        let a = gls_fit(&ds, &SpatialStructure::re_from_codes(ds.cluster(), 1.0, 3.0).unwrap()).unwrap();
        let b = gls_fit(&ds, &SpatialStructure::re_from_codes(ds.cluster(), 7.0, 21.0).unwrap()).unwrap();
        assert!((a.tau - b.tau).abs() < 1e-10);
        assert!((a.beta - b.beta).abs().max() < 1e-10);
    }

    #[test]
    fn treatment_collinear_is_detected() {
        let ds = toy(20, 0, 5, 2);
        let zcol: Vec<f64> = ds.z().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mut parts_x = ds.x().clone().insert_column(1, 0.0);
        parts_x.set_column(1, &DVector::from_vec(zcol));
        let st = SpatialStructure::re_from_codes(ds.cluster(), 1.0, 1.0).unwrap();
        let err = implied_weights_xz(&parts_x, ds.z(), &st).unwrap_err();
        assert!(matches!(err, Error::TreatmentCollinear { .. } | Error::CollinearDesign));
    }

    #[test]
    fn all_control_cluster_gets_small_weights() {
        let n = 60;
        let ds = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let cluster: Vec<String> = (0..n).map(|i| format!("c{}", i % 4)).collect();
            let z: Vec<bool> = (0..n).map(|i| i % 4 != 3 && rng.random::<f64>() < 0.5).collect();
            SpatialDataset::new(
                CoordFrame::Planar,
                DatasetParts {
                    ids: (0..n).map(|i| i.to_string()).collect(),
                    coords: (0..n).map(|i| [i as f64, 0.0]).collect(),
                    cluster,
                    covariates: vec![("x_a".into(), (0..n).map(|_| rng.random::<f64>()).collect())],
                    z,
                    y: None,
                },
            )
            .unwrap()
        };
        let st = SpatialStructure::build_re(&ds, 1.0, 10.0).unwrap();
        let iw = implied_weights(&ds, &st).unwrap();
        let overall = iw.w.amax();
        let in_cluster = (0..n).filter(|i| i % 4 == 3).map(|i| iw.w[i].abs()).fold(0.0, f64::max);
        assert!(in_cluster < 0.1 * overall, "{in_cluster} vs {overall}");
    }

    #[test]
    fn ridge_matches_gls() {
        let ds = toy(35, 2, 6, 5);
        for st in [
            gp(&ds, 10.0),
            SpatialStructure::build_re(&ds, 1.0, 10.0).unwrap(),
            SpatialStructure::build_icar(&ds, 3, 1.0, 10.0).unwrap(),
        ] {
            let g = gls_fit(&ds, &st).unwrap();
            let r = ridge_fit(&ds, &st).unwrap();
            assert!((g.tau - r.tau).abs() < 1e-8 * (1.0 + g.tau.abs()), "{:?}", st.kind());
            assert!((&g.weights.l - &r.weights.l).amax() < 1e-8, "{:?}", st.kind());
        }
    }

    #[test]
    fn ridge_at_rho2_zero_is_ols() {
        let ds = toy(30, 1, 7, 3);
        let st = SpatialStructure::build_re(&ds, 1.0, 0.0).unwrap();
        let r = ridge_fit(&ds, &st).unwrap();
        assert_eq!(r.gamma.as_ref().unwrap().len(), 0);
        let g = gls_fit(&ds, &st).unwrap();
        assert!((g.tau - r.tau).abs() < 1e-12);
    }

    #[test]
    fn curve_matches_implied_weights_and_is_monotone() {
        let ds = toy(40, 2, 8, 4);
        let st = gp(&ds, 1.0);
        let grid: Vec<f64> = (0..12).map(|k| 10f64.powf(-3.0 + 0.5 * k as f64)).collect();
        let curve = balance_dispersion_curve(&ds, &st, &grid).unwrap();
        for (pt, w) in curve.iter().zip(curve.iter().skip(1)) {
            assert!(w.delta <= pt.delta + 1e-10);
            assert!(w.dispersion >= pt.dispersion - 1e-10);
        }
        for pt in &curve {
            assert!((pt.dispersion - pt.dispersion_identity).abs() < 1e-10);
            let iw = implied_weights(&ds, &st.with_scales(1.0, pt.rho2).unwrap()).unwrap();
            assert!((iw.dispersion - pt.dispersion).abs() < 1e-9 * (1.0 + pt.dispersion));
            assert!((iw.spectral_imbalance(&st) - pt.delta).abs() < 1e-9 * (1.0 + pt.delta));
            assert!((iw.c0 - pt.c0).abs() < 1e-9 * (1.0 + pt.c0));
        }
    }

    #[test]
    fn curve_does_not_depend_on_basis() {
        let ds = toy(25, 1, 10, 3);
        let st = SpatialStructure::build_icar(&ds, 3, 1.0, 1.0).unwrap();
        let a = BalanceDispersion::new(ds.x(), ds.z(), &st).unwrap();
        let basis = orthonormal_complement(ds.x()).unwrap();
        let m = basis.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rot = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5).qr().q();
        let b = BalanceDispersion::with_basis(basis * rot, ds.z(), &st).unwrap();
        for r in [1e-2, 1.0, 50.0] {
            let (pa, pb) = (a.point(r).unwrap(), b.point(r).unwrap());
            assert!((pa.delta - pb.delta).abs() < 1e-10 * (1.0 + pa.delta));
            assert!((pa.dispersion - pb.dispersion).abs() < 1e-10 * (1.0 + pa.dispersion));
        }
    }

    #[test]
    fn curve_rejects_bad_grid() {
        let ds = toy(20, 0, 12, 2);
        let st = gp(&ds, 1.0);
        assert!(balance_dispersion_curve(&ds, &st, &[0.0, 1.0]).is_err());
        assert!(balance_dispersion_curve(&ds, &st, &[2.0, 1.0]).is_err());
    }
}
