//! Spatial covariance structures S and the error covariance Σ = σ²I + ρ²S.

mod bessel;
mod knn;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{default_metric, pairwise_distances, DistanceMatrix, SpatialDataset};
use crate::error::{Error, Result};
use crate::linalg::{canonical_sign, max_abs, max_asymmetry, symmetrize};

pub use bessel::{bessel_k, matern};
pub use knn::{connected_components, knn_adjacency, Adjacency};

/// Relative tolerance separating floating-point noise from genuine negative eigenvalues.
pub const PSD_TOL: f64 = 1e-10;
/// Laplacian eigenvalues at or below this fraction of the largest are treated as null.
pub const LAPLACIAN_NULL_TOL: f64 = 1e-10;
/// Admissible Matérn smoothness range (exclusive lower, inclusive upper).
pub const KAPPA_RANGE: (f64, f64) = (0.01, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Re,
    Icar,
    Gp,
    Custom,
}

impl StructureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StructureKind::Re => "re",
            StructureKind::Icar => "icar",
            StructureKind::Gp => "gp",
            StructureKind::Custom => "custom",
        }
    }
}

impl std::fmt::Display for StructureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which form of the minimal-dispersion program the weights solve.
///
/// `Additive` is Σ = σ²I + ρ²S with σ² > 0. `General` stores an arbitrary
/// positive-definite Σ directly in S with σ² = 0 and ρ² = 1, so the objective
/// loses its separate σ²Σw² term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightProgram {
    Additive,
    General,
}

/// A PSD matrix S with its descending eigendecomposition and the scales (σ², ρ²).
#[derive(Debug, Clone)]
pub struct SpatialStructure {
    kind: StructureKind,
    program: WeightProgram,
    s: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
    sigma2: f64,
    rho2: f64,
    hyper: BTreeMap<String, f64>,
    notes: Vec<String>,
    warnings: Vec<String>,
}

/// Serializable description of a structure, without the matrices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StructureMeta {
    pub kind: StructureKind,
    pub program: WeightProgram,
    pub n: usize,
    pub sigma2: f64,
    pub rho2: f64,
    pub hyperparameters: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
}

fn check_scales(sigma2: f64, rho2: f64, program: WeightProgram) -> Result<()> {
    if !sigma2.is_finite() || !rho2.is_finite() {
        return Err(Error::InvalidArgument("sigma2 and rho2 must be finite".into()));
    }
    match program {
        WeightProgram::Additive if sigma2 <= 0.0 => {
            Err(Error::InvalidArgument(format!("sigma2 must be > 0, got {sigma2}")))
        }
        _ if sigma2 < 0.0 => Err(Error::InvalidArgument(format!("sigma2 must be >= 0, got {sigma2}"))),
        _ if rho2 < 0.0 => Err(Error::InvalidArgument(format!("rho2 must be >= 0, got {rho2}"))),
        _ => Ok(()),
    }
}

/// Descending eigendecomposition of a symmetric PSD matrix.
///
/// Eigenvalues in [-1e-10·λ₁, 0) are clamped to zero and each eigenvector is
/// signed so that its first non-negligible coordinate is positive.
pub fn eig_psd(s: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if s.nrows() != s.ncols() {
        return Err(Error::Dimension(format!("S is {}x{}", s.nrows(), s.ncols())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("S has non-finite entries".into()));
    }
    let asym = max_asymmetry(s);
    if asym > 1e-8 * (1.0 + max_abs(s)) {
        return Err(Error::NotSymmetric(asym));
    }
    let n = s.nrows();
    let eig = SymmetricEigen::new(symmetrize(s));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let lambda1 = if n > 0 { eig.eigenvalues[order[0]].max(0.0) } else { 0.0 };
    let tol = PSD_TOL * lambda1;
    let mut vals = DVector::zeros(n);
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &k) in order.iter().enumerate() {
        let lam = eig.eigenvalues[k];
        if lam < -tol {
            return Err(Error::NotPsd { min: lam, tol: -tol });
        }
        vals[c] = lam.max(0.0);
        let mut v = eig.eigenvectors.column(k).into_owned();
        canonical_sign(&mut v);
        vecs.set_column(c, &v);
    }
    Ok((vecs, vals))
}

impl SpatialStructure {
    fn assemble(
        kind: StructureKind,
        program: WeightProgram,
        s: DMatrix<f64>,
        eigvecs: DMatrix<f64>,
        eigvals: DVector<f64>,
        sigma2: f64,
        rho2: f64,
    ) -> Result<Self> {
        check_scales(sigma2, rho2, program)?;
        Ok(Self {
            kind,
            program,
            s,
            eigvecs,
            eigvals,
            sigma2,
            rho2,
            hyper: BTreeMap::new(),
            notes: Vec::new(),
            warnings: Vec::new(),
        })
    }

    /// Random-effects structure, S_ij = 1{C_i = C_j}.
    pub fn build_re(ds: &SpatialDataset, sigma2: f64, rho2: f64) -> Result<Self> {
        Self::re_from_codes(ds.cluster(), sigma2, rho2)
    }

    /// Random-effects structure from dense cluster codes.
    ///
    /// The spectrum is written down directly: normalized cluster indicators carry
    /// the cluster sizes (largest first, ties by code) and Helmert contrasts
    /// within each cluster span the null space.
    pub fn re_from_codes(codes: &[usize], sigma2: f64, rho2: f64) -> Result<Self> {
        let n = codes.len();
        if n == 0 {
            return Err(Error::InvalidDataset("empty dataset".into()));
        }
        let n_clusters = codes.iter().max().map_or(0, |m| m + 1);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
        for (i, &c) in codes.iter().enumerate() {
            members[c].push(i);
        }
        let mut s = DMatrix::zeros(n, n);
        for group in &members {
            for &i in group {
                for &j in group {
                    s[(i, j)] = 1.0;
                }
            }
        }
        let mut by_size: Vec<usize> = (0..n_clusters).filter(|&c| !members[c].is_empty()).collect();
        by_size.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()).then(a.cmp(&b)));

        let mut vecs = DMatrix::zeros(n, n);
        let mut vals = DVector::zeros(n);
        let mut col = 0;
        for &c in &by_size {
            let m = members[c].len();
            let scale = 1.0 / (m as f64).sqrt();
            for &i in &members[c] {
                vecs[(i, col)] = scale;
            }
            vals[col] = m as f64;
            col += 1;
        }
        for group in &members {
            for j in 1..group.len() {
                let norm = ((j * (j + 1)) as f64).sqrt();
                for &i in &group[..j] {
                    vecs[(i, col)] = 1.0 / norm;
                }
                vecs[(group[j], col)] = -(j as f64) / norm;
                col += 1;
            }
        }
        let mut out = Self::assemble(StructureKind::Re, WeightProgram::Additive, s, vecs, vals, sigma2, rho2)?;
        out.hyper.insert("clusters".into(), by_size.len() as f64);
        Ok(out)
    }

    /// Intrinsic CAR structure on the symmetrized k-nearest-neighbour graph.
    pub fn build_icar(ds: &SpatialDataset, k_neighbors: usize, sigma2: f64, rho2: f64) -> Result<Self> {
        let d = pairwise_distances(ds, default_metric(ds.frame()))?;
        Self::icar_from_distances(&d, k_neighbors, sigma2, rho2)
    }

    pub fn icar_from_distances(d: &DistanceMatrix, k_neighbors: usize, sigma2: f64, rho2: f64) -> Result<Self> {
        let adj = knn_adjacency(d, k_neighbors)?;
        let mut out = Self::icar_from_adjacency(&adj.matrix, sigma2, rho2)?;
        out.hyper.insert("k_neighbors".into(), k_neighbors as f64);
        out.warnings.extend(adj.warnings);
        Ok(out)
    }

    /// S = L⁺ for the graph Laplacian L = D − A.
    ///
    /// Null directions of L are replaced by normalized connected-component
    /// indicators, which span the same space.
    pub fn icar_from_adjacency(a: &DMatrix<f64>, sigma2: f64, rho2: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension("adjacency must be square".into()));
        }
        let mut lap = -a.clone();
        for i in 0..n {
            lap[(i, i)] = a.row(i).sum() - a[(i, i)];
        }
        let eig = SymmetricEigen::new(symmetrize(&lap));
        let mu_max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(*v));
        let null_tol = LAPLACIAN_NULL_TOL * mu_max.max(f64::MIN_POSITIVE);
        let mut positive: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > null_tol).collect();
        positive.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)));

        let components = connected_components(a);
        let n_comp = components.iter().max().map_or(0, |m| m + 1);
        if positive.len() + n_comp != n {
            return Err(Error::DegenerateProgram(format!(
                "laplacian null space has dimension {} but graph has {} components",
                n - positive.len(),
                n_comp
            )));
        }

        let mut vecs = DMatrix::zeros(n, n);
        let mut vals = DVector::zeros(n);
        for (c, &k) in positive.iter().enumerate() {
            let mut v = eig.eigenvectors.column(k).into_owned();
            canonical_sign(&mut v);
            vecs.set_column(c, &v);
            vals[c] = 1.0 / eig.eigenvalues[k];
        }
        for comp in 0..n_comp {
            let idx: Vec<usize> = (0..n).filter(|&i| components[i] == comp).collect();
            let scale = 1.0 / (idx.len() as f64).sqrt();
            for i in idx {
                vecs[(i, positive.len() + comp)] = scale;
            }
        }
        let s = reconstruct(&vecs, &vals);
        let mut out = Self::assemble(StructureKind::Icar, WeightProgram::Additive, s, vecs, vals, sigma2, rho2)?;
        out.hyper.insert("components".into(), n_comp as f64);
        out.notes.push("S is the Moore-Penrose pseudoinverse of the graph Laplacian".into());
        Ok(out)
    }

    /// Gaussian-process structure with a Matérn correlation.
    pub fn build_gp_matern(ds: &SpatialDataset, kappa: f64, phi: f64, sigma2: f64, rho2: f64) -> Result<Self> {
        let d = pairwise_distances(ds, default_metric(ds.frame()))?;
        Self::gp_from_distances(&d, kappa, phi, sigma2, rho2)
    }

    pub fn gp_from_distances(d: &DistanceMatrix, kappa: f64, phi: f64, sigma2: f64, rho2: f64) -> Result<Self> {
        if !(kappa > KAPPA_RANGE.0 && kappa <= KAPPA_RANGE.1) {
            return Err(Error::InvalidArgument(format!(
                "kappa must lie in ({}, {}], got {kappa}",
                KAPPA_RANGE.0, KAPPA_RANGE.1
            )));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::InvalidArgument(format!("phi must be > 0, got {phi}")));
        }
        check_scales(sigma2, rho2, WeightProgram::Additive)?;
        let n = d.n();
        let mut k = DMatrix::identity(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = matern(d.get(i, j), kappa, phi);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let (vecs, vals) = eig_psd(&k)?;
        let mut out = Self::assemble(StructureKind::Gp, WeightProgram::Additive, k, vecs, vals, sigma2, rho2)?;
        out.hyper.insert("kappa".into(), kappa);
        out.hyper.insert("phi".into(), phi);
        Ok(out)
    }

    /// User-supplied PSD matrix S in the additive model.
    pub fn custom(s: &DMatrix<f64>, sigma2: f64, rho2: f64) -> Result<Self> {
        check_scales(sigma2, rho2, WeightProgram::Additive)?;
        let (vecs, vals) = eig_psd(s)?;
        Self::assemble(StructureKind::Custom, WeightProgram::Additive, symmetrize(s), vecs, vals, sigma2, rho2)
    }

    /// User-supplied positive-definite error covariance Σ, used as is.
    pub fn custom_sigma(sigma: &DMatrix<f64>) -> Result<Self> {
        let (vecs, vals) = eig_psd(sigma)?;
        let n = vals.len();
        if n == 0 || vals[n - 1] <= PSD_TOL * vals[0] {
            return Err(Error::NotPsd {
                min: if n == 0 { 0.0 } else { vals[n - 1] },
                tol: PSD_TOL * if n == 0 { 0.0 } else { vals[0] },
            });
        }
        let mut out = Self::assemble(
            StructureKind::Custom,
            WeightProgram::General,
            symmetrize(sigma),
            vecs,
            vals,
            0.0,
            1.0,
        )?;
        out.notes.push("general covariance: sigma2 = 0, rho2 = 1, S holds the full covariance".into());
        Ok(out)
    }

    /// Same S and eigendecomposition with new scales.
    pub fn with_scales(&self, sigma2: f64, rho2: f64) -> Result<Self> {
        if self.program == WeightProgram::General {
            return Err(Error::InvalidArgument("a general covariance has fixed scales".into()));
        }
        check_scales(sigma2, rho2, self.program)?;
        let mut out = self.clone();
        out.sigma2 = sigma2;
        out.rho2 = rho2;
        Ok(out)
    }

    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn program(&self) -> WeightProgram {
        self.program
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn eigvals(&self) -> &DVector<f64> {
        &self.eigvals
    }

    pub fn lambda_max(&self) -> f64 {
        if self.eigvals.is_empty() {
            0.0
        } else {
            self.eigvals[0]
        }
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigvals.iter().last().copied().unwrap_or(0.0)
    }

    /// Number of eigenvalues above 1e-10·λ₁.
    pub fn positive_rank(&self) -> usize {
        let tol = PSD_TOL * self.lambda_max();
        self.eigvals.iter().filter(|&&l| l > tol).count()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn rho2(&self) -> f64 {
        self.rho2
    }

    pub fn hyperparameters(&self) -> &BTreeMap<String, f64> {
        &self.hyper
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Σ = σ²I + ρ²S.
    pub fn sigma(&self) -> DMatrix<f64> {
        let n = self.n();
        &self.s * self.rho2 + DMatrix::identity(n, n) * self.sigma2
    }

    /// Eigenvalues of Σ, aligned with the eigenvectors of S.
    pub fn sigma_eigvals(&self) -> DVector<f64> {
        self.eigvals.map(|l| self.sigma2 + self.rho2 * l)
    }

    pub fn meta(&self) -> StructureMeta {
        StructureMeta {
            kind: self.kind,
            program: self.program,
            n: self.n(),
            sigma2: self.sigma2,
            rho2: self.rho2,
            hyperparameters: self.hyper.clone(),
            notes: self.notes.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

fn reconstruct(vecs: &DMatrix<f64>, vals: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = vecs.clone();
    for (c, &l) in vals.iter().enumerate() {
        scaled.column_mut(c).scale_mut(l);
    }
    symmetrize(&(scaled * vecs.transpose()))
}
