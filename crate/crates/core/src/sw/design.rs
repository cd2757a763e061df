use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::gls::implied_weights;
use crate::linalg::{canonical_sign, mean, sample_sd};
use crate::structures::{SpatialStructure, StructureKind, PSD_TOL};

/// Basis functions applied to the augmented design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// Every column of (X, V) as is.
    Linear,
    /// Adds squares and pairwise products of the covariates.
    Quad,
    /// Adds squares and pairwise products of all of (X, V).
    Interact,
}

impl std::str::FromStr for Basis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Basis::Linear),
            "quad" => Ok(Basis::Quad),
            "interact" => Ok(Basis::Interact),
            other => Err(Error::InvalidArgument(format!("unknown basis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnGroup {
    Covariate,
    Eigenvector,
    Higher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugColumn {
    pub name: String,
    pub group: ColumnGroup,
    pub source: Option<StructureKind>,
    /// Zero-based position in the source structure's descending spectrum.
    pub eigen_index: Option<usize>,
    pub lambda: Option<f64>,
    /// Threshold suggested by a GLS fit under the source structure.
    pub auto_delta: Option<f64>,
}

/// Balance functions B₁…B_K evaluated on every unit. The intercept is not a
/// column: the sum-to-one constraint balances it exactly.
#[derive(Debug, Clone)]
pub struct AugmentedDesign {
    pub basis: DMatrix<f64>,
    pub columns: Vec<AugColumn>,
    pub kind: Basis,
    pub warnings: Vec<String>,
}

/// Highest-eigenvalue eigenvectors of each structure, sign-normalized.
///
/// Requests beyond the strictly positive part of a spectrum are trimmed with a
/// warning.
pub fn select_eigenvectors(
    structures: &[&SpatialStructure],
    counts: &[usize],
) -> Result<(DMatrix<f64>, Vec<AugColumn>, Vec<String>)> {
    select(structures, counts).map(|(m, tags, warnings, _)| (m, tags, warnings))
}

type Selection = (DMatrix<f64>, Vec<AugColumn>, Vec<String>, Vec<usize>);

fn select(structures: &[&SpatialStructure], counts: &[usize]) -> Result<Selection> {
    if structures.len() != counts.len() {
        return Err(Error::InvalidArgument("one eigenvector count per structure".into()));
    }
    let n = structures.first().map(|s| s.n()).unwrap_or(0);
    if structures.iter().any(|s| s.n() != n) {
        return Err(Error::Dimension("structures differ in size".into()));
    }
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut tags = Vec::new();
    let mut warnings = Vec::new();
    let mut takes = Vec::new();
    for (s_idx, (st, &count)) in structures.iter().zip(counts).enumerate() {
        let positive = st.eigvals().iter().filter(|&&l| l > PSD_TOL * st.lambda_max()).count();
        let take = count.min(positive);
        takes.push(take);
        if take < count {
            warnings.push(format!(
                "{}: {} eigenvectors requested but only {positive} have positive eigenvalues; zero-eigenvalue directions dropped",
                st.kind(),
                count
            ));
        }
        let dup = structures.iter().filter(|o| o.kind() == st.kind()).count() > 1;
        let prefix = if dup { format!("{}{}", st.kind(), s_idx + 1) } else { st.kind().to_string() };
        for k in 0..take {
            let mut v = st.eigvecs().column(k).into_owned();
            canonical_sign(&mut v);
            cols.push(v);
            tags.push(AugColumn {
                name: format!("{prefix}_v{}", k + 1),
                group: ColumnGroup::Eigenvector,
                source: Some(st.kind()),
                eigen_index: Some(k),
                lambda: Some(st.eigvals()[k]),
                auto_delta: None,
            });
        }
    }
    let m = if cols.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&cols) };
    Ok((m, tags, warnings, takes))
}

fn standardize(v: &DVector<f64>) -> Option<DVector<f64>> {
    let s = v.as_slice();
    let sd = sample_sd(s);
    let scale = v.amax().max(1e-300);
    if !(sd > 1e-10 * scale) {
        return None;
    }
    let m = mean(s);
    Some(v.map(|x| (x - m) / sd))
}

impl AugmentedDesign {
    /// (X, V) with the requested basis expansion and model-suggested thresholds
    /// for the eigenvector columns.
    pub fn build(ds: &SpatialDataset, structures: &[&SpatialStructure], counts: &[usize], kind: Basis) -> Result<Self> {
        if structures.iter().any(|s| s.n() != ds.n()) {
            return Err(Error::Dimension("structure size differs from the dataset".into()));
        }
        let (v, mut vtags, mut warnings, takes) = select(structures, counts)?;

        // thresholds from the GLS weights of each source structure
        let mut offset = 0;
        for (st, &used) in structures.iter().zip(&takes) {
            if used > 0 {
                let iw = implied_weights(ds, st)?;
                let total = iw.spectral_imbalance(st);
                for tag in &mut vtags[offset..offset + used] {
                    let lambda = tag.lambda.expect("eigen column");
                    tag.auto_delta = Some((total / (ds.n() as f64 * lambda)).sqrt());
                }
            }
            offset += used;
        }

        let mut cols: Vec<DVector<f64>> = Vec::new();
        let mut tags = Vec::new();
        for j in 1..ds.p() {
            cols.push(ds.x().column(j).into_owned());
            tags.push(AugColumn {
                name: ds.covariate_names()[j].clone(),
                group: ColumnGroup::Covariate,
                source: None,
                eigen_index: None,
                lambda: None,
                auto_delta: None,
            });
        }
        let n_cov = cols.len();
        for (k, tag) in vtags.into_iter().enumerate() {
            cols.push(v.column(k).into_owned());
            tags.push(tag);
        }

        let base = match kind {
            Basis::Linear => 0,
            Basis::Quad => n_cov,
            Basis::Interact => cols.len(),
        };
        if base > 0 {
            let std: Vec<Option<DVector<f64>>> = cols[..base].iter().map(standardize).collect();
            let mut extra = Vec::new();
            for a in 0..base {
                for b in a..base {
                    let (Some(sa), Some(sb)) = (&std[a], &std[b]) else { continue };
                    let name = if a == b {
                        format!("{}^2", tags[a].name)
                    } else {
                        format!("{}*{}", tags[a].name, tags[b].name)
                    };
                    match standardize(&sa.component_mul(sb)) {
                        Some(c) => extra.push((name, c)),
                        None => warnings.push(format!("basis term {name} is constant and was dropped")),
                    }
                }
            }
            for (name, c) in extra {
                cols.push(c);
                tags.push(AugColumn {
                    name,
                    group: ColumnGroup::Higher,
                    source: None,
                    eigen_index: None,
                    lambda: None,
                    auto_delta: None,
                });
            }
        }
        let basis = if cols.is_empty() { DMatrix::zeros(ds.n(), 0) } else { DMatrix::from_columns(&cols) };
        Ok(Self { basis, columns: tags, kind, warnings })
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn n_eigenvectors(&self) -> usize {
        self.columns.iter().filter(|c| c.group == ColumnGroup::Eigenvector).count()
    }

    /// Per-column thresholds.
    pub fn resolve_deltas(&self, spec: &DeltaSpec) -> Result<Vec<f64>> {
        let out: Vec<f64> = match spec {
            DeltaSpec::Default => self
                .columns
                .iter()
                .map(|c| match c.group {
                    ColumnGroup::Covariate => 0.0,
                    ColumnGroup::Eigenvector => c.auto_delta.expect("eigen columns carry a threshold"),
                    ColumnGroup::Higher => HIGHER_ORDER_DELTA,
                })
                .collect(),
            DeltaSpec::Scalar(d) => vec![*d; self.k()],
            DeltaSpec::PerColumn(v) => {
                if v.len() != self.k() {
                    return Err(Error::Dimension(format!("{} thresholds for {} basis columns", v.len(), self.k())));
                }
                v.clone()
            }
        };
        if out.iter().any(|d| d.is_nan() || *d < 0.0) {
            return Err(Error::InvalidArgument("thresholds must be nonnegative".into()));
        }
        Ok(out)
    }
}

/// Default threshold on squares and products, in standard-deviation units.
pub const HIGHER_ORDER_DELTA: f64 = 0.5;

/// Balance tolerances; infinite entries leave a column unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DeltaSpec {
    /// Exact balance on covariates, model-suggested thresholds on eigenvectors
    /// and 0.5 on higher-order terms.
    Default,
    Scalar(f64),
    PerColumn(Vec<f64>),
}
