//! Monte Carlo harness: spatially smoothed confounders generated given (X, Z),
//! three outcome models and a battery of ATT estimators.

pub mod aipw;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{default_metric, pairwise_distances, CoordFrame, DatasetParts, DistanceMatrix, SpatialDataset};
use crate::error::{Error, Result};
use crate::gls::implied_weights;
use crate::linalg::{mean, sample_sd, ThinQr};
use crate::structures::{knn_adjacency, SpatialStructure};
use crate::sw::{sw_fit, AugmentedDesign, Basis, DeltaSpec, SwOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfounderClass {
    Cluster,
    Adjacency,
    Distance,
}

impl ConfounderClass {
    pub const ALL: [ConfounderClass; 3] = [Self::Cluster, Self::Adjacency, Self::Distance];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cluster => "cluster",
            Self::Adjacency => "adjacency",
            Self::Distance => "distance",
        }
    }
}

impl std::str::FromStr for ConfounderClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown confounder class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeModel {
    Linear,
    LinearInteraction,
    Nonlinear,
}

impl OutcomeModel {
    pub const ALL: [OutcomeModel; 3] = [Self::Linear, Self::LinearInteraction, Self::Nonlinear];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::LinearInteraction => "linear-interaction",
            Self::Nonlinear => "nonlinear",
        }
    }
}

impl std::str::FromStr for OutcomeModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonlinear-interaction" => Ok(Self::Nonlinear),
            _ => Self::ALL
                .into_iter()
                .find(|m| m.as_str() == s)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown outcome model `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Ols,
    Re,
    Car,
    Gp,
    /// AIPW with spatial coordinates as extra nuisance covariates.
    Sc,
    Sw,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [Self::Ols, Self::Re, Self::Car, Self::Gp, Self::Sc, Self::Sw];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ols => "ols",
            Self::Re => "re",
            Self::Car => "car",
            Self::Gp => "gp",
            Self::Sc => "sc",
            Self::Sw => "sw",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator `{s}`")))
    }
}

/// Every knob of the harness. Distances are in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Synthetic geometry size; ignored when a dataset is supplied.
    pub n: usize,
    pub n_clusters: usize,
    pub side_m: f64,
    pub replications: usize,
    pub seed: u64,
    pub classes: Vec<ConfounderClass>,
    pub models: Vec<OutcomeModel>,
    pub estimators: Vec<Estimator>,
    pub adjacency_k: usize,
    pub adjacency_power: u32,
    pub distance_range_m: f64,
    pub icar_k: usize,
    pub gp_kappa: f64,
    pub gp_phi_m: f64,
    pub sigma2: f64,
    pub rho2: f64,
    /// Total SW eigenvectors, split evenly over the RE, CAR and GP structures.
    /// When absent, 150 per 1583 units.
    pub sw_j_total: Option<usize>,
    pub tau: f64,
    pub noise_sd: f64,
    pub u_sd: f64,
    /// Outcome coefficients on standardized covariates; ones when absent.
    pub beta: Option<Vec<f64>>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 400,
            n_clusters: 10,
            side_m: 500_000.0,
            replications: 100,
            seed: 1,
            classes: ConfounderClass::ALL.to_vec(),
            models: OutcomeModel::ALL.to_vec(),
            estimators: Estimator::ALL.to_vec(),
            adjacency_k: 5,
            adjacency_power: 100,
            distance_range_m: 50_000.0,
            icar_k: 5,
            gp_kappa: 0.5,
            gp_phi_m: 50_000.0,
            sigma2: 1.0,
            rho2: 10.0,
            sw_j_total: None,
            tau: 1.0,
            noise_sd: 0.1,
            u_sd: 0.1,
            beta: None,
        }
    }
}

impl SimulationConfig {
    /// Geometry with n = 1583 and M = 500; the square grows so point density is unchanged.
    pub fn full_scale(mut self) -> Self {
        let ratio = 1583.0 / self.n as f64;
        self.side_m *= ratio.sqrt();
        self.n = 1583;
        self.replications = 500;
        self
    }

    pub fn sw_j_for(&self, n: usize) -> usize {
        self.sw_j_total.unwrap_or_else(|| ((150.0 * n as f64 / 1583.0).round() as usize).max(3))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidArgument("replications must be >= 1".into()));
        }
        if self.estimators.is_empty() || self.classes.is_empty() || self.models.is_empty() {
            return Err(Error::InvalidArgument("estimators, classes and models must be nonempty".into()));
        }
        if !(self.distance_range_m > 0.0) || !(self.side_m > 0.0) {
            return Err(Error::InvalidArgument("lengths must be positive".into()));
        }
        if self.adjacency_power == 0 {
            return Err(Error::InvalidArgument("adjacency_power must be >= 1".into()));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n {
            return Err(Error::InvalidArgument("need 1 <= n_clusters <= n".into()));
        }
        if !(self.noise_sd >= 0.0) || !(self.u_sd >= 0.0) {
            return Err(Error::InvalidArgument("standard deviations must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A synthetic dataset with the propensity used to draw Z.
#[derive(Debug, Clone)]
pub struct SyntheticGeometry {
    pub dataset: SpatialDataset,
    pub propensity: DVector<f64>,
}

/// Uniform points on a square, Voronoi clusters around random centers,
/// X₁, X₂ ~ N(0, 1) and Z drawn from a logistic model in X, a cluster effect and
/// a smooth spatial surface.
pub fn synthetic_geometry(n: usize, n_clusters: usize, side_m: f64, seed: u64) -> Result<SyntheticGeometry> {
    if n < 8 || n_clusters == 0 || n_clusters > n {
        return Err(Error::InvalidArgument(format!("cannot build geometry with n={n}, clusters={n_clusters}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // replicate streams count up from zero
    rng.set_stream(u64::MAX);
    for _attempt in 0..100 {
        let centers: Vec<[f64; 2]> =
            (0..n_clusters).map(|_| [rng.random::<f64>() * side_m, rng.random::<f64>() * side_m]).collect();
        let cluster_effect: Vec<f64> = (0..n_clusters).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let phase: [f64; 2] = [rng.random::<f64>() * std::f64::consts::TAU, rng.random::<f64>() * std::f64::consts::TAU];
        let mut coords = Vec::with_capacity(n);
        let mut cluster = Vec::with_capacity(n);
        let mut x1 = Vec::with_capacity(n);
        let mut x2 = Vec::with_capacity(n);
        let mut pi = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for _ in 0..n {
            let c = [rng.random::<f64>() * side_m, rng.random::<f64>() * side_m];
            let k = (0..n_clusters)
                .min_by(|&a, &b| {
                    let da = (centers[a][0] - c[0]).hypot(centers[a][1] - c[1]);
                    let db = (centers[b][0] - c[0]).hypot(centers[b][1] - c[1]);
                    da.total_cmp(&db)
                })
                .expect("at least one cluster");
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let tx = std::f64::consts::TAU * c[0] / side_m;
            let ty = std::f64::consts::TAU * c[1] / side_m;
            let surface = (tx + phase[0]).sin() + (ty + phase[1]).cos();
            let eta = -0.3 + 0.4 * a - 0.4 * b + 0.8 * cluster_effect[k] + 0.8 * surface;
            let p = 1.0 / (1.0 + (-eta).exp());
            coords.push(c);
            cluster.push(k);
            x1.push(a);
            x2.push(b);
            pi.push(p);
            z.push(rng.random::<f64>() < p);
        }
        let mut used: Vec<usize> = cluster.clone();
        used.sort_unstable();
        used.dedup();
        let nt = z.iter().filter(|&&t| t).count();
        if used.len() < n_clusters || nt < 4 || n - nt < 4 {
            continue;
        }
        let parts = DatasetParts {
            ids: (0..n).map(|i| format!("u{i:05}")).collect(),
            coords,
            cluster: cluster.iter().map(|k| format!("c{k:03}")).collect(),
            covariates: vec![("x1".into(), x1), ("x2".into(), x2)],
            z,
            y: None,
        };
        let dataset = SpatialDataset::new(CoordFrame::Planar, parts)?;
        return Ok(SyntheticGeometry { dataset, propensity: DVector::from_vec(pi) });
    }
    Err(Error::InvalidArgument("could not draw a geometry with every cluster and both groups represented".into()))
}

/// Row-normalized smoothing operator M with U = M U₀.
#[derive(Debug, Clone)]
pub struct Smoother {
    class: ConfounderClass,
    /// Dense operator; cluster smoothing uses the codes directly.
    matrix: Option<DMatrix<f64>>,
    codes: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Smoother {
    pub fn new(ds: &SpatialDataset, class: ConfounderClass, cfg: &SimulationConfig, dist: Option<&DistanceMatrix>) -> Result<Self> {
        let owned;
        let dist = match (class, dist) {
            (ConfounderClass::Cluster, _) => None,
            (_, Some(d)) => Some(d),
            (_, None) => {
                owned = pairwise_distances(ds, default_metric(ds.frame()))?;
                Some(&owned)
            }
        };
        let mut warnings = Vec::new();
        let raw = match class {
            ConfounderClass::Cluster => None,
            ConfounderClass::Adjacency => {
                let adj = knn_adjacency(dist.expect("distances"), cfg.adjacency_k)?;
                warnings.extend(adj.warnings);
                Some(scaled_power(&adj.matrix, cfg.adjacency_power))
            }
            ConfounderClass::Distance => {
                Some(dist.expect("distances").matrix().map(|d| (-d / cfg.distance_range_m).exp()))
            }
        };
        let matrix = raw.map(|w| normalize_rows(w, &mut warnings));
        Ok(Self { class, matrix, codes: ds.cluster().to_vec(), warnings })
    }

    /// Smoothing by an arbitrary nonnegative weight matrix.
    pub fn from_weights(ds: &SpatialDataset, w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() != ds.n() || w.ncols() != ds.n() {
            return Err(Error::Dimension("smoothing weights must be n x n".into()));
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("smoothing weights must be finite and nonnegative".into()));
        }
        let mut warnings = Vec::new();
        let matrix = Some(normalize_rows(w, &mut warnings));
        Ok(Self { class: ConfounderClass::Distance, matrix, codes: ds.cluster().to_vec(), warnings })
    }

    pub fn class(&self) -> ConfounderClass {
        self.class
    }

    pub fn apply(&self, u0: &DVector<f64>) -> DVector<f64> {
        match &self.matrix {
            Some(m) => m * u0,
            None => {
                let k = self.codes.iter().max().map_or(0, |m| m + 1);
                let mut sum = vec![0.0; k];
                let mut count = vec![0usize; k];
                for (i, &c) in self.codes.iter().enumerate() {
                    sum[c] += u0[i];
                    count[c] += 1;
                }
                DVector::from_fn(u0.len(), |i, _| sum[self.codes[i]] / count[self.codes[i]] as f64)
            }
        }
    }
}

fn normalize_rows(mut w: DMatrix<f64>, warnings: &mut Vec<String>) -> DMatrix<f64> {
    let mut isolated = 0;
    for i in 0..w.nrows() {
        let s: f64 = w.row(i).sum();
        if s > 0.0 && s.is_finite() {
            w.row_mut(i).scale_mut(1.0 / s);
        } else {
            isolated += 1;
            w.row_mut(i).fill(0.0);
            w[(i, i)] = 1.0;
        }
    }
    if isolated > 0 {
        warnings.push(format!("{isolated} units have zero smoothing weight; they keep their own draw"));
    }
    w
}

/// (A/ρ(A))^p by repeated squaring.
fn scaled_power(a: &DMatrix<f64>, p: u32) -> DMatrix<f64> {
    let rho = SymmetricEigen::new(a.clone()).eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let base = if rho > 0.0 { a / rho } else { a.clone() };
    let mut result: Option<DMatrix<f64>> = None;
    let mut sq = base;
    let mut e = p;
    loop {
        if e & 1 == 1 {
            result = Some(match result {
                None => sq.clone(),
                Some(r) => r * &sq,
            });
        }
        e >>= 1;
        if e == 0 {
            break;
        }
        sq = &sq * &sq;
    }
    result.expect("p >= 1")
}

/// U₀ ~ N(Z, u_sd²) followed by smoothing.
pub fn gen_confounder<R: Rng>(ds: &SpatialDataset, smoother: &Smoother, u_sd: f64, rng: &mut R) -> DVector<f64> {
    let u0 = DVector::from_fn(ds.n(), |i, _| {
        let e: f64 = rng.sample(StandardNormal);
        (if ds.z()[i] { 1.0 } else { 0.0 }) + u_sd * e
    });
    smoother.apply(&u0)
}

/// Covariates (without intercept) centered and scaled to unit sample variance.
pub fn standardized_covariates(ds: &SpatialDataset) -> DMatrix<f64> {
    let x = ds.x();
    let mut out = DMatrix::zeros(ds.n(), ds.p() - 1);
    for j in 1..ds.p() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let (m, s) = (mean(&col), sample_sd(&col));
        let s = if s > 0.0 { s } else { 1.0 };
        for i in 0..ds.n() {
            out[(i, j - 1)] = (col[i] - m) / s;
        }
    }
    out
}

/// Noiseless potential-outcome means under control and treatment.
#[derive(Debug, Clone)]
pub struct OutcomeMeans {
    pub m0: DVector<f64>,
    pub m1: DVector<f64>,
}

impl OutcomeMeans {
    /// Mean over treated units of m₁ − m₀.
    pub fn true_att(&self, z: &[bool]) -> f64 {
        let idx: Vec<usize> = (0..z.len()).filter(|&i| z[i]).collect();
        idx.iter().map(|&i| self.m1[i] - self.m0[i]).sum::<f64>() / idx.len() as f64
    }
}

pub fn outcome_means(
    xs: &DMatrix<f64>,
    u: &DVector<f64>,
    model: OutcomeModel,
    beta: &DVector<f64>,
    tau: f64,
) -> Result<OutcomeMeans> {
    if beta.len() != xs.ncols() {
        return Err(Error::Dimension(format!("beta has {} entries for {} covariates", beta.len(), xs.ncols())));
    }
    if model == OutcomeModel::Nonlinear && xs.ncols() < 2 {
        return Err(Error::InvalidArgument("the nonlinear outcome model needs two covariates".into()));
    }
    let bx = xs * beta;
    let n = u.len();
    let (m0, m1) = match model {
        OutcomeModel::Linear => {
            let m0 = DVector::from_fn(n, |i, _| bx[i] - 0.2 * u[i]);
            let m1 = m0.add_scalar(1.0);
            (m0, m1)
        }
        OutcomeModel::LinearInteraction => {
            let m0 = DVector::from_fn(n, |i, _| bx[i] - 0.5 * u[i]);
            let m1 = DVector::from_fn(n, |i, _| m0[i] + 1.0 + u[i]);
            (m0, m1)
        }
        OutcomeModel::Nonlinear => {
            let m0 = DVector::from_fn(n, |i, _| bx[i] - u[i] * u[i]);
            let m1 = DVector::from_fn(n, |i, _| {
                let (x1, x2) = (xs[(i, 0)], xs[(i, 1)]);
                m0[i] + tau + u[i].sin() + u[i] * (x2 + 1.0) + 0.3 * x1 * x1
            });
            (m0, m1)
        }
    };
    Ok(OutcomeMeans { m0, m1 })
}

/// Observed outcome with N(0, noise_sd²) noise, and the true ATT.
pub fn gen_outcome<R: Rng>(
    ds: &SpatialDataset,
    u: &DVector<f64>,
    model: OutcomeModel,
    beta: &DVector<f64>,
    tau: f64,
    noise_sd: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)> {
    let xs = standardized_covariates(ds);
    let means = outcome_means(&xs, u, model, beta, tau)?;
    let z = ds.z();
    let y = DVector::from_fn(ds.n(), |i, _| {
        let e: f64 = rng.sample(StandardNormal);
        (if z[i] { means.m1[i] } else { means.m0[i] }) + noise_sd * e
    });
    Ok((y, means.true_att(z)))
}

/// Signed OLS weights for the coefficient of Z in a regression on (X, Z).
pub fn ols_weights(x: &DMatrix<f64>, z: &[bool]) -> Result<DVector<f64>> {
    let zv = DVector::from_fn(z.len(), |i, _| if z[i] { 1.0 } else { 0.0 });
    let r = ThinQr::new(x)?.residual(&zv);
    let d = r.dot(&zv);
    if !(d > 1e-10 * zv.norm_squared()) {
        return Err(Error::TreatmentCollinear { denominator: d });
    }
    Ok(r / d)
}

/// Per-estimator summary over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub bias: Option<f64>,
    pub rmse: Option<f64>,
    /// Standard error of the bias estimate.
    pub mc_se: Option<f64>,
    pub succeeded: usize,
    pub excluded: usize,
    /// One entry per replicate; `None` marks an excluded replicate.
    pub estimates: Vec<Option<f64>>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub class: ConfounderClass,
    pub model: OutcomeModel,
    /// Random stream of each replicate under the report seed.
    pub streams: Vec<u64>,
    pub true_att: Vec<f64>,
    pub estimators: Vec<EstimatorSummary>,
}

impl ScenarioReport {
    pub fn summary(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub n: usize,
    pub n_treated: usize,
    pub beta: Vec<f64>,
    pub scenarios: Vec<ScenarioReport>,
    pub warnings: Vec<String>,
}

impl SimulationReport {
    pub fn scenario(&self, class: ConfounderClass, model: OutcomeModel) -> Option<&ScenarioReport> {
        self.scenarios.iter().find(|s| s.class == class && s.model == model)
    }
}

/// Random stream for one replicate, fixed by the scenario identity so that
/// running a subset of scenarios reproduces the same draws.
pub fn replicate_stream(class: ConfounderClass, model: OutcomeModel, rep: usize) -> u64 {
    let scenario = class as u64 * 3 + model as u64;
    (scenario << 32) | rep as u64
}

/// Linear estimators reduce to fixed signed weights because (X, Z) never change.
enum Prepared {
    Linear(DVector<f64>),
    Aipw { design: DMatrix<f64>, propensity: DVector<f64> },
    Failed(String),
}

fn prepare(ds: &SpatialDataset, cfg: &SimulationConfig, dist: &DistanceMatrix, warnings: &mut Vec<String>) -> Vec<(Estimator, Prepared)> {
    let need_structures = cfg.estimators.iter().any(|e| matches!(e, Estimator::Re | Estimator::Car | Estimator::Gp | Estimator::Sw));
    let (re, car, gp) = if need_structures {
        (
            SpatialStructure::re_from_codes(ds.cluster(), cfg.sigma2, cfg.rho2),
            SpatialStructure::icar_from_distances(dist, cfg.icar_k, cfg.sigma2, cfg.rho2),
            SpatialStructure::gp_from_distances(dist, cfg.gp_kappa, cfg.gp_phi_m, cfg.sigma2, cfg.rho2),
        )
    } else {
        let skip = || Err(Error::InvalidArgument("not requested".into()));
        (skip(), skip(), skip())
    };
    let gls = |st: &Result<SpatialStructure>| -> Prepared {
        match st.as_ref().map_err(|e| e.to_string()).and_then(|s| implied_weights(ds, s).map_err(|e| e.to_string())) {
            Ok(iw) => Prepared::Linear(iw.l),
            Err(e) => Prepared::Failed(e),
        }
    };
    cfg.estimators
        .iter()
        .map(|&e| {
            let p = match e {
                Estimator::Ols => match ols_weights(ds.x(), ds.z()) {
                    Ok(l) => Prepared::Linear(l),
                    Err(err) => Prepared::Failed(err.to_string()),
                },
                Estimator::Re => gls(&re),
                Estimator::Car => gls(&car),
                Estimator::Gp => gls(&gp),
                Estimator::Sc => {
                    let design = aipw_design(ds);
                    match aipw::logistic_fit(&design, ds.z()) {
                        Ok(propensity) => Prepared::Aipw { design, propensity },
                        Err(err) => Prepared::Failed(err.to_string()),
                    }
                }
                Estimator::Sw => match (&re, &car, &gp) {
                    (Ok(re), Ok(car), Ok(gp)) => {
                        let j = cfg.sw_j_for(ds.n());
                        let counts = [j / 3 + usize::from(j % 3 > 0), j / 3 + usize::from(j % 3 > 1), j / 3];
                        let fit = AugmentedDesign::build(ds, &[re, car, gp], &counts, Basis::Linear)
                            .and_then(|aug| sw_fit_inflating(ds, &aug, warnings));
                        match fit {
                            Ok(f) => {
                                warnings.extend(f.warnings.iter().map(|w| format!("sw: {w}")));
                                let l = DVector::from_fn(ds.n(), |i, _| if ds.z()[i] { f.weights[i] } else { -f.weights[i] });
                                Prepared::Linear(l)
                            }
                            Err(err) => Prepared::Failed(err.to_string()),
                        }
                    }
                    _ => Prepared::Failed("a spatial structure could not be built".into()),
                },
            };
            if let Prepared::Failed(msg) = &p {
                warnings.push(format!("{}: excluded from every replicate: {msg}", e.as_str()));
            }
            (e, p)
        })
        .collect()
}

/// Default thresholds, loosened by the suggested uniform inflation when the
/// program is infeasible on this geometry.
fn sw_fit_inflating(ds: &SpatialDataset, aug: &AugmentedDesign, warnings: &mut Vec<String>) -> Result<crate::sw::SwFit> {
    let ds = ds.without_outcome();
    let opts = SwOptions::default();
    match sw_fit(&ds, aug, &DeltaSpec::Default, &opts) {
        Err(Error::Infeasible { suggested_inflation: Some(t) }) => {
            warnings.push(format!("sw: default thresholds infeasible; every finite threshold loosened by {t:.4e}"));
            let loosened = aug.resolve_deltas(&DeltaSpec::Default)?.into_iter().map(|d| if d.is_finite() { d + t } else { d }).collect();
            sw_fit(&ds, aug, &DeltaSpec::PerColumn(loosened), &opts)
        }
        other => other,
    }
}

/// (1, X, standardized coordinates).
fn aipw_design(ds: &SpatialDataset) -> DMatrix<f64> {
    let n = ds.n();
    let p = ds.p();
    let mut m = DMatrix::zeros(n, p + 2);
    m.columns_mut(0, p).copy_from(ds.x());
    for k in 0..2 {
        let col: Vec<f64> = ds.coords().iter().map(|c| c[k]).collect();
        let (mu, sd) = (mean(&col), sample_sd(&col));
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for i in 0..n {
            m[(i, p + k)] = (col[i] - mu) / sd;
        }
    }
    m
}

/// Bias, RMSE and Monte Carlo SE of the successful estimates against `truth`.
pub fn summarize(estimator: Estimator, estimates: Vec<std::result::Result<f64, String>>, truth: &[f64]) -> EstimatorSummary {
    let errs: Vec<f64> = estimates.iter().zip(truth).filter_map(|(e, t)| e.as_ref().ok().map(|v| v - t)).collect();
    let m = errs.len();
    let mut failures: Vec<String> = estimates.iter().filter_map(|e| e.as_ref().err().cloned()).collect();
    failures.dedup();
    let bias = (m > 0).then(|| errs.iter().sum::<f64>() / m as f64);
    let rmse = (m > 0).then(|| (errs.iter().map(|e| e * e).sum::<f64>() / m as f64).sqrt());
    let mc_se = (m > 1).then(|| sample_sd(&errs) / (m as f64).sqrt());
    EstimatorSummary {
        estimator,
        bias,
        rmse,
        mc_se,
        succeeded: m,
        excluded: estimates.len() - m,
        estimates: estimates.into_iter().map(|e| e.ok()).collect(),
        failures,
    }
}

/// Runs every (class, model) scenario in the config on a fixed geometry.
pub fn run_battery(cfg: &SimulationConfig, ds: &SpatialDataset) -> Result<SimulationReport> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let xs = standardized_covariates(ds);
    let beta = match &cfg.beta {
        Some(b) => DVector::from_vec(b.clone()),
        None => DVector::from_element(xs.ncols(), 1.0),
    };
    if beta.len() != xs.ncols() {
        return Err(Error::Dimension(format!("beta has {} entries for {} covariates", beta.len(), xs.ncols())));
    }
    let dist = pairwise_distances(ds, default_metric(ds.frame()))?;
    let prepared = prepare(ds, cfg, &dist, &mut warnings);

    let mut scenarios = Vec::new();
    for &class in &cfg.classes {
        let smoother = Smoother::new(ds, class, cfg, Some(&dist))?;
        warnings.extend(smoother.warnings.iter().map(|w| format!("{}: {w}", class.as_str())));
        for &model in &cfg.models {
            let streams: Vec<u64> = (0..cfg.replications).map(|r| replicate_stream(class, model, r)).collect();
            let reps: Vec<Result<(f64, Vec<std::result::Result<f64, String>>)>> = streams
                .par_iter()
                .map(|&stream| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(stream);
                    let u = gen_confounder(ds, &smoother, cfg.u_sd, &mut rng);
                    let (y, truth) = gen_outcome(ds, &u, model, &beta, cfg.tau, cfg.noise_sd, &mut rng)?;
                    let est = prepared
                        .iter()
                        .map(|(_, p)| match p {
                            Prepared::Linear(l) => Ok(l.dot(&y)),
                            Prepared::Aipw { design, propensity } => aipw::control_outcome_fit(design, ds.z(), &y)
                                .and_then(|m0| aipw::aipw_att(&y, ds.z(), propensity, &m0))
                                .map_err(|e| e.to_string()),
                            Prepared::Failed(msg) => Err(msg.clone()),
                        })
                        .collect();
                    Ok((truth, est))
                })
                .collect();
            let reps: Vec<(f64, Vec<std::result::Result<f64, String>>)> = reps.into_iter().collect::<Result<_>>()?;
            let truth: Vec<f64> = reps.iter().map(|r| r.0).collect();
            let estimators = prepared
                .iter()
                .enumerate()
                .map(|(k, (e, _))| summarize(*e, reps.iter().map(|r| r.1[k].clone()).collect(), &truth))
                .collect();
            scenarios.push(ScenarioReport { class, model, streams, true_att: truth, estimators });
        }
    }
    Ok(SimulationReport {
        config: cfg.clone(),
        n: ds.n(),
        n_treated: ds.n_treated(),
        beta: beta.iter().copied().collect(),
        scenarios,
        warnings,
    })
}

/// Synthetic geometry from the config followed by [`run_battery`].
pub fn run_synthetic(cfg: &SimulationConfig) -> Result<SimulationReport> {
    cfg.validate()?;
    let geo = synthetic_geometry(cfg.n, cfg.n_clusters, cfg.side_m, cfg.seed)?;
    run_battery(cfg, &geo.dataset)
}
