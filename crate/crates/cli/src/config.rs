//! Command-line flags and the JSON run configuration they override.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use spweight::qp::QpMethod;
use spweight::{Basis, Schema, SimulationConfig};

#[derive(Debug, Parser)]
#[command(name = "spweight", version, about = "Spatial regression models as balancing weights")]
pub struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for parallel steps.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// GLS implied weights for one spatial structure.
    Weights(WeightsArgs),
    /// Balance, localization, max-bias or Moran's I reports.
    Diagnose(DiagnoseArgs),
    /// Spatial weighting estimate with augmented balance constraints.
    Estimate(EstimateArgs),
    /// Seeded simulation battery on a synthetic geometry.
    Simulate(SimulateArgs),
    /// Runs the oracle-equivalence checks.
    Selftest,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Coordinate frame of the dataset: geographic or planar.
    #[arg(long)]
    pub frame: Option<String>,
    /// Structure specs such as re, icar:k=5, gp:kappa=0.5:phi=50000, custom:S.csv, custom-sigma:SIGMA.csv.
    #[arg(long = "structures", alias = "structure", value_delimiter = ',')]
    pub structures: Vec<String>,
    /// Unstructured variance σ² (default 1)
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Spatial variance ρ² (default 1)
    #[arg(long)]
    pub rho2: Option<f64>,
    /// Seed for bootstrap resampling
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Also export the structure with this many leading eigenvectors (0 for eigenvalues only).
    #[arg(long)]
    pub export_structure: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// balance, localization, maxbias or moran.
    #[arg(long)]
    pub report: Option<String>,
    /// Weights CSV (id,z,w,l) to diagnose instead of the GLS implied weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Leading eigenvectors per structure added to the balance table.
    #[arg(long)]
    pub report_eigvecs: Option<usize>,
    /// Moran's I values for the max-bias curve (default 0.05, 0.10, …, 1)
    #[arg(long, value_delimiter = ',')]
    pub moran_grid: Vec<f64>,
    /// Confounder effect sizes for the max-bias curve (default 1)
    #[arg(long, value_delimiter = ',')]
    pub gamma_grid: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Eigenvectors taken from each structure, in order.
    #[arg(long, value_delimiter = ',')]
    pub eigvecs: Vec<usize>,
    /// auto, auto:1, auto:3, auto:5, a scalar, or a CSV file of name,delta rows.
    #[arg(long)]
    pub delta: Option<String>,
    /// Balance functions: linear, quad or interact
    #[arg(long)]
    pub basis: Option<String>,
    /// Bootstrap replicates (0 disables).
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Bootstrap interval coverage (default 0.95)
    #[arg(long)]
    pub level: Option<f64>,
    /// interior_point or admm.
    #[arg(long)]
    pub qp_method: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Confounder classes: cluster, adjacency, distance.
    #[arg(long, value_delimiter = ',')]
    pub scenario: Vec<String>,
    /// Outcome models: linear, linear-interaction, nonlinear.
    #[arg(long, value_delimiter = ',')]
    pub model: Vec<String>,
    /// Estimators: ols, re, car, gp, sc, sw
    #[arg(long, value_delimiter = ',')]
    pub estimators: Vec<String>,
    /// Replicates per scenario (default 100)
    #[arg(long)]
    pub reps: Option<usize>,
    /// Master seed (default 1)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Units in the synthetic geometry (default 400)
    #[arg(long)]
    pub n: Option<usize>,
    /// n = 1583, 500 replicates and J = 150 unless overridden.
    #[arg(long)]
    pub full_scale: bool,
}

/// Everything that determines the outputs of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub schema: Schema,
    pub structures: Vec<String>,
    pub sigma2: f64,
    pub rho2: f64,
    pub seed: Option<u64>,
    pub eigvecs: Vec<usize>,
    pub delta: String,
    pub basis: Basis,
    pub bootstrap: usize,
    pub level: f64,
    pub qp_method: QpMethod,
    pub report: String,
    pub weights: Option<PathBuf>,
    pub report_eigvecs: usize,
    pub moran_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub export_structure: Option<usize>,
    pub full_scale: bool,
    pub simulation: SimulationConfig,
    /// Not part of the hash.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            schema: Schema::default(),
            structures: Vec::new(),
            sigma2: 1.0,
            rho2: 1.0,
            seed: None,
            eigvecs: Vec::new(),
            delta: "auto".into(),
            basis: Basis::Linear,
            bootstrap: 0,
            level: 0.95,
            qp_method: QpMethod::InteriorPoint,
            report: "balance".into(),
            weights: None,
            report_eigvecs: 5,
            moran_grid: (1..=20).map(|k| k as f64 * 0.05).collect(),
            gamma_grid: vec![1.0],
            export_structure: None,
            full_scale: false,
            simulation: SimulationConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    /// Hex SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A usage problem detected by the front end rather than the library.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn set(map: &mut Map<String, Value>, key: &str, v: impl Serialize) {
    map.insert(key.into(), serde_json::to_value(v).expect("flag value serializes"));
}

fn data_overrides(map: &mut Map<String, Value>, d: &DataArgs) {
    if let Some(p) = &d.dataset {
        set(map, "dataset", p);
    }
    if let Some(f) = &d.frame {
        let schema = map.entry("schema").or_insert_with(|| json!({}));
        if let Value::Object(s) = schema {
            set(s, "frame", f);
        }
    }
    if !d.structures.is_empty() {
        set(map, "structures", &d.structures);
    }
    if let Some(v) = d.sigma2 {
        set(map, "sigma2", v);
    }
    if let Some(v) = d.rho2 {
        set(map, "rho2", v);
    }
    if let Some(v) = d.seed {
        set(map, "seed", v);
    }
}

/// Reads the config file (if any), applies flag overrides and resolves relative
/// paths against the config file's directory.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let (mut root, base) = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
            let Value::Object(m) = v else {
                return Err(usage("config must be a JSON object"));
            };
            (m, path.parent().map(Path::to_path_buf))
        }
        None => (Map::new(), None),
    };
    if let Some(base) = base.filter(|b| !b.as_os_str().is_empty()) {
        for key in ["dataset", "weights"] {
            if let Some(Value::String(p)) = root.get(key) {
                if Path::new(p).is_relative() {
                    let joined = base.join(p);
                    set(&mut root, key, joined);
                }
            }
        }
        if let Some(Value::Array(specs)) = root.get("structures") {
            let fixed: Vec<Value> = specs
                .iter()
                .map(|s| match s.as_str().and_then(|s| s.split_once(':')) {
                    Some((k @ ("custom" | "custom-sigma"), p)) if Path::new(p).is_relative() => {
                        Value::String(format!("{k}:{}", base.join(p).display()))
                    }
                    _ => s.clone(),
                })
                .collect();
            root.insert("structures".into(), Value::Array(fixed));
        }
    }

    match &cli.command {
        Command::Weights(a) => {
            data_overrides(&mut root, &a.data);
            if let Some(k) = a.export_structure {
                set(&mut root, "export_structure", k);
            }
        }
        Command::Diagnose(a) => {
            data_overrides(&mut root, &a.data);
            if let Some(r) = &a.report {
                set(&mut root, "report", r);
            }
            if let Some(w) = &a.weights {
                set(&mut root, "weights", w);
            }
            if let Some(k) = a.report_eigvecs {
                set(&mut root, "report_eigvecs", k);
            }
            if !a.moran_grid.is_empty() {
                set(&mut root, "moran_grid", &a.moran_grid);
            }
            if !a.gamma_grid.is_empty() {
                set(&mut root, "gamma_grid", &a.gamma_grid);
            }
        }
        Command::Estimate(a) => {
            data_overrides(&mut root, &a.data);
            if !a.eigvecs.is_empty() {
                set(&mut root, "eigvecs", &a.eigvecs);
            }
            if let Some(d) = &a.delta {
                set(&mut root, "delta", d);
            }
            if let Some(b) = &a.basis {
                set(&mut root, "basis", b);
            }
            if let Some(b) = a.bootstrap {
                set(&mut root, "bootstrap", b);
            }
            if let Some(l) = a.level {
                set(&mut root, "level", l);
            }
            if let Some(m) = &a.qp_method {
                set(&mut root, "qp_method", m);
            }
        }
        Command::Simulate(a) => {
            if a.full_scale {
                set(&mut root, "full_scale", true);
            }
            let full = root.get("full_scale").and_then(Value::as_bool).unwrap_or(false);
            let sim = root.entry("simulation").or_insert_with(|| json!({}));
            let Value::Object(sim) = sim else {
                return Err(usage("`simulation` must be a JSON object"));
            };
            if full {
                let defaults = SimulationConfig::default().full_scale();
                for key in ["n", "side_m", "replications"] {
                    if !sim.contains_key(key) {
                        let v = serde_json::to_value(&defaults)?[key].clone();
                        sim.insert(key.into(), v);
                    }
                }
            }
            if !a.scenario.is_empty() {
                set(sim, "classes", &a.scenario);
            }
            if !a.model.is_empty() {
                set(sim, "models", &a.model);
            }
            if !a.estimators.is_empty() {
                set(sim, "estimators", &a.estimators);
            }
            if let Some(r) = a.reps {
                set(sim, "replications", r);
            }
            if let Some(s) = a.seed {
                set(sim, "seed", s);
            }
            if let Some(n) = a.n {
                set(sim, "n", n);
            }
        }
        Command::Selftest => {}
    }
    if let Some(o) = &cli.out {
        set(&mut root, "out", o);
    }
    serde_json::from_value(Value::Object(root)).map_err(|e| usage(format!("invalid configuration: {e}")))
}
