//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};
use spweight::data::default_metric;
use spweight::diagnostics::MaxBiasSolver;
use spweight::export::{self, FitExport, Header, MoranRow};
use spweight::qp::QpSettings;
use spweight::sw::SwBalanceRow;
use spweight::{
    balance_report, gls_fit, implied_weights, load_dataset, localization_report, max_bias_curve, morans_i,
    pairwise_distances, run_synthetic, sw_fit, AugmentedDesign, Basis, DeltaSpec, DistanceMatrix, ErrorClass,
    MaxBiasPoint, SpatialDataset, SpatialStructure, SwOptions,
};

use crate::config::{resolve, usage, Cli, Command, RunConfig, Usage};

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(le) = e.downcast_ref::<spweight::Error>() {
        return match le.class() {
            ErrorClass::Validation => 2,
            ErrorClass::Degenerate => 3,
            ErrorClass::Infeasible => 4,
            ErrorClass::Other => 1,
        };
    }
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    1
}

pub fn execute(cli: Cli) -> Result<ExitCode> {
    if cli.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global().ok();
    let cfg = resolve(&cli)?;
    let mut out = Outputs::new(&cfg, cli.force);
    match &cli.command {
        Command::Weights(_) => cmd_weights(&cfg, &mut out)?,
        Command::Diagnose(_) => cmd_diagnose(&cfg, &mut out)?,
        Command::Estimate(_) => cmd_estimate(&cfg, &mut out)?,
        Command::Simulate(_) => cmd_simulate(&cfg, &mut out)?,
        Command::Selftest => return cmd_selftest(),
    }
    out.commit()?;
    Ok(ExitCode::SUCCESS)
}

/// Output files are rendered in memory and written only once every target is
/// known to be writable.
struct Outputs {
    dir: PathBuf,
    force: bool,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(cfg: &RunConfig, force: bool) -> Self {
        Self { dir: cfg.out.clone().unwrap_or_else(|| PathBuf::from(".")), force, files: Vec::new() }
    }

    fn add(&mut self, name: &str, render: impl FnOnce(&mut Vec<u8>) -> spweight::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.files.push((name.into(), buf));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, header: &Header, body: &T) -> Result<()> {
        self.add(name, |b| export::write_json(b, Some(header), body))
    }

    fn commit(self) -> Result<()> {
        for (name, _) in &self.files {
            let path = self.dir.join(name);
            if path.exists() && !self.force {
                return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
            }
        }
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        Ok(())
    }
}

fn header(command: &str, cfg: &RunConfig, seed: Option<u64>) -> Header {
    Header::new(command, &cfg.hash(), seed)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<SpatialDataset> {
    let path = cfg.dataset.as_ref().ok_or_else(|| usage("no dataset given (--dataset)"))?;
    require_file(path, "dataset")?;
    Ok(load_dataset(path, &cfg.schema)?)
}

/// Dense numeric CSV without a header row.
fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    require_file(path, "matrix file")?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| usage(format!("{}: row {}: `{c}` is not a number", path.display(), r + 1))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(usage(format!("{} must hold a square matrix", path.display())));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

struct StructureBuilder<'a> {
    ds: &'a SpatialDataset,
    cfg: &'a RunConfig,
    distances: Option<DistanceMatrix>,
}

impl<'a> StructureBuilder<'a> {
    fn new(ds: &'a SpatialDataset, cfg: &'a RunConfig) -> Self {
        Self { ds, cfg, distances: None }
    }

    fn distances(&mut self) -> Result<&DistanceMatrix> {
        if self.distances.is_none() {
            self.distances = Some(pairwise_distances(self.ds, default_metric(self.ds.frame()))?);
        }
        Ok(self.distances.as_ref().expect("just computed"))
    }

    /// `kind[:key=value...]`, or `custom:PATH` / `custom-sigma:PATH`.
    fn build(&mut self, spec: &str) -> Result<SpatialStructure> {
        let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
        match kind {
            "custom" | "custom-sigma" => {
                let m = read_matrix(Path::new(rest))?;
                if m.nrows() != self.ds.n() {
                    return Err(usage(format!("{rest}: {}x{0} matrix for {} units", m.nrows(), self.ds.n())));
                }
                return Ok(if kind == "custom" {
                    SpatialStructure::custom(&m, self.cfg.sigma2, self.cfg.rho2)?
                } else {
                    SpatialStructure::custom_sigma(&m)?
                });
            }
            "re" | "icar" | "gp" => {}
            other => return Err(usage(format!("unknown structure `{other}` in `{spec}`"))),
        }
        let mut params: BTreeMap<&str, f64> = BTreeMap::new();
        for kv in rest.split(':').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("`{kv}` in `{spec}` is not key=value")))?;
            let v: f64 = v.parse().map_err(|_| usage(format!("`{v}` in `{spec}` is not a number")))?;
            params.insert(k, v);
        }
        let allowed: &[&str] = match kind {
            "re" => &["sigma2", "rho2"],
            "icar" => &["sigma2", "rho2", "k"],
            _ => &["sigma2", "rho2", "kappa", "phi"],
        };
        if let Some(bad) = params.keys().find(|k| !allowed.contains(k)) {
            return Err(usage(format!("`{bad}` is not a parameter of {kind}")));
        }
        let sigma2 = params.get("sigma2").copied().unwrap_or(self.cfg.sigma2);
        let rho2 = params.get("rho2").copied().unwrap_or(self.cfg.rho2);
        Ok(match kind {
            "re" => SpatialStructure::build_re(self.ds, sigma2, rho2)?,
            "icar" => {
                let k = params.get("k").copied().unwrap_or(5.0);
                if k < 1.0 || k.fract() != 0.0 {
                    return Err(usage("icar k must be a positive integer"));
                }
                SpatialStructure::icar_from_distances(self.distances()?, k as usize, sigma2, rho2)?
            }
            _ => {
                let kappa = params.get("kappa").copied().unwrap_or(0.5);
                let phi = params.get("phi").copied().unwrap_or(50_000.0);
                SpatialStructure::gp_from_distances(self.distances()?, kappa, phi, sigma2, rho2)?
            }
        })
    }

    fn build_all(&mut self) -> Result<Vec<SpatialStructure>> {
        if self.cfg.structures.is_empty() {
            return Err(usage("no structure given (--structures)"));
        }
        let specs = self.cfg.structures.clone();
        specs.iter().map(|s| self.build(s).with_context(|| format!("structure `{s}`"))).collect()
    }
}

fn structure_label(st: &SpatialStructure, index: usize, total: usize) -> String {
    if total == 1 {
        st.kind().as_str().to_string()
    } else {
        format!("{}{}", st.kind().as_str(), index + 1)
    }
}

fn cmd_weights(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let ds = dataset(cfg)?;
    let mut sb = StructureBuilder::new(&ds, cfg);
    let structures = sb.build_all()?;
    if structures.len() != 1 {
        return Err(usage("weights takes exactly one structure"));
    }
    let st = &structures[0];
    let h = header("weights", cfg, cfg.seed);
    let iw = implied_weights(&ds, st)?;
    let balance = balance_report(&ds, &iw.w, &[])?;
    out.add("weights.csv", |b| export::write_weights_csv(b, Some(&h), &ds, &iw.w))?;
    out.json("balance.json", &h, &json!({ "balance": balance }))?;
    let summary = json!({
        "structure": st.meta(),
        "n": ds.n(),
        "n_treated": ds.n_treated(),
        "dispersion": iw.dispersion,
        "ess": iw.effective_sample_size(),
        "c0": iw.c0,
        "covariate_imbalance": iw.covariate_imbalance,
        "treated_weight_sum": (0..ds.n()).filter(|&i| ds.z()[i]).map(|i| iw.w[i]).sum::<f64>(),
        "control_weight_sum": (0..ds.n()).filter(|&i| !ds.z()[i]).map(|i| iw.w[i]).sum::<f64>(),
    });
    out.json("summary.json", &h, &summary)?;
    if ds.y().is_some() {
        let fit = gls_fit(&ds, st)?;
        out.json("fit.json", &h, &FitExport::new(&fit, balance))?;
    }
    if let Some(k) = cfg.export_structure {
        out.json("structure.json", &h, &st.meta())?;
        out.add("eigenvalues.csv", |b| export::write_eigenvalues_csv(b, Some(&h), st))?;
        if k > 0 {
            out.add("eigenvectors.csv", |b| export::write_eigenvectors_csv(b, Some(&h), &ds, st, k))?;
        }
    }
    Ok(())
}

/// Weights from an `id,z,w,l` file, checked against the dataset.
fn read_weights(path: &Path, ds: &SpatialDataset) -> Result<DVector<f64>> {
    require_file(path, "weights file")?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let heads = rdr.headers()?.clone();
    let col = |name: &str| heads.iter().position(|h| h == name).ok_or_else(|| usage(format!("weights file lacks `{name}`")));
    let (ci, cw) = (col("id")?, col("w")?);
    let mut w = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if r >= ds.n() || rec.get(ci) != Some(ds.ids()[r].as_str()) {
            return Err(usage(format!("weights file row {} does not match dataset id order", r + 1)));
        }
        let v: f64 = rec.get(cw).unwrap_or("").parse().map_err(|_| usage(format!("weights file row {}: bad w", r + 1)))?;
        w.push(v);
    }
    if w.len() != ds.n() {
        return Err(usage(format!("weights file has {} rows for {} units", w.len(), ds.n())));
    }
    Ok(DVector::from_vec(w))
}

fn cmd_diagnose(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let ds = dataset(cfg)?;
    let mut sb = StructureBuilder::new(&ds, cfg);
    let structures = sb.build_all()?;
    let st = &structures[0];
    let h = header("diagnose", cfg, cfg.seed);
    let iw = implied_weights(&ds, st)?;
    let w = match &cfg.weights {
        Some(p) => read_weights(p, &ds)?,
        None => iw.w.clone(),
    };
    let z = ds.z();
    let l = DVector::from_fn(ds.n(), |i, _| if z[i] { w[i] } else { -w[i] });
    match cfg.report.as_str() {
        "balance" => {
            let mut extra = Vec::new();
            for (s, st) in structures.iter().enumerate() {
                let label = structure_label(st, s, structures.len());
                for k in 0..cfg.report_eigvecs.min(st.positive_rank()) {
                    extra.push((format!("{label}_v{}", k + 1), st.eigvecs().column(k).into_owned()));
                }
            }
            let rows = balance_report(&ds, &w, &extra)?;
            out.add("balance.csv", |b| export::write_balance_csv(b, Some(&h), &rows))?;
            out.json("balance.json", &h, &json!({ "rows": rows }))?;
        }
        "localization" => {
            let dist = sb.distances()?.clone();
            let rep = localization_report(&ds, &w, st, Some(&dist))?;
            out.add("localization.csv", |b| export::write_localization_csv(b, Some(&h), &rep))?;
            out.json("localization.json", &h, &rep)?;
        }
        "maxbias" => {
            let pts = if cfg.weights.is_some() {
                let solver = MaxBiasSolver::new(&l, st)?;
                let mut pts = Vec::new();
                for &i0 in &cfg.moran_grid {
                    let best = solver.solve(i0).map(|(v, _)| v);
                    for &gamma in &cfg.gamma_grid {
                        pts.push(MaxBiasPoint { moran: i0, gamma, max_bias: best.map(|v| gamma.abs() * v), analytic_bound: None });
                    }
                }
                pts
            } else {
                max_bias_curve(&iw, st, &cfg.moran_grid, &cfg.gamma_grid)?
            };
            let solver = MaxBiasSolver::new(&l, st)?;
            let (lo, hi) = solver.range();
            out.add("maxbias.csv", |b| export::write_maxbias_csv(b, Some(&h), &pts))?;
            out.json("maxbias.json", &h, &json!({ "attainable_moran": [lo, hi], "points": pts }))?;
        }
        "moran" => {
            let mut vars: Vec<(String, DVector<f64>)> = Vec::new();
            for j in 1..ds.p() {
                vars.push((ds.covariate_names()[j].clone(), ds.x().column(j).into_owned()));
            }
            vars.push(("z".into(), ds.z_vector()));
            if let Some(y) = ds.y() {
                vars.push(("y".into(), y.clone()));
            }
            vars.push(("l".into(), l.clone()));
            let mut rows = Vec::new();
            for (s, st) in structures.iter().enumerate() {
                let label = structure_label(st, s, structures.len());
                for (name, v) in &vars {
                    let moran_i = morans_i(v, st).ok().map(|m| m.value);
                    rows.push(MoranRow { structure: label.clone(), variable: name.clone(), moran_i });
                }
            }
            out.add("moran.csv", |b| export::write_moran_csv(b, Some(&h), &rows))?;
            out.json("moran.json", &h, &json!({ "rows": rows }))?;
        }
        other => return Err(usage(format!("unknown report `{other}`; use balance, localization, maxbias or moran"))),
    }
    Ok(())
}

/// `auto`, `auto:<model>`, a scalar, or a CSV of `name,delta` rows.
enum DeltaInput {
    Auto(Option<Basis>),
    Scalar(f64),
    File(PathBuf),
}

fn parse_delta(s: &str) -> Result<DeltaInput> {
    if s == "auto" {
        return Ok(DeltaInput::Auto(None));
    }
    if let Some(m) = s.strip_prefix("auto:") {
        let basis = match m {
            "1" => Basis::Linear,
            "3" => Basis::Quad,
            "5" => Basis::Interact,
            other => return Err(usage(format!("auto:{other}: supported models are 1, 3 and 5"))),
        };
        return Ok(DeltaInput::Auto(Some(basis)));
    }
    if let Ok(v) = s.parse::<f64>() {
        if !(v >= 0.0) {
            return Err(usage("scalar delta must be nonnegative"));
        }
        return Ok(DeltaInput::Scalar(v));
    }
    let p = PathBuf::from(s);
    require_file(&p, "delta file")?;
    Ok(DeltaInput::File(p))
}

fn read_delta_file(path: &Path, aug: &AugmentedDesign) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let mut map = BTreeMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let (Some(name), Some(v)) = (rec.get(0), rec.get(1)) else {
            bail!(usage(format!("{}: row {} needs name,delta", path.display(), r + 1)));
        };
        let v: f64 = v.parse().map_err(|_| usage(format!("{}: row {}: bad delta `{v}`", path.display(), r + 1)))?;
        map.insert(name.to_string(), v);
    }
    aug.columns
        .iter()
        .map(|c| map.get(&c.name).copied().ok_or_else(|| usage(format!("{}: no delta for column `{}`", path.display(), c.name))))
        .collect()
}

fn cmd_estimate(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let ds = dataset(cfg)?;
    let mut sb = StructureBuilder::new(&ds, cfg);
    let structures = sb.build_all()?;
    if cfg.eigvecs.len() != structures.len() {
        return Err(usage(format!("--eigvecs needs one count per structure ({} structures)", structures.len())));
    }
    if cfg.bootstrap > 0 && cfg.seed.is_none() {
        return Err(usage("--bootstrap needs --seed"));
    }
    let delta_in = parse_delta(&cfg.delta)?;
    let basis = match delta_in {
        DeltaInput::Auto(Some(b)) => b,
        _ => cfg.basis,
    };
    let refs: Vec<&SpatialStructure> = structures.iter().collect();
    let aug = AugmentedDesign::build(&ds, &refs, &cfg.eigvecs, basis)?;
    let delta = match delta_in {
        DeltaInput::Auto(_) => DeltaSpec::Default,
        DeltaInput::Scalar(v) => DeltaSpec::Scalar(v),
        DeltaInput::File(p) => DeltaSpec::PerColumn(read_delta_file(&p, &aug)?),
    };
    let opts = SwOptions {
        bootstrap: cfg.bootstrap,
        seed: cfg.seed.unwrap_or(0),
        level: cfg.level,
        settings: QpSettings { method: cfg.qp_method, ..QpSettings::default() },
    };
    let fit = sw_fit(&ds, &aug, &delta, &opts)?;
    let h = header("estimate", cfg, cfg.seed);
    let deltas: Vec<Value> = fit
        .balance
        .iter()
        .map(|r: &SwBalanceRow| json!({ "name": r.name, "group": r.group, "delta": finite_or_null(r.delta) }))
        .collect();
    let mut warnings = aug.warnings.clone();
    warnings.extend(fit.warnings.iter().cloned());
    let ci = fit.bootstrap.as_ref().map(|b| json!({ "level": b.level, "lower": b.ci_lower, "upper": b.ci_upper, "se": b.se }));
    let body = json!({
        "structures": structures.iter().map(|s| s.meta()).collect::<Vec<_>>(),
        "eigvecs": cfg.eigvecs,
        "hidden_covariates": aug.n_eigenvectors(),
        "basis": basis,
        "balance_functions": aug.k(),
        "tau": fit.tau,
        "risk_ratio": fit.risk_ratio,
        "ci": ci,
        "ess": fit.ess,
        "dispersion": fit.dispersion,
        "bootstrap": fit.bootstrap.as_ref().map(|b| json!({ "replicates": b.replicates, "dropped": b.dropped, "estimates": b.estimates })),
        "deltas": deltas,
        "qp": fit.qp,
        "warnings": warnings,
    });
    out.json("estimate.json", &h, &body)?;
    out.add("weights.csv", |b| export::write_weights_csv(b, Some(&h), &ds, &fit.weights))?;
    out.add("balance.csv", |b| export::write_sw_balance_csv(b, Some(&h), &fit))?;
    Ok(())
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn cmd_simulate(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let sim = &cfg.simulation;
    sim.validate()?;
    let rep = run_synthetic(sim)?;
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    let h = header("simulate", cfg, Some(sim.seed));
    out.add("table.csv", |b| export::write_sim_table_csv(b, Some(&h), &rep))?;
    out.json("replicates.json", &h, &rep)?;
    Ok(())
}

fn cmd_selftest() -> Result<ExitCode> {
    let checks = spweight::selftest::run()?;
    let mut ok = true;
    for c in &checks {
        println!("{} {} (error {:.2e}, tolerance {:.0e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.error, c.tolerance);
        ok &= c.passed;
    }
    println!("{} of {} checks passed", checks.iter().filter(|c| c.passed).count(), checks.len());
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
