//! File formats for weights, fits, structures, reports and simulation tables.
//!
//! Every writer takes an optional [`Header`]. CSV files carry it as leading
//! `# key: value` lines; JSON documents carry it under a top-level `header` key.
//! Floats are written in shortest round-trip form so output is reproducible.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::SpatialDataset;
use crate::diagnostics::{BalanceRow, LocalizationReport, MaxBiasPoint};
use crate::error::{Error, Result};
use crate::gls::GlsFit;
use crate::sim::SimulationReport;
use crate::structures::SpatialStructure;
use crate::sw::SwFit;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance attached to every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
}

impl Header {
    pub fn new(command: &str, config_hash: &str, seed: Option<u64>) -> Self {
        Self { command: command.into(), config_hash: config_hash.into(), seed, version: VERSION.into() }
    }

    fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "# command: {}", self.command)?;
        writeln!(out, "# config_hash: {}", self.config_hash)?;
        match self.seed {
            Some(s) => writeln!(out, "# seed: {s}")?,
            None => writeln!(out, "# seed: none")?,
        }
        writeln!(out, "# version: spweight {}", self.version)?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:?}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "NA".into())
}

fn csv_writer<W: Write>(mut out: W, header: Option<&Header>) -> Result<csv::Writer<W>> {
    if let Some(h) = header {
        h.write_csv(&mut out)?;
    }
    Ok(csv::WriterBuilder::new().from_writer(out))
}

/// Pretty JSON with the header spliced in as the first key.
pub fn write_json<W: Write, T: Serialize>(mut out: W, header: Option<&Header>, body: &T) -> Result<()> {
    let body = serde_json::to_value(body)?;
    let doc = match (header, body) {
        (None, b) => b,
        (Some(h), Value::Object(map)) => {
            let mut m = serde_json::Map::new();
            m.insert("header".into(), serde_json::to_value(h)?);
            m.extend(map);
            Value::Object(m)
        }
        (Some(h), b) => json!({ "header": h, "body": b }),
    };
    serde_json::to_writer_pretty(&mut out, &doc)?;
    writeln!(out)?;
    Ok(())
}

/// `id,z,w,l` per unit, with l = w on treated and −w on controls.
pub fn write_weights_csv<W: Write>(out: W, header: Option<&Header>, ds: &SpatialDataset, w: &DVector<f64>) -> Result<()> {
    if w.len() != ds.n() {
        return Err(Error::Dimension("weights length differs from the dataset".into()));
    }
    let mut wr = csv_writer(out, header)?;
    wr.write_record(["id", "z", "w", "l"])?;
    for i in 0..ds.n() {
        let z = ds.z()[i];
        let l = if z { w[i] } else { -w[i] };
        wr.write_record([ds.ids()[i].as_str(), if z { "1" } else { "0" }, &num(w[i]), &num(l)])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitExport {
    pub kind: String,
    pub method: String,
    pub sigma2: f64,
    pub rho2: f64,
    pub beta: Vec<NamedValue>,
    pub tau: f64,
    pub dispersion: f64,
    pub ess: f64,
    pub c0: f64,
    pub balance: Vec<BalanceRow>,
}

impl FitExport {
    pub fn new(fit: &GlsFit, balance: Vec<BalanceRow>) -> Self {
        let beta = fit
            .covariate_names
            .iter()
            .zip(fit.beta.iter())
            .map(|(n, v)| NamedValue { name: n.clone(), value: *v })
            .collect();
        Self {
            kind: fit.kind.as_str().into(),
            method: format!("{:?}", fit.method).to_lowercase(),
            sigma2: fit.sigma2,
            rho2: fit.rho2,
            beta,
            tau: fit.tau,
            dispersion: fit.weights.dispersion,
            ess: fit.weights.effective_sample_size(),
            c0: fit.weights.c0,
            balance,
        }
    }
}

/// Eigenvalues as `index,lambda` in descending order.
pub fn write_eigenvalues_csv<W: Write>(out: W, header: Option<&Header>, st: &SpatialStructure) -> Result<()> {
    let mut wr = csv_writer(out, header)?;
    wr.write_record(["index", "lambda"])?;
    for (k, v) in st.eigvals().iter().enumerate() {
        wr.write_record([(k + 1).to_string(), num(*v)])?;
    }
    wr.flush()?;
    Ok(())
}

/// The leading `count` eigenvectors as columns `v1…v<count>`, one row per unit.
pub fn write_eigenvectors_csv<W: Write>(
    out: W,
    header: Option<&Header>,
    ds: &SpatialDataset,
    st: &SpatialStructure,
    count: usize,
) -> Result<()> {
    if st.n() != ds.n() {
        return Err(Error::Dimension("structure size differs from the dataset".into()));
    }
    let k = count.min(st.n());
    let mut wr = csv_writer(out, header)?;
    let mut head = vec!["id".to_string()];
    head.extend((1..=k).map(|j| format!("v{j}")));
    wr.write_record(&head)?;
    let v = st.eigvecs();
    for i in 0..ds.n() {
        let mut rec = vec![ds.ids()[i].clone()];
        rec.extend((0..k).map(|j| num(v[(i, j)])));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_balance_csv<W: Write>(out: W, header: Option<&Header>, rows: &[BalanceRow]) -> Result<()> {
    let mut wr = csv_writer(out, header)?;
    wr.write_record(["name", "treated_before", "treated_after", "control_before", "control_after", "imbalance"])?;
    for r in rows {
        wr.write_record([
            r.name.clone(),
            num(r.treated_before),
            num(r.treated_after),
            num(r.control_before),
            num(r.control_after),
            num(r.imbalance),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_localization_csv<W: Write>(out: W, header: Option<&Header>, rep: &LocalizationReport) -> Result<()> {
    let mut wr = csv_writer(out, header)?;
    wr.write_record(["id", "z", "abs_weight", "proximity"])?;
    for r in &rep.rows {
        wr.write_record([r.id.clone(), (r.z as u8).to_string(), num(r.abs_weight), num(r.proximity)])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_maxbias_csv<W: Write>(out: W, header: Option<&Header>, pts: &[MaxBiasPoint]) -> Result<()> {
    let mut wr = csv_writer(out, header)?;
    wr.write_record(["moran", "gamma", "max_bias", "analytic_bound"])?;
    for p in pts {
        wr.write_record([num(p.moran), num(p.gamma), opt(p.max_bias), opt(p.analytic_bound)])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoranRow {
    pub structure: String,
    pub variable: String,
    /// None when the variable is constant.
    pub moran_i: Option<f64>,
}

pub fn write_moran_csv<W: Write>(out: W, header: Option<&Header>, rows: &[MoranRow]) -> Result<()> {
    let mut wr = csv_writer(out, header)?;
    wr.write_record(["structure", "variable", "moran_i"])?;
    for r in rows {
        wr.write_record([r.structure.clone(), r.variable.clone(), opt(r.moran_i)])?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-column SW balance: name, group, treated mean, control mean before and after, δ.
pub fn write_sw_balance_csv<W: Write>(out: W, header: Option<&Header>, fit: &SwFit) -> Result<()> {
    let mut wr = csv_writer(out, header)?;
    wr.write_record(["name", "group", "treated_mean", "control_before", "control_after", "delta", "imbalance"])?;
    for r in &fit.balance {
        let group = serde_json::to_value(r.group)?.as_str().unwrap_or_default().to_string();
        wr.write_record([
            r.name.clone(),
            group,
            num(r.treated_mean),
            num(r.control_before),
            num(r.control_after),
            num(r.delta),
            num(r.imbalance),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// One row per scenario; bias, RMSE and Monte Carlo SE per estimator.
pub fn write_sim_table_csv<W: Write>(out: W, header: Option<&Header>, rep: &SimulationReport) -> Result<()> {
    let mut wr = csv_writer(out, header)?;
    let ests = &rep.config.estimators;
    let mut head = vec!["confounder".to_string(), "model".to_string()];
    for e in ests {
        for stat in ["bias", "rmse", "mc_se", "excluded"] {
            head.push(format!("{}_{stat}", e.as_str()));
        }
    }
    wr.write_record(&head)?;
    for s in &rep.scenarios {
        let mut rec = vec![s.class.as_str().to_string(), s.model.as_str().to_string()];
        for e in ests {
            match s.summary(*e) {
                Some(sum) => {
                    rec.extend([opt(sum.bias), opt(sum.rmse), opt(sum.mc_se), sum.excluded.to_string()]);
                }
                None => rec.extend(std::iter::repeat_n("NA".to_string(), 4)),
            }
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}
