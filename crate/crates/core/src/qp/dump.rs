//! JSON dumps of problems and solutions for debugging.
//!
//! Matrices are written inline as row arrays up to `DUMP_INLINE_MAX` variables
//! and to sidecar CSV files beyond that. Infinite bounds are written as null.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use super::{QpProblem, QpSolution};
use crate::error::Result;

pub const DUMP_INLINE_MAX: usize = 500;

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn vector(v: &DVector<f64>) -> Value {
    Value::Array(v.iter().map(|&x| num(x)).collect())
}

fn matrix_inline(m: &DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|i| Value::Array(m.row(i).iter().map(|&x| num(x)).collect())).collect())
}

fn matrix_sidecar(m: &DMatrix<f64>, dir: &Path, name: &str) -> Result<Value> {
    let file = format!("{name}.csv");
    let mut w = csv::Writer::from_path(dir.join(&file))?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|x| format!("{x:e}")))?;
    }
    w.flush()?;
    Ok(json!({ "file": file, "rows": m.nrows(), "cols": m.ncols() }))
}

/// Problem as JSON; `sidecar` names the directory and file prefix used when the
/// problem is too large to inline.
pub fn problem_to_json(p: &QpProblem, sidecar: Option<(&Path, &str)>) -> Result<Value> {
    let inline = p.dim() <= DUMP_INLINE_MAX || sidecar.is_none();
    let mat = |m: &DMatrix<f64>, tag: &str| -> Result<Value> {
        if inline {
            Ok(matrix_inline(m))
        } else {
            let (dir, prefix) = sidecar.expect("sidecar checked");
            matrix_sidecar(m, dir, &format!("{prefix}_{tag}"))
        }
    };
    Ok(json!({
        "dim": p.dim(),
        "objective": "x'Qx + c'x",
        "q": mat(&p.q, "q")?,
        "c": vector(&p.c),
        "a_eq": mat(&p.a_eq, "a_eq")?,
        "b_eq": vector(&p.b_eq),
        "a_ineq": mat(&p.a_ineq, "a_ineq")?,
        "lo": vector(&p.lo),
        "hi": vector(&p.hi),
        "nonneg": p.nonneg,
    }))
}

pub fn solution_to_json(s: &QpSolution) -> Value {
    json!({
        "status": s.status,
        "iterations": s.iterations,
        "polished": s.polished,
        "objective": num(s.objective),
        "kkt_stationarity_residual": num(s.kkt_stationarity_residual),
        "primal_feasibility_residual": num(s.primal_feasibility_residual),
        "x": vector(&s.x),
        "dual_eq": vector(&s.dual_eq),
        "dual_ineq": vector(&s.dual_ineq),
        "dual_nonneg": vector(&s.dual_nonneg),
        "notes": s.notes,
    })
}
