use thiserror::Error;

/// Errors produced by the library.
///
/// Variants are grouped so front ends can map them onto exit codes:
/// input validation, numerical degeneracy and QP infeasibility.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-binary treatment at row {row}: `{value}`")]
    NonBinaryTreatment { row: usize, value: String },

    #[error("non-finite numeric cell at row {row}, column `{column}`: `{value}`")]
    NonFinite {
        row: usize,
        column: String,
        value: String,
    },

    #[error("duplicate id `{id}` at row {row}")]
    DuplicateId { row: usize, id: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix not PSD: smallest eigenvalue {min} below tolerance {tol}")]
    NotPsd { min: f64, tol: f64 },

    #[error("matrix not symmetric: max asymmetry {0}")]
    NotSymmetric(f64),

    #[error("collinear design")]
    CollinearDesign,

    #[error("treatment collinear with covariates (denominator {denominator:e})")]
    TreatmentCollinear { denominator: f64 },

    #[error("degenerate program: {0}")]
    DegenerateProgram(String),

    #[error("Moran's I undefined: {0}")]
    MoranUndefined(String),

    #[error("infeasible: loosen δ{}", suggestion_text(.suggested_inflation))]
    Infeasible { suggested_inflation: Option<f64> },

    #[error("solver did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },
}

fn suggestion_text(s: &Option<f64>) -> String {
    match s {
        Some(t) => format!(" (uniform inflation of {t:.3e} restores feasibility)"),
        None => String::new(),
    }
}

/// Coarse error classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Degenerate,
    Infeasible,
    Other,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingColumn(_)
            | Error::NonBinaryTreatment { .. }
            | Error::NonFinite { .. }
            | Error::DuplicateId { .. }
            | Error::InvalidDataset(_)
            | Error::InvalidArgument(_)
            | Error::Dimension(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorClass::Validation,
            Error::NotPsd { .. }
            | Error::NotSymmetric(_)
            | Error::CollinearDesign
            | Error::TreatmentCollinear { .. }
            | Error::DegenerateProgram(_)
            | Error::MoranUndefined(_)
            | Error::NotConverged { .. } => ErrorClass::Degenerate,
            Error::Infeasible { .. } => ErrorClass::Infeasible,
            Error::Io(_) => ErrorClass::Other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
