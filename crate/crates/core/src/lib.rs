//! Spatial regression models viewed as balancing-weights estimators.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod export;
pub mod gls;
pub mod linalg;
pub mod oracles;
pub mod qp;
pub mod selftest;
pub mod sim;
pub mod structures;
pub mod sw;

pub use data::{
    load_dataset, pairwise_distances, read_dataset, write_dataset, CoordFrame, DatasetParts, DistanceMatrix,
    DistanceMetric, Schema, SpatialDataset,
};
pub use error::{Error, ErrorClass, Result};
pub use structures::{eig_psd, SpatialStructure, StructureKind, StructureMeta, WeightProgram};
pub use gls::{
    balance_dispersion_curve, gls_fit, implied_weights, ridge_fit, CurvePoint, FitMethod, GlsFit, ImpliedWeights,
};
pub use diagnostics::{
    balance_report, bias_bound, effective_sample_size, localization_report, max_bias_curve, morans_i, BalanceRow,
    BiasBoundInput, LocalizationReport, MaxBiasPoint, MoranResult,
};
pub use sw::{sw_fit, AugmentedDesign, Basis, DeltaSpec, SwFit, SwOptions};
pub use sim::{
    run_battery, run_synthetic, synthetic_geometry, ConfounderClass, Estimator, OutcomeModel, SimulationConfig,
    SimulationReport,
};
pub use export::Header;
