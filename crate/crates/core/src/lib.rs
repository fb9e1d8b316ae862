//! Local average treatment effect estimation with covariate-balancing
//! instrument propensity scores.

pub mod balancer;
pub mod basis;
pub mod error;
pub mod late;
pub mod model;
mod newton;
pub mod normal;
pub mod simlab;

pub use error::{Error, Result};

/// Library version echoed into every output file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use model::{
    BasisKind, BasisMatrix, BasisSpec, Dataset, DesignLabel, EstimateDiagnostics, FittedPropensity, LateEstimate,
    McResult, McRow, MethodLabel, SeMethod, Tolerances,
};
