//! LATE estimators: balanced and likelihood IPW, Wald, 2SLS, selection-model
//! augmented balancing, plug-in and bootstrap standard errors.

mod bootstrap;
mod glm;
mod ipw;
mod iv;
mod method;
mod variance;

pub use bootstrap::{bootstrap_se, resample_indices, BootstrapResult, MAX_FAILURE_SHARE};
pub use glm::{fit_mle_propensity, selection_augment, Link, SelectionColumn};
pub use ipw::{estimate_ipw, propensity_from_scores};
pub use iv::{estimate_tsls, estimate_wald};
pub use method::{estimate_method, fit_method, method_basis, MethodFit, MethodOptions, MethodSpec, SelectionKind};
pub use variance::{asymptotic_variance, VarianceEstimate};
