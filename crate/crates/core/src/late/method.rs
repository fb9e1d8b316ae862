use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::glm::{fit_mle_propensity, selection_augment, Link};
use super::ipw::estimate_ipw;
use super::iv::{estimate_tsls, estimate_wald};
use super::variance::asymptotic_variance;
use crate::balancer::{self, Penalty, SolverOptions};
use crate::basis::build_basis;
use crate::error::{Error, Result};
use crate::model::{BasisMatrix, BasisSpec, Dataset, FittedPropensity, LateEstimate, MethodLabel, SeMethod};

/// Source of the `E[D(0) | X]` balancing column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    None,
    Probit,
    Logit,
    /// Caller-supplied true probabilities (simulation only).
    Oracle,
}

/// An estimator recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub label: MethodLabel,
    /// Covariate part of the propensity basis.
    pub basis: BasisSpec,
    /// Whether covariate columns enter the balancing basis besides the
    /// selection column.
    pub include_covariates: bool,
    pub selection: SelectionKind,
    /// Divide weights by their group means (likelihood IPW only).
    pub normalize: bool,
    pub penalty: Option<Penalty>,
}

impl MethodSpec {
    /// The standard recipe for `label` with covariates entering linearly.
    pub fn standard(label: MethodLabel) -> Self {
        Self::with_basis(label, BasisSpec::raw(true))
    }

    /// The standard recipe for `label` with the covariate part given by
    /// `basis`.
    pub fn with_basis(label: MethodLabel, basis: BasisSpec) -> Self {
        let (include_covariates, selection) = match label {
            MethodLabel::BD => (false, SelectionKind::Oracle),
            MethodLabel::BDX => (true, SelectionKind::Oracle),
            MethodLabel::BDhat => (false, SelectionKind::Probit),
            MethodLabel::BDhatM => (false, SelectionKind::Logit),
            _ => (true, SelectionKind::None),
        };
        Self { label, basis, include_covariates, selection, normalize: label == MethodLabel::Mle2, penalty: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodOptions {
    pub solver: SolverOptions,
    /// Estimate from non-converged fits (marked as forced).
    pub force: bool,
    /// Balancing fits whose Hessian condition estimate exceeds this are
    /// declared failed.
    pub condition_limit: f64,
    /// Attach plug-in standard errors to weighting estimators.
    pub asymptotic_se: bool,
}

impl Default for MethodOptions {
    fn default() -> Self {
        Self { solver: SolverOptions::default(), force: false, condition_limit: 1e10, asymptotic_se: false }
    }
}

/// Assembles `(1, s, covariate basis without its intercept)`; a constant `s`
/// is dropped.
fn assemble_basis(data: &Dataset, spec: &MethodSpec, selection: Option<&[f64]>) -> Result<BasisMatrix> {
    let covariates = if spec.include_covariates {
        Some(build_basis(&data.x, &data.covariate_names, &spec.basis)?)
    } else {
        None
    };
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; data.n()]];
    let mut labels = vec!["1".to_string()];
    if let Some(s) = selection {
        let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if lo != hi {
            columns.push(s.to_vec());
            labels.push("E[D(0)|X]".into());
        }
    }
    let basis_spec = match covariates {
        Some(cov) => {
            let skip = usize::from(cov.has_intercept);
            for j in skip..cov.r() {
                columns.push(cov.values.column(j).iter().copied().collect());
                labels.push(cov.labels[j].clone());
            }
            cov.spec
        }
        None => BasisSpec::custom(labels.clone()),
    };
    let values = DMatrix::from_fn(data.n(), columns.len(), |i, j| columns[j][i]);
    Ok(BasisMatrix { values, has_intercept: true, spec: basis_spec, labels })
}

/// Builds the propensity basis a method uses, including any selection column.
pub fn method_basis(data: &Dataset, spec: &MethodSpec, oracle_d0: Option<&[f64]>, solver: &SolverOptions) -> Result<(BasisMatrix, Vec<String>)> {
    let mut notes = Vec::new();
    let selection = match spec.selection {
        SelectionKind::None => None,
        SelectionKind::Oracle => {
            let s = oracle_d0.ok_or_else(|| {
                Error::InvalidArgument(format!("{} needs oracle selection probabilities", spec.label))
            })?;
            if s.len() != data.n() {
                return Err(Error::InvalidArgument(format!("{} oracle values for {} observations", s.len(), data.n())));
            }
            Some(s.to_vec())
        }
        SelectionKind::Probit | SelectionKind::Logit => {
            let link = if spec.selection == SelectionKind::Probit { Link::Probit } else { Link::Logit };
            let col = selection_augment(data, link, 0, solver)?;
            if !col.converged {
                notes.push("selection model did not converge".into());
            }
            notes.extend(col.notes);
            Some(col.values)
        }
    };
    Ok((assemble_basis(data, spec, selection.as_deref())?, notes))
}

/// A fitted method together with the propensity model behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodFit {
    pub estimate: LateEstimate,
    /// Propensity basis and fit; `None` for Wald and IV.
    pub propensity: Option<(BasisMatrix, FittedPropensity)>,
}

/// Runs one estimator. A failed method yields an error; it never returns a
/// silent number.
pub fn estimate_method(
    data: &Dataset,
    spec: &MethodSpec,
    options: &MethodOptions,
    oracle_d0: Option<&[f64]>,
) -> Result<LateEstimate> {
    fit_method(data, spec, options, oracle_d0).map(|f| f.estimate)
}

/// Like [`estimate_method`] but keeps the fitted propensity model.
pub fn fit_method(data: &Dataset, spec: &MethodSpec, options: &MethodOptions, oracle_d0: Option<&[f64]>) -> Result<MethodFit> {
    match spec.label {
        MethodLabel::Wald => return Ok(MethodFit { estimate: estimate_wald(data)?, propensity: None }),
        MethodLabel::Iv => return Ok(MethodFit { estimate: estimate_tsls(data)?, propensity: None }),
        _ => {}
    }
    let (basis, notes) = method_basis(data, spec, oracle_d0, &options.solver)?;
    let likelihood = matches!(spec.label, MethodLabel::Mle | MethodLabel::Mle2);
    let fitted = if likelihood {
        fit_mle_propensity(&basis, &data.z, &options.solver)?
    } else {
        match &spec.penalty {
            Some(p) => balancer::fit_regularized(&basis, &data.z, p, &options.solver)?,
            None => balancer::fit(&basis, &data.z, &options.solver)?,
        }
    };
    if !likelihood && fitted.hessian_condition_estimate > options.condition_limit {
        return Err(Error::FitFailed(format!(
            "balancing Hessian condition estimate {:.3e} exceeds {:.1e} (near-collinear basis)",
            fitted.hessian_condition_estimate, options.condition_limit
        )));
    }
    let mut est = estimate_ipw(data, &fitted, spec.normalize, options.force)?;
    est.method = spec.label;
    est.diagnostics.basis = Some(basis.labels.join(","));
    est.diagnostics.notes.extend(notes);
    if options.asymptotic_se {
        let v = asymptotic_variance(data, &fitted, &basis.values, est.tau_hat)?;
        est.se = Some(v.se);
        est.se_method = SeMethod::Asymptotic;
    }
    Ok(MethodFit { estimate: est, propensity: Some((basis, fitted)) })
}
