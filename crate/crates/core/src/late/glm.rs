//! Binary-response maximum likelihood: the logistic instrument propensity
//! comparator and the probit/logit treatment-selection models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balancer::{check_instrument, finish_fit, logistic, SolverOptions, SEPARATION_INDEX};
use crate::basis::check_full_rank;
use crate::error::{Error, Result};
use crate::model::{BasisMatrix, Dataset, FittedPropensity};
use crate::newton::{self, sup_norm, ConcaveObjective, NewtonOutcome};
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Logit,
    Probit,
}

impl Link {
    pub fn cdf(self, eta: f64) -> f64 {
        match self {
            Link::Logit => logistic(eta),
            Link::Probit => normal::cdf(eta),
        }
    }

    /// Index magnitude beyond which fitted probabilities are numerically 0 or 1.
    fn separation_index(self) -> f64 {
        match self {
            Link::Logit => SEPARATION_INDEX,
            Link::Probit => 8.5,
        }
    }

    /// Log-likelihood contribution and its first and second derivatives in
    /// the index.
    fn terms(self, y: f64, eta: f64) -> (f64, f64, f64) {
        match self {
            Link::Logit => {
                let softplus = eta.max(0.0) + (-eta.abs()).exp().ln_1p();
                let l = logistic(eta);
                (y * eta - softplus, y - l, -l * (1.0 - l))
            }
            Link::Probit => {
                if y == 1.0 {
                    let m = normal::inverse_mills(eta);
                    (normal::ln_cdf(eta), m, -m * (eta + m))
                } else {
                    let m = normal::inverse_mills(-eta);
                    (normal::ln_cdf(-eta), -m, -m * (m - eta))
                }
            }
        }
    }
}

struct BinaryLikelihood<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    link: Link,
}

impl BinaryLikelihood<'_> {
    fn per_obs(&self, theta: &DVector<f64>) -> Vec<(f64, f64, f64)> {
        let eta = self.x * theta;
        eta.iter().zip(self.y).map(|(&e, &y)| self.link.terms(y, e)).collect()
    }
}

impl ConcaveObjective for BinaryLikelihood<'_> {
    fn value(&self, theta: &DVector<f64>) -> f64 {
        let v = self.per_obs(theta).iter().map(|t| t.0).sum::<f64>() / self.y.len() as f64;
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let coef = DVector::from_iterator(self.y.len(), self.per_obs(theta).iter().map(|t| t.1));
        self.x.tr_mul(&coef) / self.y.len() as f64
    }

    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.x.clone();
        for (i, t) in self.per_obs(theta).iter().enumerate() {
            scaled.row_mut(i).scale_mut(t.2);
        }
        self.x.tr_mul(&scaled) / self.y.len() as f64
    }

    fn max_abs_index(&self, theta: &DVector<f64>) -> f64 {
        sup_norm(&(self.x * theta))
    }
}

fn maximize_likelihood(x: &DMatrix<f64>, y: &[f64], link: Link, options: &SolverOptions, stop_on_separation: bool) -> NewtonOutcome {
    let obj = BinaryLikelihood { x, y, link };
    let bound = link.separation_index();
    let settings = if stop_on_separation {
        options.newton(Some(bound), None)
    } else {
        options.newton(None, Some(bound))
    };
    newton::maximize(&obj, DVector::zeros(x.ncols()), &settings)
}

/// Logistic maximum-likelihood instrument propensity scores on `basis`.
///
/// `final_gradient_norm` is the sup-norm of the log-likelihood gradient.
pub fn fit_mle_propensity(basis: &BasisMatrix, z: &[f64], options: &SolverOptions) -> Result<FittedPropensity> {
    options.validate()?;
    if basis.n() != z.len() {
        return Err(Error::InvalidArgument(format!("basis has {} rows but z has {}", basis.n(), z.len())));
    }
    check_instrument(z)?;
    check_full_rank(&basis.values, &basis.labels)?;
    let out = maximize_likelihood(&basis.values, z, Link::Logit, options, true);
    Ok(finish_fit(
        &basis.values,
        z,
        out.theta,
        out.converged,
        out.iterations,
        out.gradient_norm,
        out.separation,
        out.notes,
        options.balance_tolerance,
        false,
    ))
}

/// Predicted treatment probabilities `E[D(at_z) | X]` from a binary model of
/// `D` on `(1, X, Z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionColumn {
    pub link: Link,
    pub at_z: u8,
    pub values: Vec<f64>,
    /// Coefficients on `(1, X, Z)`.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub separation: bool,
    /// Predictions moved to `[1e-12, 1 - 1e-12]`.
    pub clipped: usize,
    pub notes: Vec<String>,
}

const PREDICTION_CLIP: f64 = 1e-12;

/// Fits `P(D = 1 | X, Z)` with the given link and evaluates it at `Z = at_z`.
///
/// Non-convergence and separation are flagged, not fatal.
pub fn selection_augment(data: &Dataset, link: Link, at_z: u8, options: &SolverOptions) -> Result<SelectionColumn> {
    if at_z > 1 {
        return Err(Error::InvalidArgument(format!("at_z must be 0 or 1, got {at_z}")));
    }
    let n = data.n();
    let p = data.p();
    let mut design = data.x.clone().insert_column(0, 1.0).insert_column(p + 1, 0.0);
    design.column_mut(p + 1).copy_from_slice(&data.z);
    let mut labels = vec!["1".to_string()];
    labels.extend(data.covariate_names.iter().cloned());
    labels.push("z".into());
    check_full_rank(&design, &labels)?;

    let mut notes = Vec::new();
    for zv in [0.0, 1.0] {
        let ds: Vec<f64> = (0..n).filter(|&i| data.z[i] == zv).map(|i| data.d[i]).collect();
        if ds.iter().all(|&d| d == ds[0]) {
            notes.push(format!("treatment is constant ({}) in instrument group z = {zv}", ds[0]));
        }
    }
    let out = maximize_likelihood(&design, &data.d, link, options, false);
    notes.extend(out.notes);
    let fitted = &design * &out.theta;
    let mut at = design;
    at.column_mut(p + 1).fill(at_z as f64);
    let mut clipped = 0;
    let values = (&at * &out.theta)
        .iter()
        .map(|&e| {
            let v = link.cdf(e);
            if v < PREDICTION_CLIP {
                clipped += 1;
                PREDICTION_CLIP
            } else if v > 1.0 - PREDICTION_CLIP {
                clipped += 1;
                1.0 - PREDICTION_CLIP
            } else {
                v
            }
        })
        .collect();
    let perfect = fitted.iter().zip(&data.d).all(|(&e, &d)| (d - link.cdf(e)).abs() < 1e-6);
    let separation = out.separation || perfect;
    if perfect && !out.separation {
        notes.push("possible separation: treatment is perfectly predicted".into());
    }
    if clipped > 0 {
        notes.push(format!("{clipped} predictions clipped away from 0/1"));
    }
    Ok(SelectionColumn {
        link,
        at_z,
        values,
        coefficients: out.theta.iter().copied().collect(),
        converged: out.converged,
        separation,
        clipped,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::raw_basis;

    #[test]
    fn probit_terms_match_finite_differences() {
        for y in [0.0, 1.0] {
            for eta in [-3.0, -0.4, 0.0, 1.2, 4.0] {
                let (_, g, h) = Link::Probit.terms(y, eta);
                let e = 1e-5;
                let f = |x: f64| Link::Probit.terms(y, x).0;
                let fd_g = (f(eta + e) - f(eta - e)) / (2.0 * e);
                let fd_h = (Link::Probit.terms(y, eta + e).1 - Link::Probit.terms(y, eta - e).1) / (2.0 * e);
                assert!((g - fd_g).abs() < 1e-7, "{y} {eta}");
                assert!((h - fd_h).abs() < 1e-6, "{y} {eta}");
            }
        }
    }

    #[test]
    fn intercept_only_mle_is_mean() {
        let z: Vec<f64> = (0..10).map(|i| (i < 4) as u8 as f64).collect();
        let f = fit_mle_propensity(&raw_basis(&DMatrix::zeros(10, 0), true, &[]), &z, &SolverOptions::default()).unwrap();
        assert!(f.converged);
        assert!(f.final_gradient_norm <= 1e-10);
        assert!(f.scores.iter().all(|s| (s - 0.4).abs() < 1e-12));
    }

    #[test]
    fn deterministic_compliance_is_flagged() {
        let z: Vec<f64> = (0..40).map(|i| (i % 2) as f64).collect();
        let x = DMatrix::from_fn(40, 1, |i, _| (i as f64 * 0.61).sin());
        let y = vec![0.0; 40];
        let ds = Dataset::new(y, z.clone(), z, x).unwrap();
        for link in [Link::Logit, Link::Probit] {
            let s0 = selection_augment(&ds, link, 0, &SolverOptions::default()).unwrap();
            let s1 = selection_augment(&ds, link, 1, &SolverOptions::default()).unwrap();
            assert!(s0.values.iter().all(|&v| v < 1e-6));
            assert!(s1.values.iter().all(|&v| v > 1.0 - 1e-6));
            assert!(s0.separation);
        }
    }
}
