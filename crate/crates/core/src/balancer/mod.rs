//! Covariate-balancing instrument propensity scores.
//!
//! The scores maximize the tailored loss
//!
//! ```text
//! S(z, x, theta) = (2z - 1) ln(L / (1 - L)) - (z - L) (1/L - 1/(1 - L)),   L = L(phi(x)' theta)
//! ```
//!
//! whose first-order conditions are exactly the sample balance equations
//! `n^-1 sum z phi / pi = n^-1 sum (1 - z) phi / (1 - pi)`. With the logistic
//! link and index `eta = phi' theta` the loss simplifies to
//! `eta + 1 - exp(-eta)` for `z = 1` and `-eta + 1 - exp(eta)` for `z = 0`,
//! which is the form evaluated here.

mod penalized;

pub use penalized::{fit_regularized, lambda_path, select_lambda, LambdaPath, LambdaSelection, Penalty, PenaltyKind};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::check_full_rank;
use crate::error::{Error, Result};
use crate::model::{ipw_weights, BasisMatrix, FittedPropensity, Tolerances};
use crate::newton::{self, ConcaveObjective, NewtonSettings};

/// Index magnitude beyond which scores are within 1e-16 of {0, 1}.
pub const SEPARATION_INDEX: f64 = 36.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub gradient_tolerance: f64,
    pub balance_tolerance: f64,
    pub max_iterations: usize,
    /// Backtracking step multiplier.
    pub shrink: f64,
    /// Armijo sufficient-increase constant.
    pub sufficient_increase: f64,
    /// Guard applied to probabilities that enter logarithms or divisions.
    pub score_clip: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        let tol = Tolerances::default();
        Self {
            gradient_tolerance: tol.gradient,
            balance_tolerance: tol.balance,
            max_iterations: tol.max_iterations,
            shrink: 0.5,
            sufficient_increase: 1e-4,
            score_clip: 1e-12,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.gradient_tolerance, self.balance_tolerance, self.score_clip];
        if positive.iter().any(|&t| !(t > 0.0)) || self.max_iterations == 0 {
            return Err(Error::InvalidArgument("solver tolerances must be > 0 and max_iterations >= 1".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) || !(self.sufficient_increase > 0.0 && self.sufficient_increase < 1.0) {
            return Err(Error::InvalidArgument("line-search parameters must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub(crate) fn newton(&self, stop_index_bound: Option<f64>, flag_index_bound: Option<f64>) -> NewtonSettings {
        NewtonSettings {
            gradient_tolerance: self.gradient_tolerance,
            max_iterations: self.max_iterations,
            shrink: self.shrink,
            sufficient_increase: self.sufficient_increase,
            stop_index_bound,
            flag_index_bound,
        }
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Per-observation tailored loss at index `eta`.
pub fn tailored_loss_term(z: f64, eta: f64) -> f64 {
    if z == 1.0 {
        eta + 1.0 - (-eta).exp()
    } else {
        -eta + 1.0 - eta.exp()
    }
}

fn check_dims(phi: &DMatrix<f64>, z: &[f64], theta: Option<&DVector<f64>>) -> Result<()> {
    if phi.nrows() != z.len() {
        return Err(Error::InvalidArgument(format!("basis has {} rows but z has {}", phi.nrows(), z.len())));
    }
    if let Some(t) = theta {
        if t.len() != phi.ncols() {
            return Err(Error::InvalidArgument(format!("theta has {} entries but basis has {} columns", t.len(), phi.ncols())));
        }
    }
    Ok(())
}

fn finite_index(phi: &DMatrix<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let eta = phi * theta;
    match eta.iter().position(|v| !v.is_finite()) {
        Some(row) => Err(Error::NonFiniteIndex { row }),
        None => Ok(eta),
    }
}

/// Sample mean of the tailored loss, `n^-1 sum_i S(z_i, x_i, theta)`.
pub fn tailored_loss(theta: &DVector<f64>, basis: &BasisMatrix, z: &[f64]) -> Result<f64> {
    check_dims(&basis.values, z, Some(theta))?;
    let eta = finite_index(&basis.values, theta)?;
    Ok(mean_loss(&eta, z))
}

fn mean_loss(eta: &DVector<f64>, z: &[f64]) -> f64 {
    eta.iter().zip(z).map(|(&e, &zi)| tailored_loss_term(zi, e)).sum::<f64>() / z.len() as f64
}

/// `n^-1 sum (z/L - (1-z)/(1-L)) phi`, the balance residual vector.
pub fn tailored_loss_gradient(theta: &DVector<f64>, basis: &BasisMatrix, z: &[f64]) -> Result<DVector<f64>> {
    check_dims(&basis.values, z, Some(theta))?;
    let eta = finite_index(&basis.values, theta)?;
    Ok(gradient_at(&basis.values, &eta, z))
}

fn gradient_at(phi: &DMatrix<f64>, eta: &DVector<f64>, z: &[f64]) -> DVector<f64> {
    // z / L = 1 + exp(-eta);  (1 - z) / (1 - L) = 1 + exp(eta)
    let coef = DVector::from_iterator(
        z.len(),
        eta.iter().zip(z).map(|(&e, &zi)| if zi == 1.0 { 1.0 + (-e).exp() } else { -(1.0 + e.exp()) }),
    );
    phi.tr_mul(&coef) / z.len() as f64
}

/// `-n^-1 sum (z(1-L)/L + (1-z)L/(1-L)) phi phi'`.
pub fn tailored_loss_hessian(theta: &DVector<f64>, basis: &BasisMatrix, z: &[f64]) -> Result<DMatrix<f64>> {
    check_dims(&basis.values, z, Some(theta))?;
    let eta = finite_index(&basis.values, theta)?;
    Ok(hessian_at(&basis.values, &eta, z))
}

fn hessian_at(phi: &DMatrix<f64>, eta: &DVector<f64>, z: &[f64]) -> DMatrix<f64> {
    let mut scaled = phi.clone();
    for (i, (&e, &zi)) in eta.iter().zip(z).enumerate() {
        let c = if zi == 1.0 { (-e).exp() } else { e.exp() };
        scaled.row_mut(i).scale_mut(c);
    }
    -(phi.tr_mul(&scaled)) / z.len() as f64
}

/// Tailored loss minus an optional quadratic and linear penalty:
/// `S(theta) - 0.5 theta' diag(ridge) theta - linear' theta`.
pub(crate) struct TailoredObjective<'a> {
    pub phi: &'a DMatrix<f64>,
    pub z: &'a [f64],
    pub ridge: Option<DVector<f64>>,
    pub linear: Option<DVector<f64>>,
}

impl ConcaveObjective for TailoredObjective<'_> {
    fn value(&self, theta: &DVector<f64>) -> f64 {
        let eta = self.phi * theta;
        let mut v = mean_loss(&eta, self.z);
        if let Some(r) = &self.ridge {
            v -= 0.5 * theta.iter().zip(r.iter()).map(|(t, w)| w * t * t).sum::<f64>();
        }
        if let Some(c) = &self.linear {
            v -= c.dot(theta);
        }
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let eta = self.phi * theta;
        let mut g = gradient_at(self.phi, &eta, self.z);
        if let Some(r) = &self.ridge {
            g -= r.component_mul(theta);
        }
        if let Some(c) = &self.linear {
            g -= c;
        }
        g
    }

    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let eta = self.phi * theta;
        let mut h = hessian_at(self.phi, &eta, self.z);
        if let Some(r) = &self.ridge {
            for j in 0..r.len() {
                h[(j, j)] -= r[j];
            }
        }
        h
    }

    fn max_abs_index(&self, theta: &DVector<f64>) -> f64 {
        newton::sup_norm(&(self.phi * theta))
    }
}

pub(crate) fn check_instrument(z: &[f64]) -> Result<()> {
    let ones = z.iter().filter(|&&v| v == 1.0).count();
    let zeros = z.iter().filter(|&&v| v == 0.0).count();
    if ones + zeros != z.len() {
        return Err(Error::InvalidArgument("instrument must be 0/1".into()));
    }
    if ones == 0 || zeros == 0 {
        return Err(Error::InvalidData("instrument has no variation".into()));
    }
    Ok(())
}

/// Per-column balance residuals `n^-1 sum (2 z_i - 1) w_i phi_m(x_i)`.
pub fn balance_residuals(phi: &DMatrix<f64>, z: &[f64], weights: &[f64]) -> DVector<f64> {
    let signed = DVector::from_iterator(z.len(), z.iter().zip(weights).map(|(&zi, &w)| (2.0 * zi - 1.0) * w));
    phi.tr_mul(&signed) / z.len() as f64
}

/// Assembles a [`FittedPropensity`] from a coefficient vector.
pub(crate) fn finish_fit(
    phi: &DMatrix<f64>,
    z: &[f64],
    theta: DVector<f64>,
    outcome_converged: bool,
    iterations: usize,
    gradient_norm: f64,
    separation: bool,
    notes: Vec<String>,
    balance_tolerance: f64,
    check_balance: bool,
) -> FittedPropensity {
    let eta = phi * &theta;
    let scores: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
    let weights = ipw_weights(z, &scores);
    let residual = newton::sup_norm(&balance_residuals(phi, z, &weights));
    let cond = if eta.iter().all(|e| e.is_finite()) {
        newton::condition_estimate(&hessian_at(phi, &eta, z))
    } else {
        f64::INFINITY
    };
    let mut notes = notes;
    let mut converged = outcome_converged;
    if converged && check_balance && residual > balance_tolerance {
        converged = false;
        notes.push(format!("balance residual {residual:.3e} above tolerance {balance_tolerance:.1e}"));
    }
    FittedPropensity {
        theta,
        scores,
        weights,
        converged,
        iterations,
        final_gradient_norm: gradient_norm,
        max_balance_residual: residual,
        penalty: None,
        hessian_condition_estimate: cond,
        separation,
        notes,
    }
}

/// Maximizes the tailored loss by Newton ascent with backtracking from
/// `theta = 0`.
///
/// A rank-deficient basis is an error. Empirical separation (an index above
/// [`SEPARATION_INDEX`] in magnitude) stops the iteration and returns a
/// non-converged fit flagged with `separation`.
pub fn fit(basis: &BasisMatrix, z: &[f64], options: &SolverOptions) -> Result<FittedPropensity> {
    options.validate()?;
    check_dims(&basis.values, z, None)?;
    check_instrument(z)?;
    check_full_rank(&basis.values, &basis.labels)?;
    let obj = TailoredObjective { phi: &basis.values, z, ridge: None, linear: None };
    let out = newton::maximize(&obj, DVector::zeros(basis.r()), &options.newton(Some(SEPARATION_INDEX), None));
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
        true,
    ))
}

/// Dual objective `n^-1 sum (w - 1) ln(w - 1) - w`, with `0 ln 0 = 0`.
pub fn dual_objective(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("no weights".into()));
    }
    let mut total = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if !(w >= 1.0) {
            return Err(Error::InvalidRow { row: i, reason: format!("weight {w} is below 1") });
        }
        let excess = w - 1.0;
        let entropy = if excess == 0.0 { 0.0 } else { excess * excess.ln() };
        total += entropy - w;
    }
    Ok(total / weights.len() as f64)
}

/// Average squared weight `n^-1 sum w_i^2`.
pub fn weight_variance_proxy(weights: &[f64]) -> f64 {
    weights.iter().map(|w| w * w).sum::<f64>() / weights.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::raw_basis;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intercept_only(n: usize) -> BasisMatrix {
        raw_basis(&DMatrix::zeros(n, 0), true, &[])
    }

    fn z_04() -> Vec<f64> {
        (0..10).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect()
    }

    /// Direct evaluation from the probability form of the loss.
    fn loss_from_probability(z: f64, l: f64) -> f64 {
        (2.0 * z - 1.0) * (l / (1.0 - l)).ln() - (z - l) * (1.0 / l - 1.0 / (1.0 - l))
    }

    #[test]
    fn loss_is_zero_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(20, 2, |_, _| rng.random::<f64>());
        let z: Vec<f64> = (0..20).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let b = raw_basis(&x, true, &[]);
        assert_eq!(tailored_loss(&DVector::zeros(3), &b, &z).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_probability_form() {
        let b = intercept_only(10);
        let z = z_04();
        let theta = DVector::from_element(1, (0.4_f64 / 0.6).ln());
        let s1 = (2.0_f64 / 3.0).ln() - 0.6 * (1.0 / 0.4 - 1.0 / 0.6);
        let s0 = -(2.0_f64 / 3.0).ln() + 0.4 * (1.0 / 0.4 - 1.0 / 0.6);
        let by_hand = (4.0 * s1 + 6.0 * s0) / 10.0;
        let per_obs: f64 = z.iter().map(|&zi| loss_from_probability(zi, 0.4)).sum::<f64>() / 10.0;
        let got = tailored_loss(&theta, &b, &z).unwrap();
        assert!((got - by_hand).abs() < 1e-14, "{got} vs {by_hand}");
        assert!((got - per_obs).abs() < 1e-14);
    }

    #[test]
    fn loss_falls_without_bound_as_treated_score_vanishes() {
        let mut prev = f64::INFINITY;
        for eta in [-1.0, -5.0, -10.0, -20.0, -30.0] {
            let v = tailored_loss_term(1.0, eta);
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < -1e12);
    }

    #[test]
    fn gradient_at_origin_intercept_only() {
        let g = tailored_loss_gradient(&DVector::zeros(1), &intercept_only(10), &z_04()).unwrap();
        assert_relative_eq!(g[0], -0.4, epsilon = 1e-15);
    }

    #[test]
    fn hessian_at_origin_is_minus_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(15, 2, |_, _| rng.random::<f64>());
        let z: Vec<f64> = (0..15).map(|i| (i % 2) as f64).collect();
        let b = raw_basis(&x, true, &[]);
        let h = tailored_loss_hessian(&DVector::zeros(3), &b, &z).unwrap();
        let gram = b.values.tr_mul(&b.values) / 15.0;
        assert!((h + gram).abs().max() < 1e-14);
    }

    #[test]
    fn rank_deficient_hessian_condition() {
        let x = DMatrix::from_fn(12, 1, |i, _| i as f64);
        let mut vals = raw_basis(&x, true, &[]).values;
        vals = vals.insert_column(2, 0.0);
        for i in 0..12 {
            vals[(i, 2)] = 2.0 * vals[(i, 1)];
        }
        let b = BasisMatrix { values: vals, has_intercept: true, spec: crate::model::BasisSpec::custom(vec![]), labels: vec![] };
        let z: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let h = tailored_loss_hessian(&DVector::zeros(3), &b, &z).unwrap();
        assert!(newton::condition_estimate(&h) > 1e12);
        assert!(matches!(fit(&b, &z, &SolverOptions::default()), Err(Error::RankDeficient { column: 2, .. })));
    }

    #[test]
    fn intercept_only_closed_form() {
        let fit = fit(&intercept_only(10), &z_04(), &SolverOptions::default()).unwrap();
        assert!(fit.converged);
        for (s, w) in fit.scores.iter().zip(&fit.weights) {
            assert!((s - 0.4).abs() < 1e-12);
            assert!((w - 2.5).abs() < 1e-10 || (w - 5.0 / 3.0).abs() < 1e-10);
        }
        assert!(fit.max_balance_residual < 1e-12);
        assert_relative_eq!(weight_variance_proxy(&fit.weights), (4.0 * 6.25 + 6.0 * 25.0 / 9.0) / 10.0, epsilon = 1e-10);
        assert_relative_eq!(weight_variance_proxy(&fit.weights), 4.1667, epsilon = 1e-4);
    }

    #[test]
    fn non_finite_index_is_an_error() {
        let b = intercept_only(4);
        let z = vec![1.0, 0.0, 1.0, 0.0];
        let theta = DVector::from_element(1, f64::NAN);
        assert!(matches!(tailored_loss(&theta, &b, &z), Err(Error::NonFiniteIndex { row: 0 })));
    }

    #[test]
    fn separation_is_flagged() {
        let x = DMatrix::from_fn(20, 1, |i, _| i as f64);
        let z: Vec<f64> = (0..20).map(|i| (i >= 10) as u8 as f64).collect();
        let f = fit(&raw_basis(&x, true, &[]), &z, &SolverOptions::default()).unwrap();
        assert!(!f.converged);
        assert!(f.separation);
        assert!(f.notes.iter().any(|n| n.contains("possible separation")));
        assert!(f.scores.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn dual_objective_values() {
        assert_eq!(dual_objective(&[2.0; 5]).unwrap(), -2.0);
        assert_eq!(dual_objective(&[1.0; 3]).unwrap(), -1.0);
        let v = dual_objective(&[2.1]).unwrap();
        assert!((v - (1.1 * 1.1_f64.ln() - 2.1)).abs() < 1e-15);
        assert!((v - (-1.99501)).abs() < 5e-4);
        assert!((v - (-2.0 + 0.5 * 0.01)).abs() < 1e-3);
        assert!(dual_objective(&[2.0, 0.99]).is_err());
    }

    #[test]
    fn proxy_of_half_scores() {
        assert_eq!(weight_variance_proxy(&[2.0; 8]), 4.0);
    }
}
