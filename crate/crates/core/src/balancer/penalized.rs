//! Penalized balancing: `max n^-1 sum S - lambda J(theta)`.
//!
//! Ridge is solved by Newton ascent on the smooth objective. Lasso and
//! elastic net use proximal gradient ascent with backtracking; once the
//! support settles, a Newton step on the active coordinates (with fixed signs)
//! polishes the solution so the KKT conditions hold to solver precision.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    balance_residuals, check_dims, check_instrument, finish_fit, fit, gradient_at, logistic, mean_loss,
    SolverOptions, TailoredObjective, SEPARATION_INDEX,
};
use crate::basis::standardize;
use crate::error::{Error, Result};
use crate::model::{ipw_weights, BasisMatrix, FittedPropensity};
use crate::newton::{self, sup_norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    L1,
    L2,
    ElasticNet,
}

/// Penalty `lambda J(theta)`.
///
/// `J` is `||theta||_1` (l1), `||theta||_2^2 / 2` (l2) or
/// `alpha ||theta||_1 + (1 - alpha) ||theta||_2^2 / 2` (elastic net). The
/// intercept column is excluded unless `intercept_penalized`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub kind: PenaltyKind,
    pub lambda: f64,
    pub alpha: f64,
    pub intercept_penalized: bool,
}

impl Penalty {
    pub fn l1(lambda: f64) -> Self {
        Self { kind: PenaltyKind::L1, lambda, alpha: 1.0, intercept_penalized: false }
    }

    pub fn l2(lambda: f64) -> Self {
        Self { kind: PenaltyKind::L2, lambda, alpha: 0.0, intercept_penalized: false }
    }

    pub fn elastic_net(lambda: f64, alpha: f64) -> Self {
        Self { kind: PenaltyKind::ElasticNet, lambda, alpha, intercept_penalized: false }
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("penalty lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("elastic-net alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// `(l1 weight, l2 weight)` multiplying `||.||_1` and `||.||^2 / 2`.
    fn split(&self) -> (f64, f64) {
        match self.kind {
            PenaltyKind::L1 => (self.lambda, 0.0),
            PenaltyKind::L2 => (0.0, self.lambda),
            PenaltyKind::ElasticNet => (self.lambda * self.alpha, self.lambda * (1.0 - self.alpha)),
        }
    }
}

fn penalized_mask(basis: &BasisMatrix, penalty: &Penalty) -> Vec<bool> {
    (0..basis.r()).map(|j| !(j == 0 && basis.has_intercept && !penalty.intercept_penalized)).collect()
}

/// Returns the basis the penalized problem is solved on: standardized
/// (intercept exempt) unless it already is.
fn working_basis(basis: &BasisMatrix, penalty: &Penalty) -> Result<BasisMatrix> {
    if penalty.lambda > 0.0 && !basis.spec.standardized {
        standardize(basis)
    } else {
        Ok(basis.clone())
    }
}

/// Fits penalized balancing scores.
///
/// With `lambda > 0` the basis is standardized first (intercept exempt) and
/// `theta` refers to the standardized columns. The l1 box constraints
/// `|n^-1 sum (2z - 1) w phi_m| <= lambda` are the dual feasibility check;
/// active coordinates meet them with equality.
pub fn fit_regularized(
    basis: &BasisMatrix,
    z: &[f64],
    penalty: &Penalty,
    options: &SolverOptions,
) -> Result<FittedPropensity> {
    penalty.validate()?;
    options.validate()?;
    check_dims(&basis.values, z, None)?;
    check_instrument(z)?;
    if penalty.lambda == 0.0 {
        let mut f = fit(basis, z, options)?;
        f.penalty = Some(*penalty);
        return Ok(f);
    }
    let work = working_basis(basis, penalty)?;
    let mask = penalized_mask(&work, penalty);
    let (l1, l2) = penalty.split();
    let ridge = DVector::from_iterator(mask.len(), mask.iter().map(|&m| if m { l2 } else { 0.0 }));

    let mut fitted = if l1 == 0.0 {
        let obj = TailoredObjective { phi: &work.values, z, ridge: Some(ridge), linear: None };
        let out = newton::maximize(&obj, DVector::zeros(work.r()), &options.newton(Some(SEPARATION_INDEX), None));
        finish_fit(
            &work.values,
            z,
            out.theta,
            out.converged,
            out.iterations,
            out.gradient_norm,
            out.separation,
            out.notes,
            options.balance_tolerance,
            false,
        )
    } else {
        proximal_fit(&work.values, z, &mask, l1, &ridge, options)
    };
    if !basis.spec.standardized {
        fitted.notes.push("basis standardized before penalization; theta refers to standardized columns".into());
    }
    fitted.penalty = Some(*penalty);
    Ok(fitted)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Smooth part `S - 0.5 theta' diag(ridge) theta`, `-inf` beyond the
/// separation bound.
fn smooth_value(phi: &DMatrix<f64>, z: &[f64], ridge: &DVector<f64>, theta: &DVector<f64>) -> f64 {
    let eta = phi * theta;
    if sup_norm(&eta) > SEPARATION_INDEX {
        return f64::NEG_INFINITY;
    }
    let v = mean_loss(&eta, z) - 0.5 * theta.iter().zip(ridge.iter()).map(|(t, r)| r * t * t).sum::<f64>();
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

fn smooth_gradient(phi: &DMatrix<f64>, z: &[f64], ridge: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
    gradient_at(phi, &(phi * theta), z) - ridge.component_mul(theta)
}

/// Max violation of the KKT conditions of the l1/elastic-net problem.
fn kkt_violation(grad: &DVector<f64>, theta: &DVector<f64>, mask: &[bool], l1: f64) -> f64 {
    let mut worst = 0.0_f64;
    for j in 0..grad.len() {
        let v = if !mask[j] {
            grad[j].abs()
        } else if theta[j] != 0.0 {
            (grad[j] - l1 * theta[j].signum()).abs()
        } else {
            (grad[j].abs() - l1).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Newton on the active coordinates with signs held fixed. Returns the
/// polished coefficients when no active sign flips.
fn polish(
    phi: &DMatrix<f64>,
    z: &[f64],
    theta: &DVector<f64>,
    mask: &[bool],
    l1: f64,
    ridge: &DVector<f64>,
    options: &SolverOptions,
) -> Option<DVector<f64>> {
    let active: Vec<usize> = (0..theta.len()).filter(|&j| !mask[j] || theta[j] != 0.0).collect();
    if active.is_empty() {
        return Some(theta.clone());
    }
    let sub = phi.select_columns(active.iter());
    let sub_ridge = DVector::from_iterator(active.len(), active.iter().map(|&j| ridge[j]));
    let linear = DVector::from_iterator(active.len(), active.iter().map(|&j| if mask[j] { l1 * theta[j].signum() } else { 0.0 }));
    let start = DVector::from_iterator(active.len(), active.iter().map(|&j| theta[j]));
    let obj = TailoredObjective { phi: &sub, z, ridge: Some(sub_ridge), linear: Some(linear) };
    let out = newton::maximize(&obj, start, &options.newton(Some(SEPARATION_INDEX), None));
    if !out.converged {
        return None;
    }
    let mut polished = DVector::zeros(theta.len());
    for (k, &j) in active.iter().enumerate() {
        if mask[j] && out.theta[k].signum() != theta[j].signum() {
            return None;
        }
        polished[j] = out.theta[k];
    }
    Some(polished)
}

fn proximal_fit(
    phi: &DMatrix<f64>,
    z: &[f64],
    mask: &[bool],
    l1: f64,
    ridge: &DVector<f64>,
    options: &SolverOptions,
) -> FittedPropensity {
    const MAX_PROX_ITERATIONS: usize = 20_000;
    const POLISH_EVERY: usize = 20;
    let r = phi.ncols();
    let kkt_tol = options.gradient_tolerance.max(1e-12);
    let mut theta = DVector::zeros(r);
    let mut value = smooth_value(phi, z, ridge, &theta);
    let mut step = 1.0;
    let mut notes = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_support: Vec<bool> = vec![false; r];
    let mut stable = 0;

    while iterations < MAX_PROX_ITERATIONS {
        iterations += 1;
        let grad = smooth_gradient(phi, z, ridge, &theta);
        let mut accepted = None;
        while step > 1e-16 {
            let cand = DVector::from_iterator(
                r,
                (0..r).map(|j| {
                    let v = theta[j] + step * grad[j];
                    if mask[j] {
                        soft_threshold(v, step * l1)
                    } else {
                        v
                    }
                }),
            );
            let diff = &cand - &theta;
            let v = smooth_value(phi, z, ridge, &cand);
            if v.is_finite() && v >= value + grad.dot(&diff) - diff.norm_squared() / (2.0 * step) - 1e-15 * value.abs() {
                accepted = Some((cand, v));
                break;
            }
            step *= options.shrink;
        }
        let Some((cand, v)) = accepted else {
            notes.push("proximal line search stalled".into());
            break;
        };
        theta = cand;
        value = v;
        step *= 1.5;

        let support: Vec<bool> = (0..r).map(|j| theta[j] != 0.0).collect();
        if support == last_support {
            stable += 1;
        } else {
            stable = 0;
            last_support = support;
        }
        if stable >= 5 || iterations % POLISH_EVERY == 0 {
            if let Some(p) = polish(phi, z, &theta, mask, l1, ridge, options) {
                let pv = smooth_value(phi, z, ridge, &p);
                let g = smooth_gradient(phi, z, ridge, &p);
                if kkt_violation(&g, &p, mask, l1) <= kkt_tol {
                    theta = p;
                    converged = true;
                    break;
                }
                let l1_part = |t: &DVector<f64>| (0..r).filter(|&j| mask[j]).map(|j| t[j].abs()).sum::<f64>() * l1;
                if pv - l1_part(&p) > value - l1_part(&theta) {
                    theta = p;
                    value = pv;
                }
            }
            stable = 0;
        }
        let g = smooth_gradient(phi, z, ridge, &theta);
        if kkt_violation(&g, &theta, mask, l1) <= kkt_tol {
            converged = true;
            break;
        }
    }
    if !converged && iterations >= MAX_PROX_ITERATIONS {
        notes.push(format!("proximal gradient reached {MAX_PROX_ITERATIONS} iterations"));
    }
    let g = smooth_gradient(phi, z, ridge, &theta);
    let violation = kkt_violation(&g, &theta, mask, l1);
    let separation = sup_norm(&(phi * &theta)) >= SEPARATION_INDEX;
    finish_fit(phi, z, theta, converged, iterations, violation, separation, notes, options.balance_tolerance, false)
}

/// One row of a lambda path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPath {
    pub lambda: f64,
    /// Max over penalized columns of `|n^-1 sum (2z-1) w phi_m| / sd(phi_m)`.
    pub max_abs_imbalance: f64,
    pub nonzero: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambdas: Vec<f64>,
    /// Mean held-out max-abs standardized imbalance per lambda.
    pub held_out_imbalance: Vec<f64>,
    pub best_lambda: f64,
    pub folds: usize,
}

fn column_sds(phi: &DMatrix<f64>) -> Vec<f64> {
    let n = phi.nrows() as f64;
    phi.column_iter()
        .map(|c| {
            let m = c.sum() / n;
            (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

fn max_standardized_imbalance(phi: &DMatrix<f64>, z: &[f64], weights: &[f64], sds: &[f64], mask: &[bool]) -> f64 {
    let res = balance_residuals(phi, z, weights);
    (0..phi.ncols())
        .filter(|&j| mask[j])
        .map(|j| if sds[j] > 0.0 { res[j].abs() / sds[j] } else { res[j].abs() })
        .fold(0.0, f64::max)
}

/// Fits the penalized problem along `lambdas` on the full sample.
pub fn lambda_path(
    basis: &BasisMatrix,
    z: &[f64],
    penalty: &Penalty,
    lambdas: &[f64],
    options: &SolverOptions,
) -> Result<Vec<LambdaPath>> {
    let work = standardize_if_needed(basis)?;
    let mask = penalized_mask(&work, penalty);
    let sds = column_sds(&work.values);
    lambdas
        .iter()
        .map(|&lambda| {
            let f = fit_regularized(&work, z, &penalty.with_lambda(lambda), options)?;
            Ok(LambdaPath {
                lambda,
                max_abs_imbalance: max_standardized_imbalance(&work.values, z, &f.weights, &sds, &mask),
                nonzero: (0..work.r()).filter(|&j| mask[j] && f.theta[j] != 0.0).count(),
                converged: f.converged,
            })
        })
        .collect()
}

fn standardize_if_needed(basis: &BasisMatrix) -> Result<BasisMatrix> {
    if basis.spec.standardized {
        Ok(basis.clone())
    } else {
        standardize(basis)
    }
}

/// Chooses `lambda` by held-out covariate imbalance over `folds` seeded folds.
/// Ties go to the earlier grid entry.
pub fn select_lambda(
    basis: &BasisMatrix,
    z: &[f64],
    penalty: &Penalty,
    lambdas: &[f64],
    folds: usize,
    seed: u64,
    options: &SolverOptions,
) -> Result<LambdaSelection> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    let n = z.len();
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!("need 2 <= folds <= n, got {folds}")));
    }
    let work = standardize_if_needed(basis)?;
    let mask = penalized_mask(&work, penalty);
    let sds = column_sds(&work.values);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };

    let mut held_out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut total = 0.0;
        for k in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
            let valid: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
            let zt: Vec<f64> = train.iter().map(|&i| z[i]).collect();
            let zv: Vec<f64> = valid.iter().map(|&i| z[i]).collect();
            let score = match fit_regularized(&work.select_rows(&train), &zt, &penalty.with_lambda(lambda), options) {
                Ok(f) => {
                    let phi_v = work.values.select_rows(valid.iter());
                    let scores: Vec<f64> = (&phi_v * &f.theta).iter().map(|&e| logistic(e)).collect();
                    max_standardized_imbalance(&phi_v, &zv, &ipw_weights(&zv, &scores), &sds, &mask)
                }
                Err(_) => f64::INFINITY,
            };
            total += score;
        }
        held_out.push(total / folds as f64);
    }
    let best = held_out
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v < held_out[best] { i } else { best });
    Ok(LambdaSelection { lambdas: lambdas.to_vec(), held_out_imbalance: held_out, best_lambda: lambdas[best], folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::raw_basis;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn sparse_logistic(n: usize, seed: u64) -> (BasisMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = (0..n)
            .map(|i| {
                let p = logistic(0.2 + 0.8 * x[(i, 0)] - 0.6 * x[(i, 1)]);
                (rng.random::<f64>() < p) as u8 as f64
            })
            .collect();
        (raw_basis(&x, true, &[]), z)
    }

    #[test]
    fn negative_lambda_rejected() {
        let (b, z) = sparse_logistic(100, 1);
        assert!(fit_regularized(&b, &z, &Penalty::l1(-0.1), &SolverOptions::default()).is_err());
    }

    #[test]
    fn zero_lambda_matches_exact_fit() {
        let (b, z) = sparse_logistic(300, 2);
        let exact = fit(&b, &z, &SolverOptions::default()).unwrap();
        for p in [Penalty::l1(0.0), Penalty::l2(0.0), Penalty::elastic_net(0.0, 0.5)] {
            let f = fit_regularized(&b, &z, &p, &SolverOptions::default()).unwrap();
            assert!((f.theta.clone() - &exact.theta).amax() < 1e-8);
        }
    }

    #[test]
    fn huge_lambda_gives_constant_scores() {
        let (b, z) = sparse_logistic(400, 3);
        let zbar = z.iter().sum::<f64>() / z.len() as f64;
        for p in [Penalty::l1(1e6), Penalty::l2(1e6), Penalty::elastic_net(1e6, 0.5)] {
            let f = fit_regularized(&b, &z, &p, &SolverOptions::default()).unwrap();
            assert!(f.converged, "{:?}: {:?}", p.kind, f.notes);
            for s in &f.scores {
                assert!((s - zbar).abs() < 1e-6, "{s} vs {zbar}");
            }
        }
    }

    #[test]
    fn lasso_kkt_conditions() {
        let (b, z) = sparse_logistic(2000, 4);
        let lambda = 0.05;
        let f = fit_regularized(&b, &z, &Penalty::l1(lambda), &SolverOptions::default()).unwrap();
        assert!(f.converged, "{:?}", f.notes);
        let work = standardize(&b).unwrap();
        let res = balance_residuals(&work.values, &z, &f.weights);
        assert!(res[0].abs() < 1e-8);
        let mut active = 0;
        for j in 1..work.r() {
            if f.theta[j] != 0.0 {
                active += 1;
                assert!((res[j].abs() - lambda).abs() < 1e-6, "col {j}: {}", res[j]);
            } else {
                assert!(res[j].abs() <= lambda + 1e-8);
            }
        }
        assert!(active >= 2);
    }

    #[test]
    fn ridge_converges_with_shrinkage() {
        let (b, z) = sparse_logistic(500, 5);
        let exact = fit_regularized(&b, &z, &Penalty::l2(1e-9), &SolverOptions::default()).unwrap();
        let f = fit_regularized(&b, &z, &Penalty::l2(0.5), &SolverOptions::default()).unwrap();
        assert!(f.converged);
        let norm = |t: &DVector<f64>| t.rows(1, t.len() - 1).norm();
        assert!(norm(&f.theta) < norm(&exact.theta));
    }

    #[test]
    fn lambda_selection_is_deterministic() {
        let (b, z) = sparse_logistic(300, 6);
        let grid = [0.0, 0.01, 0.05, 0.2];
        let a = select_lambda(&b, &z, &Penalty::l1(0.0), &grid, 5, 9, &SolverOptions::default()).unwrap();
        let c = select_lambda(&b, &z, &Penalty::l1(0.0), &grid, 5, 9, &SolverOptions::default()).unwrap();
        assert_eq!(a, c);
        assert!(grid.contains(&a.best_lambda));
    }
}
