//! Damped Newton ascent for smooth concave objectives.

use nalgebra::{DMatrix, DVector};

/// A smooth concave objective in `theta`.
pub(crate) trait ConcaveObjective {
    /// Objective value; `-inf` or NaN marks an inadmissible point.
    fn value(&self, theta: &DVector<f64>) -> f64;
    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64>;
    /// Hessian (negative semidefinite).
    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64>;
    /// Largest absolute linear index over observations.
    fn max_abs_index(&self, theta: &DVector<f64>) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NewtonSettings {
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    pub shrink: f64,
    pub sufficient_increase: f64,
    /// Stop and flag separation once an accepted iterate has an index
    /// magnitude above this bound.
    pub stop_index_bound: Option<f64>,
    /// Flag (but keep iterating) once an accepted iterate exceeds this bound.
    pub flag_index_bound: Option<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct NewtonOutcome {
    pub theta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub separation: bool,
    pub notes: Vec<String>,
}

pub(crate) fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Solves `(-H) s = g` for the ascent direction, damping `-H` when it is not
/// numerically positive definite.
fn ascent_direction(neg_h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = neg_h.clone().cholesky() {
        return Some(ch.solve(g));
    }
    let scale = neg_h.diagonal().iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-300);
    let mut mu = scale * 1e-12;
    let r = neg_h.nrows();
    for _ in 0..40 {
        let damped = neg_h + DMatrix::identity(r, r) * mu;
        if let Some(ch) = damped.cholesky() {
            return Some(ch.solve(g));
        }
        mu *= 10.0;
    }
    None
}

pub(crate) fn maximize<O: ConcaveObjective>(obj: &O, theta0: DVector<f64>, s: &NewtonSettings) -> NewtonOutcome {
    let mut theta = theta0;
    let mut value = obj.value(&theta);
    let mut grad = obj.gradient(&theta);
    let mut gnorm = sup_norm(&grad);
    let mut notes = Vec::new();
    let mut separation = false;
    let mut iterations = 0;

    while iterations < s.max_iterations {
        if gnorm <= s.gradient_tolerance {
            break;
        }
        if !gnorm.is_finite() || !value.is_finite() {
            notes.push("non-finite objective or gradient".into());
            break;
        }
        let neg_h = -obj.hessian(&theta);
        let Some(step) = ascent_direction(&neg_h, &grad) else {
            notes.push("Hessian could not be factorized".into());
            break;
        };
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-14 {
            let cand = &theta + &step * t;
            let v = obj.value(&cand);
            if v.is_finite() && v >= value + s.sufficient_increase * t * slope {
                accepted = Some((cand, v));
                break;
            }
            // Near the optimum the increase drops below the resolution of the
            // objective; fall back to gradient decrease.
            if v.is_finite()
                && (v - value).abs() <= 8.0 * f64::EPSILON * value.abs().max(1.0)
                && sup_norm(&obj.gradient(&cand)) < gnorm
            {
                accepted = Some((cand, v));
                break;
            }
            t *= s.shrink;
        }
        iterations += 1;
        let Some((cand, v)) = accepted else {
            // No ascent is possible at working precision.
            notes.push(format!("line search stalled at gradient norm {gnorm:.3e}"));
            break;
        };
        let idx = obj.max_abs_index(&cand);
        if let Some(bound) = s.stop_index_bound {
            if idx > bound {
                // Keep the last iterate inside the bound.
                separation = true;
                notes.push(format!("possible separation: index magnitude {idx:.1} exceeds {bound}"));
                break;
            }
        }
        theta = cand;
        value = v;
        grad = obj.gradient(&theta);
        gnorm = sup_norm(&grad);
        if let Some(bound) = s.flag_index_bound {
            if idx > bound && !separation {
                separation = true;
                notes.push(format!("possible separation: index magnitude {idx:.1} exceeds {bound}"));
            }
        }
    }
    if gnorm <= s.gradient_tolerance && !separation {
        // Polish to working precision so balance-derived identities hold
        // well below the tolerance.
        for _ in 0..3 {
            let Some(step) = ascent_direction(&-obj.hessian(&theta), &grad) else { break };
            let cand = &theta + &step;
            let g = obj.gradient(&cand);
            let in_bound = s.stop_index_bound.is_none_or(|b| obj.max_abs_index(&cand) <= b);
            if !(obj.value(&cand).is_finite() && in_bound && sup_norm(&g) < gnorm) {
                break;
            }
            theta = cand;
            grad = g;
            gnorm = sup_norm(&grad);
        }
    }
    let converged = gnorm <= s.gradient_tolerance && !(separation && s.stop_index_bound.is_some());
    if !converged && iterations >= s.max_iterations {
        notes.push(format!("reached {} iterations", s.max_iterations));
    }
    NewtonOutcome { theta, converged, iterations, gradient_norm: gnorm, separation, notes }
}

/// Ratio of the extreme eigenvalues of a symmetric matrix in absolute value;
/// `inf` when the smallest is zero.
pub(crate) fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = m.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &e| (lo.min(e.abs()), hi.max(e.abs())));
    if lo == 0.0 || !lo.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}
