//! Generalized Roy model simulations.
//!
//! ```text
//! X ~ U(0, 1)          pi(x) = L((2x - 1) ln((1 - delta) / delta))     Z = 1(u < pi(X))
//! (e1, e0, v) ~ N(0, R), corr(e1, v) = rho, other correlations 0
//! D(z) = 1(mu_d(X, z) > v)     Y = D (mu_y1(X) + e1) + (1 - D) e0
//! ```

mod mc;
mod quadrature;

pub use mc::{run_mc, run_mc_streams, tables_csv, McCell, McFailure, McRun};
pub use quadrature::integrate;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::balancer::logistic;
use crate::error::{Error, Result};
use crate::model::{Dataset, DesignLabel};
use crate::normal;

/// Treated-outcome mean of designs A and B.
pub const MU_Y1_CONSTANT: f64 = 0.3989;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoyDesign {
    pub label: DesignLabel,
    pub rho: f64,
    pub delta: f64,
}

impl RoyDesign {
    pub fn new(label: DesignLabel, delta: f64) -> Result<Self> {
        Self::with_rho(label, delta, 0.5)
    }

    pub fn with_rho(label: DesignLabel, delta: f64, rho: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 0.5) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 0.5), got {delta}")));
        }
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::InvalidArgument(format!("rho must lie in (-1, 1), got {rho}")));
        }
        Ok(Self { label, rho, delta })
    }

    pub fn theta0(&self) -> f64 {
        ((1.0 - self.delta) / self.delta).ln()
    }

    pub fn true_score(&self, x: f64) -> f64 {
        logistic((2.0 * x - 1.0) * self.theta0())
    }

    pub fn mu_d(&self, x: f64, z: f64) -> f64 {
        match self.label {
            DesignLabel::A => 4.0 * z,
            DesignLabel::B | DesignLabel::C => -1.0 + 2.0 * x + 2.122 * z,
        }
    }

    pub fn mu_y1(&self, x: f64) -> f64 {
        match self.label {
            DesignLabel::A | DesignLabel::B => MU_Y1_CONSTANT,
            DesignLabel::C => 9.0 * (x + 3.0) * (x + 3.0),
        }
    }
}

/// A simulated sample together with the quantities only a simulation knows.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: Dataset,
    /// True instrument propensity `pi(X_i)`.
    pub true_scores: Vec<f64>,
    /// `E[D(0) | X_i]`.
    pub ed0: Vec<f64>,
    /// `E[D(1) | X_i]`.
    pub ed1: Vec<f64>,
    pub d0: Vec<f64>,
    pub d1: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Draws `n` units from `design`; equivalent to replicate stream 0.
pub fn generate(design: &RoyDesign, n: usize, seed: u64) -> Result<Simulated> {
    generate_replicate(design, n, seed, 0)
}

/// Draws `n` units using ChaCha stream `replicate` of `seed`.
pub fn generate_replicate(design: &RoyDesign, n: usize, seed: u64, replicate: u64) -> Result<Simulated> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    let rho = design.rho;
    let tail = (1.0 - rho * rho).sqrt();
    let mut s = Simulated {
        data: Dataset { y: Vec::with_capacity(n), d: Vec::with_capacity(n), z: Vec::with_capacity(n), x: DMatrix::zeros(n, 1), covariate_names: vec!["x".into()] },
        true_scores: Vec::with_capacity(n),
        ed0: Vec::with_capacity(n),
        ed1: Vec::with_capacity(n),
        d0: Vec::with_capacity(n),
        d1: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
    };
    for i in 0..n {
        let x: f64 = rng.random();
        let u: f64 = rng.random();
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        let n3: f64 = rng.sample(StandardNormal);
        let (e1, e0, v) = (n1, n2, rho * n1 + tail * n3);
        let pi = design.true_score(x);
        let z = if u < pi { 1.0 } else { 0.0 };
        let (m0, m1) = (design.mu_d(x, 0.0), design.mu_d(x, 1.0));
        let d0 = if m0 > v { 1.0 } else { 0.0 };
        let d1 = if m1 > v { 1.0 } else { 0.0 };
        let d = z * d1 + (1.0 - z) * d0;
        let y1 = design.mu_y1(x) + e1;
        let y0 = e0;
        s.data.x[(i, 0)] = x;
        s.data.z.push(z);
        s.data.d.push(d);
        s.data.y.push(d * y1 + (1.0 - d) * y0);
        s.true_scores.push(pi);
        s.ed0.push(normal::cdf(m0));
        s.ed1.push(normal::cdf(m1));
        s.d0.push(d0);
        s.d1.push(d1);
        s.y0.push(y0);
        s.y1.push(y1);
    }
    Ok(s)
}

/// The LATE of a design and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueLate {
    pub value: f64,
    /// `E[mu_y1(X) (F1 - F0)] / E[F1 - F0]`.
    pub outcome_term: f64,
    /// `rho E[f0 - f1] / E[F1 - F0]`.
    pub control_term: f64,
    /// `E[F(mu_d(X, 1)) - F(mu_d(X, 0))]`.
    pub complier_share: f64,
}

pub const QUADRATURE_TOLERANCE: f64 = 1e-10;

/// LATE by adaptive quadrature over `X ~ U(0, 1)`.
pub fn true_late(design: &RoyDesign) -> TrueLate {
    let share_at = |x: f64| normal::cdf(design.mu_d(x, 1.0)) - normal::cdf(design.mu_d(x, 0.0));
    let share = integrate(share_at, 0.0, 1.0, QUADRATURE_TOLERANCE);
    let outcome = integrate(|x| design.mu_y1(x) * share_at(x), 0.0, 1.0, QUADRATURE_TOLERANCE);
    let density_gap = integrate(
        |x| normal::pdf(design.mu_d(x, 0.0)) - normal::pdf(design.mu_d(x, 1.0)),
        0.0,
        1.0,
        QUADRATURE_TOLERANCE,
    );
    let outcome_term = outcome / share;
    let control_term = design.rho * density_gap / share;
    TrueLate { value: outcome_term + control_term, outcome_term, control_term, complier_share: share }
}
