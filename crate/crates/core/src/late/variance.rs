use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, FittedPropensity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    /// `n^-1 sum psi_i^2`.
    pub v_hat: f64,
    /// `sqrt(v_hat / n)`.
    pub se: f64,
}

/// Plug-in variance from the influence function
///
/// ```text
/// psi = [ Z (Y - m1 - tau (D - mu1)) / pi - (1 - Z)(Y - m0 - tau (D - mu0)) / (1 - pi)
///         + m1 - m0 - tau (mu1 - mu0) ] / Gamma
/// ```
///
/// where `m1, m0, mu1, mu0` are linear projections on `phi` of the
/// inverse-probability-weighted outcomes and treatments, e.g.
/// `m1(x) = phi(x)' (sum phi phi')^-1 sum Y Z phi / pi`.
pub fn asymptotic_variance(data: &Dataset, fitted: &FittedPropensity, phi: &DMatrix<f64>, tau_hat: f64) -> Result<VarianceEstimate> {
    let n = data.n();
    if phi.nrows() != n || fitted.scores.len() != n {
        return Err(Error::InvalidArgument("projection basis and scores must have one row per observation".into()));
    }
    if crate::basis::check_full_rank(phi, &[]).is_err() {
        return Err(Error::Singular("projection basis is rank deficient; use a smaller basis".into()));
    }
    let gram = phi.tr_mul(phi);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("projection basis Gram matrix; use a smaller basis".into()))?;
    let pi = &fitted.scores;
    let weighted = |v: &[f64], treated: bool| {
        DVector::from_iterator(
            n,
            (0..n).map(|i| {
                if treated {
                    v[i] * data.z[i] / pi[i]
                } else {
                    v[i] * (1.0 - data.z[i]) / (1.0 - pi[i])
                }
            }),
        )
    };
    let project = |t: DVector<f64>| phi * chol.solve(&phi.tr_mul(&t));
    let (wy1, wy0, wd1, wd0) = (weighted(&data.y, true), weighted(&data.y, false), weighted(&data.d, true), weighted(&data.d, false));
    let gamma = (wd1.sum() - wd0.sum()) / n as f64;
    if gamma == 0.0 {
        return Err(Error::ZeroFirstStage);
    }
    let (m1, m0, mu1, mu0) = (project(wy1), project(wy0), project(wd1), project(wd0));
    let mut sum_sq = 0.0;
    for i in 0..n {
        let (y, d, z, p) = (data.y[i], data.d[i], data.z[i], pi[i]);
        let psi = (z * (y - m1[i] - tau_hat * (d - mu1[i])) / p
            - (1.0 - z) * (y - m0[i] - tau_hat * (d - mu0[i])) / (1.0 - p)
            + m1[i]
            - m0[i]
            - tau_hat * (mu1[i] - mu0[i]))
            / gamma;
        sum_sq += psi * psi;
    }
    let v_hat = sum_sq / n as f64;
    Ok(VarianceEstimate { v_hat, se: (v_hat / n as f64).sqrt() })
}
