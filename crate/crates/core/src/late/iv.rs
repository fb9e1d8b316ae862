use nalgebra::{DMatrix, DVector};

use crate::basis::check_full_rank;
use crate::error::{Error, Result};
use crate::model::{Dataset, EstimateDiagnostics, LateEstimate, MethodLabel, SeMethod};

/// Just-identified IV `(W'R)^-1 W'y` with HC0 sandwich covariance.
fn iv_hc0(y: &[f64], regressors: &DMatrix<f64>, instruments: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let yv = DVector::from_column_slice(y);
    let cross = instruments.tr_mul(regressors);
    let lu = cross.clone().lu();
    let beta = lu
        .solve(&instruments.tr_mul(&yv))
        .ok_or_else(|| Error::Singular("instrument-regressor cross product".into()))?;
    let inv = lu.try_inverse().ok_or_else(|| Error::Singular("instrument-regressor cross product".into()))?;
    let resid = &yv - regressors * &beta;
    let mut scaled = instruments.clone();
    for (i, u) in resid.iter().enumerate() {
        scaled.row_mut(i).scale_mut(*u);
    }
    let meat = scaled.tr_mul(&scaled);
    let cov = &inv * meat * inv.transpose();
    Ok((beta, cov))
}

fn ols(y: &[f64], x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let gram = x.tr_mul(x);
    let ch = gram.cholesky().ok_or_else(|| Error::Singular("regressor Gram matrix".into()))?;
    Ok(ch.solve(&x.tr_mul(&DVector::from_column_slice(y))))
}

fn with_column(base: &DMatrix<f64>, col: &[f64]) -> DMatrix<f64> {
    let k = base.ncols();
    let mut m = base.clone().insert_column(k, 0.0);
    m.column_mut(k).copy_from_slice(col);
    m
}

/// Two-stage least squares with regressors `(1, X, D)` and instruments
/// `(1, X, Z)`; HC0 standard error. `delta_hat` and `gamma_hat` are the
/// coefficients on `Z` in the reduced-form and first-stage regressions.
pub fn estimate_tsls(data: &Dataset) -> Result<LateEstimate> {
    let exog = data.x.clone().insert_column(0, 1.0);
    let instruments = with_column(&exog, &data.z);
    let regressors = with_column(&exog, &data.d);
    let mut labels = vec!["1".to_string()];
    labels.extend(data.covariate_names.iter().cloned());
    let mut zl = labels.clone();
    zl.push("z".into());
    check_full_rank(&instruments, &zl)?;
    labels.push("d".into());
    check_full_rank(&regressors, &labels)?;

    let k = instruments.ncols() - 1;
    let gamma = ols(&data.d, &instruments)?[k];
    if gamma == 0.0 {
        return Err(Error::ZeroFirstStage);
    }
    let delta = ols(&data.y, &instruments)?[k];
    let (_, cov) = iv_hc0(&data.y, &regressors, &instruments)?;
    Ok(LateEstimate {
        method: MethodLabel::Iv,
        tau_hat: delta / gamma,
        se: Some(cov[(k, k)].max(0.0).sqrt()),
        se_method: SeMethod::Asymptotic,
        delta_hat: delta,
        gamma_hat: gamma,
        weight_variance_proxy: None,
        diagnostics: EstimateDiagnostics::default(),
    })
}

/// Wald ratio of instrument-group mean differences; HC0 standard error from
/// the equivalent no-covariate IV regression.
pub fn estimate_wald(data: &Dataset) -> Result<LateEstimate> {
    let (mut n1, mut y1, mut d1, mut y0, mut d0) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..data.n() {
        if data.z[i] == 1.0 {
            n1 += 1.0;
            y1 += data.y[i];
            d1 += data.d[i];
        } else {
            y0 += data.y[i];
            d0 += data.d[i];
        }
    }
    let n0 = data.n() as f64 - n1;
    if n1 == 0.0 || n0 == 0.0 {
        return Err(Error::InvalidData("instrument has no variation".into()));
    }
    let delta = y1 / n1 - y0 / n0;
    let gamma = d1 / n1 - d0 / n0;
    if gamma == 0.0 {
        return Err(Error::ZeroFirstStage);
    }
    let ones = DMatrix::from_element(data.n(), 1, 1.0);
    let (_, cov) = iv_hc0(&data.y, &with_column(&ones, &data.d), &with_column(&ones, &data.z))?;
    Ok(LateEstimate {
        method: MethodLabel::Wald,
        tau_hat: delta / gamma,
        se: Some(cov[(1, 1)].max(0.0).sqrt()),
        se_method: SeMethod::Asymptotic,
        delta_hat: delta,
        gamma_hat: gamma,
        weight_variance_proxy: None,
        diagnostics: EstimateDiagnostics::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_compliers() {
        let z = vec![1.0, 1.0, 0.0, 0.0];
        let ds = Dataset::new(z.clone(), z.clone(), z, DMatrix::zeros(4, 0)).unwrap();
        let w = estimate_wald(&ds).unwrap();
        assert_eq!(w.tau_hat, 1.0);
        assert!(w.se.unwrap() < 1e-12);
    }

    #[test]
    fn wald_se_matches_delta_method() {
        // Hand-computable HC0 variance of the Wald ratio.
        let y = vec![3.0, 1.0, 2.0, 0.0, 1.0, 0.5];
        let d = vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let z = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let ds = Dataset::new(y.clone(), d.clone(), z.clone(), DMatrix::zeros(6, 0)).unwrap();
        let w = estimate_wald(&ds).unwrap();
        let tau = (2.0 - 0.5) / (2.0 / 3.0 - 1.0 / 3.0);
        assert!((w.tau_hat - tau).abs() < 1e-12);
        // u_i = y - a - tau d with a chosen so group-0 residuals are mean zero.
        let a = 0.5 - tau / 3.0;
        let u: Vec<f64> = (0..6).map(|i| y[i] - a - tau * d[i]).collect();
        let (s1, s0): (f64, f64) = (u[..3].iter().map(|v| v * v).sum(), u[3..].iter().map(|v| v * v).sum());
        let g = 1.0 / 3.0;
        let var = (s1 / 9.0 + s0 / 9.0) / (g * g);
        assert!((w.se.unwrap() - var.sqrt()).abs() < 1e-10, "{} vs {}", w.se.unwrap(), var.sqrt());
    }

    #[test]
    fn tsls_with_perfect_compliance_is_ols() {
        let x = DMatrix::from_column_slice(8, 1, &[0.1, 0.5, 0.3, 0.9, 0.2, 0.7, 0.4, 0.8]);
        let z = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let y: Vec<f64> = (0..8).map(|i| 1.0 + 2.0 * z[i] + 0.5 * x[(i, 0)] + 0.1 * ((i * 7) % 3) as f64).collect();
        let ds = Dataset::new(y.clone(), z.clone(), z.clone(), x.clone()).unwrap();
        let t = estimate_tsls(&ds).unwrap();
        let design = with_column(&x.clone().insert_column(0, 1.0), &z);
        let b = ols(&y, &design).unwrap();
        assert!((t.tau_hat - b[2]).abs() < 1e-10);
        assert!((t.gamma_hat - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tsls_rank_deficiency() {
        let x = DMatrix::from_element(6, 1, 2.0);
        let z = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let ds = Dataset::new(vec![1.0; 6], z.clone(), z, x).unwrap();
        assert!(matches!(estimate_tsls(&ds), Err(Error::RankDeficient { column: 1, .. })));
    }
}
