use crate::balancer::{balance_residuals, weight_variance_proxy};
use crate::error::{Error, Result};
use crate::model::{ipw_weights, Dataset, EstimateDiagnostics, FittedPropensity, LateEstimate, MethodLabel, SeMethod};
use crate::newton::sup_norm;

/// Wraps externally supplied scores (e.g. true or oracle propensities) so they
/// can be passed to [`estimate_ipw`].
pub fn propensity_from_scores(z: &[f64], scores: Vec<f64>) -> Result<FittedPropensity> {
    if scores.len() != z.len() {
        return Err(Error::InvalidArgument(format!("{} scores for {} observations", scores.len(), z.len())));
    }
    if let Some(i) = scores.iter().position(|&s| !(s > 0.0 && s < 1.0)) {
        return Err(Error::InvalidRow { row: i, reason: format!("score {} is not inside (0, 1)", scores[i]) });
    }
    let weights = ipw_weights(z, &scores);
    let ones = nalgebra::DMatrix::from_element(z.len(), 1, 1.0);
    let residual = sup_norm(&balance_residuals(&ones, z, &weights));
    Ok(FittedPropensity {
        theta: nalgebra::DVector::zeros(0),
        scores,
        weights,
        converged: true,
        iterations: 0,
        final_gradient_norm: 0.0,
        max_balance_residual: residual,
        penalty: None,
        hessian_condition_estimate: f64::NAN,
        separation: false,
        notes: vec!["scores supplied externally".into()],
    })
}

/// Inverse-probability-weighted LATE `Delta / Gamma`.
///
/// With `normalize`, each of the four weighted sums is divided by the mean of
/// its own weights. A non-converged fit is rejected unless `force` is set, in
/// which case the estimate is marked as forced.
pub fn estimate_ipw(data: &Dataset, fitted: &FittedPropensity, normalize: bool, force: bool) -> Result<LateEstimate> {
    let n = data.n();
    if fitted.scores.len() != n {
        return Err(Error::InvalidArgument(format!("{} scores for {n} observations", fitted.scores.len())));
    }
    if !fitted.converged && !force {
        return Err(Error::FitFailed(format!(
            "propensity fit did not converge ({})",
            if fitted.notes.is_empty() { "no diagnostic".to_string() } else { fitted.notes.join("; ") }
        )));
    }
    let (mut s1, mut s0) = (0.0, 0.0);
    let (mut y1, mut y0, mut d1, mut d0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let p = fitted.scores[i];
        if data.z[i] == 1.0 {
            let w = 1.0 / p;
            s1 += w;
            y1 += w * data.y[i];
            d1 += w * data.d[i];
        } else {
            let w = 1.0 / (1.0 - p);
            s0 += w;
            y0 += w * data.y[i];
            d0 += w * data.d[i];
        }
    }
    let (delta, gamma) = if normalize {
        (y1 / s1 - y0 / s0, d1 / s1 - d0 / s0)
    } else {
        let nf = n as f64;
        ((y1 - y0) / nf, (d1 - d0) / nf)
    };
    if gamma == 0.0 {
        return Err(Error::ZeroFirstStage);
    }
    let mut diagnostics = EstimateDiagnostics::from_fit(fitted);
    diagnostics.forced = !fitted.converged;
    Ok(LateEstimate {
        method: MethodLabel::Custom,
        tau_hat: delta / gamma,
        se: None,
        se_method: SeMethod::None,
        delta_hat: delta,
        gamma_hat: gamma,
        weight_variance_proxy: Some(weight_variance_proxy(&fitted.weights)),
        diagnostics,
    })
}
