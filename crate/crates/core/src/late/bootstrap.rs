use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::method::{estimate_method, MethodOptions, MethodSpec};
use crate::basis::quantile;
use crate::error::{Error, Result};
use crate::model::Dataset;

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub se: f64,
    /// 2.5% and 97.5% percentiles of the replicate estimates.
    pub percentile_interval: (f64, f64),
    pub replicates: usize,
    pub failed: usize,
    /// Replicate estimates in replicate order (failed ones omitted).
    pub estimates: Vec<f64>,
}

/// Row indices of bootstrap replicate `b`: an independent ChaCha stream per
/// replicate, so results do not depend on scheduling.
pub fn resample_indices(n: usize, seed: u64, replicate: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Pairs bootstrap of a full estimation pipeline.
///
/// Every replicate rebuilds the basis, refits the propensity (and selection)
/// models and re-estimates. Failed replicates are dropped and counted; more
/// than 20% failures is an error.
pub fn bootstrap_se(
    data: &Dataset,
    spec: &MethodSpec,
    options: &MethodOptions,
    replicates: usize,
    seed: u64,
    oracle_d0: Option<&[f64]>,
) -> Result<BootstrapResult> {
    if replicates < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bootstrap replicates, got {replicates}")));
    }
    let mut opts = *options;
    opts.asymptotic_se = false;
    let n = data.n();
    let draws: Vec<Option<f64>> = (0..replicates as u64)
        .into_par_iter()
        .map(|b| {
            let idx = resample_indices(n, seed, b);
            let sample = data.select_rows(&idx).ok()?;
            let oracle: Option<Vec<f64>> = oracle_d0.map(|o| idx.iter().map(|&i| o[i]).collect());
            let est = estimate_method(&sample, spec, &opts, oracle.as_deref()).ok()?;
            est.tau_hat.is_finite().then_some(est.tau_hat)
        })
        .collect();
    let estimates: Vec<f64> = draws.iter().flatten().copied().collect();
    let failed = replicates - estimates.len();
    if failed as f64 > MAX_FAILURE_SHARE * replicates as f64 || estimates.len() < 2 {
        return Err(Error::BootstrapUnreliable { failed, total: replicates });
    }
    let m = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / m;
    let var = estimates.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (m - 1.0);
    let mut sorted = estimates.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        se: var.sqrt(),
        percentile_interval: (quantile(&sorted, 0.025), quantile(&sorted, 0.975)),
        replicates,
        failed,
        estimates,
    })
}
