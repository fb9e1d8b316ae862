pub mod balance;
pub mod cv;
pub mod estimate;
pub mod simulate;

use late_balance::Dataset;
use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::error::CliError;

/// Reads `--input` and applies `--log-columns`.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset, CliError> {
    let path = config.input.as_deref().ok_or_else(|| CliError::Input("--input is required".into()))?;
    let mut ds = Dataset::from_csv_path(path).map_err(|e| CliError::Input(format!("{path}: {e}")))?;
    for name in &config.log_columns {
        let j = ds
            .covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::Input(format!("--log-columns: no covariate named {name:?}")))?;
        for i in 0..ds.n() {
            let v = ds.x[(i, j)];
            if !(v > 0.0) {
                return Err(CliError::Input(format!("--log-columns: column {name} has non-positive value {v} at row {i}")));
            }
            ds.x[(i, j)] = v.ln();
        }
    }
    Ok(ds)
}

/// Per-column difference of group means divided by the pooled column SD.
/// `weights` are normalized within instrument group; `None` means unweighted.
pub fn standardized_differences(phi: &DMatrix<f64>, z: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
    let n = phi.nrows();
    phi.column_iter()
        .map(|col| {
            let (mut s1, mut w1, mut s0, mut w0) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                let w = weights.map_or(1.0, |w| w[i]);
                if z[i] == 1.0 {
                    s1 += w * col[i];
                    w1 += w;
                } else {
                    s0 += w * col[i];
                    w0 += w;
                }
            }
            let mean = col.sum() / n as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let diff = s1 / w1 - s0 / w0;
            if sd > 0.0 {
                diff / sd
            } else {
                0.0
            }
        })
        .collect()
}
