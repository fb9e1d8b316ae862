use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_replicate, true_late, RoyDesign};
use crate::error::{Error, Result};
use crate::late::{estimate_method, MethodOptions, MethodSpec};
use crate::model::{McResult, McRow, MethodLabel};

/// One Monte Carlo cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub design: RoyDesign,
    pub n: usize,
    pub replications: usize,
    /// Must include IV, the relative-MSE reference.
    pub methods: Vec<MethodLabel>,
    pub seed: u64,
}

/// One failed (replicate, method) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McFailure {
    pub replicate: usize,
    pub method: MethodLabel,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRun {
    pub result: McResult,
    pub failures: Vec<McFailure>,
}

/// Replicate `r` uses ChaCha stream `r` of `cell.seed`.
pub fn run_mc(cell: &McCell, options: &MethodOptions) -> Result<McRun> {
    let streams: Vec<u64> = (0..cell.replications as u64).collect();
    run_mc_streams(cell, options, &streams)
}

/// Like [`run_mc`] with explicit per-replicate streams; `streams.len()`
/// replaces `cell.replications`.
pub fn run_mc_streams(cell: &McCell, options: &MethodOptions, streams: &[u64]) -> Result<McRun> {
    if streams.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 replications".into()));
    }
    if cell.n < 10 {
        return Err(Error::InvalidArgument(format!("need n >= 10, got {}", cell.n)));
    }
    if !cell.methods.contains(&MethodLabel::Iv) {
        return Err(Error::InvalidArgument("methods must include IV".into()));
    }
    let mut methods = cell.methods.clone();
    methods.dedup();
    let truth = true_late(&cell.design).value;

    let per_rep: Vec<Vec<std::result::Result<f64, String>>> = streams
        .par_iter()
        .map(|&stream| {
            let sim = match generate_replicate(&cell.design, cell.n, cell.seed, stream) {
                Ok(s) => s,
                Err(e) => return vec![Err(e.to_string()); methods.len()],
            };
            methods
                .iter()
                .map(|&m| {
                    estimate_method(&sim.data, &MethodSpec::standard(m), options, Some(&sim.ed0))
                        .map_err(|e| e.to_string())
                        .and_then(|e| if e.tau_hat.is_finite() { Ok(e.tau_hat) } else { Err("non-finite estimate".into()) })
                })
                .collect()
        })
        .collect();

    let iv = methods.iter().position(|&m| m == MethodLabel::Iv).unwrap();
    let mut failures = Vec::new();
    let mut estimates = vec![Vec::new(); methods.len()];
    let mut dropped = 0;
    for (r, row) in per_rep.iter().enumerate() {
        if let Err(msg) = &row[iv] {
            dropped += 1;
            failures.push(McFailure { replicate: r, method: MethodLabel::Iv, message: format!("replicate dropped: {msg}") });
            continue;
        }
        for (k, res) in row.iter().enumerate() {
            match res {
                Ok(t) => estimates[k].push(*t),
                Err(msg) => failures.push(McFailure { replicate: r, method: methods[k], message: msg.clone() }),
            }
        }
    }

    let summary = |v: &[f64]| -> (f64, f64) {
        if v.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let m = v.len() as f64;
        let mse = v.iter().map(|t| (t - truth).powi(2)).sum::<f64>() / m;
        let bias = (v.iter().sum::<f64>() / m - truth).abs();
        (mse, bias)
    };
    let iv_mse = summary(&estimates[iv]).0;
    let rows = methods
        .iter()
        .zip(&estimates)
        .map(|(&method, v)| {
            let (mse, abs_bias) = summary(v);
            McRow {
                method,
                relative_mse: mse / iv_mse,
                mse,
                abs_bias,
                failures: streams.len() - v.len(),
                successes: v.len(),
            }
        })
        .collect();
    Ok(McRun {
        result: McResult {
            design: cell.design.label,
            n: cell.n,
            delta: cell.design.delta,
            replications: streams.len(),
            rows,
            true_late: truth,
            seed: cell.seed,
            dropped_replicates: dropped,
        },
        failures,
    })
}

fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        String::new()
    }
}

/// Table layout: one block of rows per (delta, n) with MSE relative to IV,
/// |BIAS| and the failure rate; one column per method. Empty cells mark
/// methods without a single success.
pub fn tables_csv(results: &[McResult]) -> String {
    let mut methods: Vec<MethodLabel> = Vec::new();
    for r in results {
        for row in &r.rows {
            if !methods.contains(&row.method) {
                methods.push(row.method);
            }
        }
    }
    let mut out = String::from("design,delta,n,stat");
    for m in &methods {
        out.push(',');
        out.push_str(m.as_str());
    }
    out.push('\n');
    for r in results {
        for stat in ["MSE", "|BIAS|", "FAIL"] {
            out.push_str(&format!("{},{},{},{stat}", r.design, r.delta, r.n));
            for m in &methods {
                out.push(',');
                if let Some(row) = r.row(*m) {
                    out.push_str(&match stat {
                        "MSE" => cell(row.relative_mse),
                        "|BIAS|" => cell(row.abs_bias),
                        _ => cell(row.failures as f64 / r.replications as f64),
                    });
                }
            }
            out.push('\n');
        }
    }
    out
}
