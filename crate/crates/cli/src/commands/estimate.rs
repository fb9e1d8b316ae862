use late_balance::balancer::{balance_residuals, select_lambda, LambdaSelection, Penalty};
use late_balance::late::{bootstrap_se, fit_method, method_basis, BootstrapResult, MethodOptions, MethodSpec};
use late_balance::{Dataset, Error, LateEstimate, MethodLabel};
use serde::Serialize;

use super::{load_dataset, standardized_differences};
use crate::config::{Format, RunConfig};
use crate::error::CliError;
use crate::output::{csv_text, num, Writer};

const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Serialize)]
pub struct DataSummary {
    pub n: usize,
    pub covariates: Vec<String>,
    pub z_mean: f64,
}

#[derive(Debug, Serialize)]
pub struct MethodResult {
    pub method: MethodLabel,
    pub ok: bool,
    pub error: Option<String>,
    pub estimate: Option<LateEstimate>,
    pub penalty: Option<Penalty>,
    pub lambda_selection: Option<LambdaSelection>,
    pub bootstrap: Option<BootstrapResult>,
    pub bootstrap_error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct BalanceRow {
    pub column: String,
    /// Standardized difference before weighting.
    pub before: f64,
    /// Standardized difference after weighting.
    pub after: f64,
    /// Unnormalized balance residual `n^-1 sum (Z - (1 - Z)) w phi`.
    pub residual: f64,
}

#[derive(Debug, Serialize)]
pub struct MethodBalance {
    pub method: MethodLabel,
    pub rows: Vec<BalanceRow>,
}

#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub data: DataSummary,
    pub results: Vec<MethodResult>,
    pub balance: Vec<MethodBalance>,
}

struct ScoreRows {
    method: MethodLabel,
    z: Vec<f64>,
    scores: Vec<f64>,
    weights: Vec<f64>,
}

fn method_options() -> MethodOptions {
    MethodOptions { asymptotic_se: true, ..MethodOptions::default() }
}

/// Chooses the penalty for a balancing method; a lambda grid is resolved by
/// held-out imbalance.
fn resolve_penalty(config: &RunConfig, data: &Dataset, spec: &MethodSpec) -> Result<(Option<Penalty>, Option<LambdaSelection>), Error> {
    let Some(pc) = config.penalty else { return Ok((None, None)) };
    if !spec.label.is_balancing() {
        return Ok((None, None));
    }
    match config.lambda.as_slice() {
        [] => Err(Error::InvalidArgument("--penalty needs --lambda".into())),
        [l] => Ok((Some(pc.at(*l)), None)),
        grid => {
            let opts = method_options();
            let (basis, _) = method_basis(data, spec, None, &opts.solver)?;
            let sel = select_lambda(&basis, &data.z, &pc.at(grid[0]), grid, config.folds.unwrap_or(DEFAULT_FOLDS), config.seed, &opts.solver)?;
            Ok((Some(pc.at(sel.best_lambda)), Some(sel)))
        }
    }
}

fn run_one(config: &RunConfig, data: &Dataset, label: MethodLabel) -> (MethodResult, Option<(MethodBalance, ScoreRows)>) {
    let mut res = MethodResult {
        method: label,
        ok: false,
        error: None,
        estimate: None,
        penalty: None,
        lambda_selection: None,
        bootstrap: None,
        bootstrap_error: None,
    };
    let mut spec = MethodSpec::with_basis(label, config.basis[0].clone());
    match resolve_penalty(config, data, &spec) {
        Ok((p, sel)) => {
            spec.penalty = p;
            res.penalty = p;
            res.lambda_selection = sel;
        }
        Err(e) => {
            res.error = Some(e.to_string());
            return (res, None);
        }
    }
    let mut opts = method_options();
    let fitted = match fit_method(data, &spec, &opts, None) {
        Err(Error::Singular(msg)) => {
            // Plug-in variance unavailable; keep the point estimate.
            opts.asymptotic_se = false;
            fit_method(data, &spec, &opts, None).map(|mut f| {
                f.estimate.diagnostics.notes.push(format!("asymptotic se unavailable: {msg}"));
                f
            })
        }
        other => other,
    };
    let fitted = match fitted {
        Ok(f) => f,
        Err(e) => {
            res.error = Some(e.to_string());
            return (res, None);
        }
    };
    if config.bootstrap > 0 {
        match bootstrap_se(data, &spec, &opts, config.bootstrap, config.seed, None) {
            Ok(b) => res.bootstrap = Some(b),
            Err(e) => res.bootstrap_error = Some(e.to_string()),
        }
    }
    let extra = fitted.propensity.map(|(basis, fit)| {
        let before = standardized_differences(&basis.values, &data.z, None);
        let after = standardized_differences(&basis.values, &data.z, Some(&fit.weights));
        let resid = balance_residuals(&basis.values, &data.z, &fit.weights);
        let rows = (0..basis.r())
            .map(|j| BalanceRow { column: basis.labels[j].clone(), before: before[j], after: after[j], residual: resid[j] })
            .collect();
        (MethodBalance { method: label, rows }, ScoreRows { method: label, z: data.z.clone(), scores: fit.scores, weights: fit.weights })
    });
    res.ok = true;
    res.estimate = Some(fitted.estimate);
    (res, extra)
}

/// Checks guarantees the library makes about successful results.
fn check_invariants(results: &[MethodResult], tolerance: f64) -> Result<(), CliError> {
    for r in results.iter().filter(|r| r.ok) {
        let e = r.estimate.as_ref().ok_or_else(|| CliError::Internal(format!("{}: ok without estimate", r.method)))?;
        if !e.tau_hat.is_finite() {
            return Err(CliError::Internal(format!("{}: non-finite estimate", r.method)));
        }
        let exact = r.method.is_balancing() && r.penalty.is_none();
        if exact && e.diagnostics.converged == Some(true) {
            let resid = e.diagnostics.max_balance_residual.unwrap_or(f64::INFINITY);
            if resid > tolerance {
                return Err(CliError::Internal(format!("{}: converged fit has balance residual {resid:e}", r.method)));
            }
        }
    }
    Ok(())
}

pub fn run(config: &RunConfig) -> Result<(), CliError> {
    let data = load_dataset(config)?;
    let mut results = Vec::new();
    let mut balance = Vec::new();
    let mut scores = Vec::new();
    for &label in &config.methods {
        let (res, extra) = run_one(config, &data, label);
        results.push(res);
        if let Some((b, s)) = extra {
            balance.push(b);
            scores.push(s);
        }
    }
    check_invariants(&results, method_options().solver.balance_tolerance)?;

    let mut w = Writer::new(config)?;
    let report = EstimateReport {
        data: DataSummary { n: data.n(), covariates: data.covariate_names.clone(), z_mean: data.z_mean() },
        results,
        balance,
    };
    if config.wants(Format::Json) {
        w.json("report.json", &report)?;
    }
    if config.wants(Format::Csv) {
        let rows: Vec<Vec<String>> = report
            .results
            .iter()
            .map(|r| {
                let e = r.estimate.as_ref();
                vec![
                    r.method.to_string(),
                    r.ok.to_string(),
                    e.map_or(String::new(), |e| num(e.tau_hat)),
                    e.and_then(|e| e.se).map_or(String::new(), num),
                    r.bootstrap.as_ref().map_or(String::new(), |b| num(b.se)),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .collect();
        w.csv("estimates.csv", &csv_text(&["method", "ok", "tau_hat", "se", "bootstrap_se", "error"], &rows)?)?;

        let mut rows = Vec::new();
        for s in &scores {
            for i in 0..s.z.len() {
                rows.push(vec![s.method.to_string(), i.to_string(), num(s.z[i]), num(s.scores[i]), num(s.weights[i])]);
            }
        }
        w.csv("scores.csv", &csv_text(&["method", "row", "z", "score", "weight"], &rows)?)?;

        let mut rows = Vec::new();
        for b in &report.balance {
            for r in &b.rows {
                rows.push(vec![b.method.to_string(), r.column.clone(), num(r.before), num(r.after), num(r.residual)]);
            }
        }
        w.csv("balance.csv", &csv_text(&["method", "column", "before", "after", "residual"], &rows)?)?;
    }
    w.finish()?;

    if report.results.iter().all(|r| !r.ok) {
        let msgs: Vec<String> = report.results.iter().map(|r| format!("{}: {}", r.method, r.error.as_deref().unwrap_or(""))).collect();
        return Err(CliError::AllFailed(msgs.join("; ")));
    }
    Ok(())
}
