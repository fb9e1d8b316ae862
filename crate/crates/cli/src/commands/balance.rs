use late_balance::balancer::{self, lambda_path, LambdaPath};
use late_balance::late::{fit_mle_propensity, method_basis, MethodOptions, MethodSpec};
use late_balance::MethodLabel;
use serde::Serialize;

use super::{load_dataset, standardized_differences};
use crate::config::{Format, RunConfig};
use crate::error::CliError;
use crate::output::{csv_text, num, Writer};

const DEFAULT_GRID: [f64; 6] = [0.0, 1e-3, 1e-2, 3e-2, 0.1, 1.0];

#[derive(Debug, Serialize)]
pub struct ColumnBalance {
    pub column: String,
    pub before: f64,
    pub likelihood: Option<f64>,
    pub balancing: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct BalanceReport {
    pub columns: Vec<ColumnBalance>,
    pub likelihood_error: Option<String>,
    pub balancing_error: Option<String>,
    pub lambda_path: Option<Vec<LambdaPath>>,
}

pub fn run(config: &RunConfig) -> Result<(), CliError> {
    let data = load_dataset(config)?;
    let opts = MethodOptions::default();
    let spec = MethodSpec::with_basis(MethodLabel::BX, config.basis[0].clone());
    let (basis, _) = method_basis(&data, &spec, None, &opts.solver)?;

    let before = standardized_differences(&basis.values, &data.z, None);
    let weighted = |fit: late_balance::Result<late_balance::FittedPropensity>| match fit {
        Ok(f) if f.converged => (Some(standardized_differences(&basis.values, &data.z, Some(&f.weights))), None),
        Ok(f) => (None, Some(format!("fit did not converge: {}", f.notes.join("; ")))),
        Err(e) => (None, Some(e.to_string())),
    };
    let (likelihood, likelihood_error) = weighted(fit_mle_propensity(&basis, &data.z, &opts.solver));
    let (balancing, balancing_error) = weighted(balancer::fit(&basis, &data.z, &opts.solver));
    let columns = (0..basis.r())
        .map(|j| ColumnBalance {
            column: basis.labels[j].clone(),
            before: before[j],
            likelihood: likelihood.as_ref().map(|v| v[j]),
            balancing: balancing.as_ref().map(|v| v[j]),
        })
        .collect();
    let path = match config.penalty {
        Some(pc) => {
            let grid = if config.lambda.is_empty() { DEFAULT_GRID.to_vec() } else { config.lambda.clone() };
            Some(lambda_path(&basis, &data.z, &pc.at(grid[0]), &grid, &opts.solver)?)
        }
        None => None,
    };
    let report = BalanceReport { columns, likelihood_error, balancing_error, lambda_path: path };

    let mut w = Writer::new(config)?;
    if config.wants(Format::Json) {
        w.json("balance_report.json", &report)?;
    }
    if config.wants(Format::Csv) {
        let opt = |v: Option<f64>| v.map_or(String::new(), num);
        let rows: Vec<Vec<String>> = report
            .columns
            .iter()
            .map(|c| vec![c.column.clone(), num(c.before), opt(c.likelihood), opt(c.balancing)])
            .collect();
        w.csv("balance_report.csv", &csv_text(&["column", "before", "likelihood", "balancing"], &rows)?)?;
        if let Some(path) = &report.lambda_path {
            let rows: Vec<Vec<String>> = path
                .iter()
                .map(|p| vec![num(p.lambda), num(p.max_abs_imbalance), p.nonzero.to_string(), p.converged.to_string()])
                .collect();
            w.csv("lambda_path.csv", &csv_text(&["lambda", "max_abs_imbalance", "nonzero", "converged"], &rows)?)?;
        }
    }
    w.finish()?;
    Ok(())
}
