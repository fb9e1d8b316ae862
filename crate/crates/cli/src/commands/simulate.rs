use late_balance::late::MethodOptions;
use late_balance::simlab::{run_mc, tables_csv, true_late, McCell, RoyDesign, TrueLate};
use late_balance::{DesignLabel, McResult, MethodLabel};
use serde::Serialize;

use crate::config::{Format, RunConfig};
use crate::error::CliError;
use crate::output::{csv_text, num, Writer};

#[derive(Debug, Serialize)]
pub struct CellReport {
    pub design: DesignLabel,
    pub delta: f64,
    pub n: usize,
    pub true_late: Option<TrueLate>,
    pub result: Option<McResult>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct FailureEntry {
    pub design: DesignLabel,
    pub delta: f64,
    pub n: usize,
    pub replicate: Option<usize>,
    pub method: Option<MethodLabel>,
    pub message: String,
}

#[derive(Debug, Serialize)]
pub struct SimulationReport {
    pub cells: Vec<CellReport>,
    pub failures: Vec<FailureEntry>,
}

fn check_cell(r: &McResult) -> Result<(), CliError> {
    for row in &r.rows {
        if row.failures + row.successes != r.replications {
            return Err(CliError::Internal(format!("{} {}: failure accounting does not add up", r.design, row.method)));
        }
        if row.successes > 0 && !(row.mse.is_finite() && row.abs_bias.is_finite()) {
            return Err(CliError::Internal(format!("{} {}: non-finite summary with successes", r.design, row.method)));
        }
    }
    Ok(())
}

pub fn run(config: &RunConfig) -> Result<(), CliError> {
    let mut methods = config.methods.clone();
    if !methods.contains(&MethodLabel::Iv) {
        // IV is the relative-MSE reference.
        methods.insert(0, MethodLabel::Iv);
    }
    let opts = MethodOptions::default();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for &label in &config.design {
        for &delta in &config.delta {
            for &n in &config.n {
                let design = RoyDesign::new(label, delta)?;
                let cell = McCell { design, n, replications: config.reps, methods: methods.clone(), seed: config.seed };
                let mut report = CellReport { design: label, delta, n, true_late: Some(true_late(&design)), result: None, error: None };
                match run_mc(&cell, &opts) {
                    Ok(run) => {
                        check_cell(&run.result)?;
                        for f in run.failures {
                            failures.push(FailureEntry { design: label, delta, n, replicate: Some(f.replicate), method: Some(f.method), message: f.message });
                        }
                        report.result = Some(run.result);
                    }
                    Err(e) => {
                        failures.push(FailureEntry { design: label, delta, n, replicate: None, method: None, message: e.to_string() });
                        report.error = Some(e.to_string());
                    }
                }
                cells.push(report);
            }
        }
    }

    let mut w = Writer::new(config)?;
    let report = SimulationReport { cells, failures };
    if config.wants(Format::Json) {
        w.json("simulation.json", &report)?;
    }
    if config.wants(Format::Csv) {
        let results: Vec<McResult> = report.cells.iter().filter_map(|c| c.result.clone()).collect();
        w.csv("simulation.csv", &tables_csv(&results))?;
        let rows: Vec<Vec<String>> = report
            .failures
            .iter()
            .map(|f| {
                vec![
                    f.design.to_string(),
                    num(f.delta),
                    f.n.to_string(),
                    f.replicate.map_or(String::new(), |r| r.to_string()),
                    f.method.map_or(String::new(), |m| m.to_string()),
                    f.message.clone(),
                ]
            })
            .collect();
        w.csv("failures.csv", &csv_text(&["design", "delta", "n", "replicate", "method", "message"], &rows)?)?;
    }
    w.finish()?;
    if report.cells.iter().all(|c| c.result.is_none()) {
        return Err(CliError::AllFailed("every simulation cell failed".into()));
    }
    Ok(())
}
