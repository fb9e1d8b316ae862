use late_balance::basis::{cross_validate, CvOptions, CvReport};
use late_balance::BasisSpec;
use serde::Serialize;

use super::load_dataset;
use crate::config::{Format, RunConfig};
use crate::error::CliError;
use crate::output::{csv_text, Writer};

#[derive(Debug, Serialize)]
pub struct CvOutput {
    /// The winning spec; `--basis @cv.json` reads this field.
    pub selected: BasisSpec,
    pub report: CvReport,
}

pub fn run(config: &RunConfig) -> Result<(), CliError> {
    let data = load_dataset(config)?;
    let opts = CvOptions { seed: config.seed, folds: config.folds, ..CvOptions::default() };
    let report = cross_validate(&data.x, &data.covariate_names, &data.z, &config.basis, &opts)?;
    let out = CvOutput { selected: report.best_spec.clone(), report };

    let mut w = Writer::new(config)?;
    // The JSON file is what `estimate` consumes, so it is always written.
    w.json("cv.json", &out)?;
    if config.wants(Format::Csv) {
        let rows: Vec<Vec<String>> = out
            .report
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                vec![
                    c.tag.clone(),
                    c.r.to_string(),
                    c.held_out_loss.map_or(String::new(), |v| format!("{v}")),
                    c.feasible.to_string(),
                    c.failed.to_string(),
                    (i == out.report.best).to_string(),
                    c.message.clone().unwrap_or_default(),
                ]
            })
            .collect();
        w.csv("cv.csv", &csv_text(&["basis", "columns", "held_out_loss", "feasible", "failed", "selected", "message"], &rows)?)?;
    }
    w.finish()?;
    Ok(())
}
