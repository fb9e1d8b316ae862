//! Output files. Every file carries the run configuration and version;
//! wall-clock data goes only to the `run_meta.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const SIDECAR: &str = "run_meta.json";

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    version: &'a str,
    config: &'a RunConfig,
    #[serde(flatten)]
    body: &'a T,
}

/// Collects written files for one run.
pub struct Writer<'a> {
    config: &'a RunConfig,
    dir: PathBuf,
    written: Vec<String>,
    started: SystemTime,
    clock: Instant,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("cannot write {}: {e}", path.display()))
}

impl<'a> Writer<'a> {
    pub fn new(config: &'a RunConfig) -> Result<Self, CliError> {
        let dir = config.out_dir().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self { config, dir, written: Vec::new(), started: SystemTime::now(), clock: Instant::now() })
    }

    fn put(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Pretty JSON object with `version` and `config` ahead of `body`'s fields.
    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<(), CliError> {
        let env = Envelope { version: late_balance::VERSION, config: self.config, body };
        let mut text = serde_json::to_string_pretty(&env).map_err(|e| CliError::Internal(format!("serializing {name}: {e}")))?;
        text.push('\n');
        self.put(name, &text)
    }

    /// CSV body preceded by `#` comment lines with the version and config.
    pub fn csv(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let config = serde_json::to_string(self.config).map_err(|e| CliError::Internal(e.to_string()))?;
        let text = format!("# late-balance {}\n# config {config}\n{body}", late_balance::VERSION);
        self.put(name, &text)
    }

    /// Writes the timing sidecar and returns the list of result files.
    pub fn finish(self) -> Result<Vec<String>, CliError> {
        let started = self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let meta = serde_json::json!({
            "version": late_balance::VERSION,
            "config": self.config,
            "started_unix_seconds": started,
            "elapsed_seconds": self.clock.elapsed().as_secs_f64(),
            "files": self.written,
        });
        let path = self.dir.join(SIDECAR);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Internal(e.to_string()))? + "\n";
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(self.written)
    }
}

/// CSV text from a header and rows of already formatted fields.
pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Internal(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Internal(e.to_string()))
}

/// Shortest round-trip representation; empty for non-finite values.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}
