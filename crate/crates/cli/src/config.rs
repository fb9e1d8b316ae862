//! Flags, config files and the resolved run configuration.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use late_balance::balancer::{Penalty, PenaltyKind};
use late_balance::{BasisKind, BasisSpec, DesignLabel, MethodLabel};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "late-balance", version, about = "LATE estimation with covariate-balancing instrument propensity scores")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandArgs,
}

#[derive(Debug, Subcommand)]
pub enum CommandArgs {
    /// Estimate the LATE on a CSV dataset with columns y, d, z and covariates.
    Estimate(Flags),
    /// Run Monte Carlo cells of the Roy-model designs.
    Simulate(Flags),
    /// Select a balancing basis by cross-validated tailored loss.
    Cv(Flags),
    /// Standardized differences before and after weighting, and a lambda path.
    BalanceReport(Flags),
}

impl CommandArgs {
    pub fn split(self) -> (Command, Flags) {
        match self {
            CommandArgs::Estimate(f) => (Command::Estimate, f),
            CommandArgs::Simulate(f) => (Command::Simulate, f),
            CommandArgs::Cv(f) => (Command::Cv, f),
            CommandArgs::BalanceReport(f) => (Command::BalanceReport, f),
        }
    }
}

/// Every setting is optional here; flags win over the config file, which
/// wins over defaults.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Flags {
    /// TOML config file with the same keys as the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Method labels, e.g. `IV,MLE,B(X)`; commas inside parentheses are kept.
    #[arg(long, num_args = 1..)]
    pub methods: Option<Vec<String>>,
    /// `raw`, `intercept`, `power:K`, `spline:DEGREE:KNOTS`, `custom:a,b`,
    /// with optional `+int`, `+orth`, `+std` suffixes, or `@file.json`.
    /// Repeat for cross-validation candidates.
    #[arg(long)]
    pub basis: Option<Vec<String>>,
    /// `none`, `l1`, `l2` or `elastic-net:ALPHA`.
    #[arg(long)]
    pub penalty: Option<String>,
    /// One value, or a grid for lambda selection and the lambda path.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    /// Pairs-bootstrap replicates (0 disables).
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub design: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub delta: Option<Vec<f64>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub format: Option<Vec<Format>>,
    /// Covariates replaced by their natural logarithm before estimation.
    #[arg(long, value_delimiter = ',')]
    pub log_columns: Option<Vec<String>>,
    /// Folds for cross-validation and lambda selection.
    #[arg(long)]
    pub folds: Option<usize>,
}

impl Flags {
    fn or(self, file: Flags) -> Flags {
        Flags {
            config: self.config,
            input: self.input.or(file.input),
            methods: self.methods.or(file.methods),
            basis: self.basis.or(file.basis),
            penalty: self.penalty.or(file.penalty),
            lambda: self.lambda.or(file.lambda),
            bootstrap: self.bootstrap.or(file.bootstrap),
            seed: self.seed.or(file.seed),
            design: self.design.or(file.design),
            n: self.n.or(file.n),
            delta: self.delta.or(file.delta),
            reps: self.reps.or(file.reps),
            out: self.out.or(file.out),
            format: self.format.or(file.format),
            log_columns: self.log_columns.or(file.log_columns),
            folds: self.folds.or(file.folds),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Estimate,
    Simulate,
    Cv,
    BalanceReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub alpha: f64,
}

impl PenaltyConfig {
    pub fn at(&self, lambda: f64) -> Penalty {
        match self.kind {
            PenaltyKind::L1 => Penalty::l1(lambda),
            PenaltyKind::L2 => Penalty::l2(lambda),
            PenaltyKind::ElasticNet => Penalty::elastic_net(lambda, self.alpha),
        }
    }
}

/// The resolved configuration, echoed into every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<String>,
    pub methods: Vec<MethodLabel>,
    pub basis: Vec<BasisSpec>,
    pub penalty: Option<PenaltyConfig>,
    pub lambda: Vec<f64>,
    pub bootstrap: usize,
    pub seed: u64,
    pub design: Vec<DesignLabel>,
    pub n: Vec<usize>,
    pub delta: Vec<f64>,
    pub reps: usize,
    pub out: String,
    pub format: Vec<Format>,
    pub log_columns: Vec<String>,
    pub folds: Option<usize>,
}

pub const DEFAULT_ESTIMATE_METHODS: [MethodLabel; 7] = [
    MethodLabel::Wald,
    MethodLabel::Iv,
    MethodLabel::Mle,
    MethodLabel::Mle2,
    MethodLabel::BX,
    MethodLabel::BDhat,
    MethodLabel::BDhatM,
];

impl RunConfig {
    /// Merges flags over the optional config file and validates.
    pub fn resolve(command: Command, flags: Flags) -> Result<Self, CliError> {
        let flags = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
                let file: Flags = toml::from_str(&text)
                    .map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
                flags.or(file)
            }
            None => flags,
        };

        let methods = match &flags.methods {
            Some(list) => {
                let mut out = Vec::new();
                for item in list {
                    for token in split_top_level(item) {
                        let m: MethodLabel = token.parse().map_err(|e: late_balance::Error| CliError::Input(e.to_string()))?;
                        if !out.contains(&m) {
                            out.push(m);
                        }
                    }
                }
                out
            }
            None if command == Command::Simulate => MethodLabel::TABLE_ORDER.to_vec(),
            None => DEFAULT_ESTIMATE_METHODS.to_vec(),
        };
        let basis = match &flags.basis {
            Some(list) => list.iter().map(|s| parse_basis(s)).collect::<Result<Vec<_>, _>>()?,
            None if command == Command::Cv => default_cv_grid(),
            None => vec![BasisSpec::raw(true)],
        };
        let penalty = match flags.penalty.as_deref() {
            None => None,
            Some(s) => parse_penalty(s)?,
        };
        let design = match &flags.design {
            Some(list) => list
                .iter()
                .map(|s| s.parse::<DesignLabel>().map_err(|e| CliError::Input(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?,
            None => Vec::new(),
        };
        let format = flags.format.clone().unwrap_or_else(|| vec![Format::Json, Format::Csv]);
        let cfg = RunConfig {
            command,
            input: flags.input.as_ref().map(|p| p.display().to_string()),
            methods,
            basis,
            penalty,
            lambda: flags.lambda.clone().unwrap_or_default(),
            bootstrap: flags.bootstrap.unwrap_or(0),
            seed: flags.seed.unwrap_or(1),
            design,
            n: flags.n.clone().unwrap_or_else(|| vec![1000]),
            delta: flags.delta.clone().unwrap_or_else(|| vec![0.05]),
            reps: flags.reps.unwrap_or(500),
            out: flags.out.as_ref().map_or_else(|| "late-balance-out".to_string(), |p| p.display().to_string()),
            format,
            log_columns: flags.log_columns.clone().unwrap_or_default(),
            folds: flags.folds,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Input(m.to_string()));
        match self.command {
            Command::Estimate | Command::Cv | Command::BalanceReport if self.input.is_none() => {
                return bad("--input is required for this command");
            }
            Command::Simulate if self.design.is_empty() => return bad("--design is required for simulate"),
            _ => {}
        }
        if self.methods.is_empty() {
            return bad("--methods is empty");
        }
        if self.format.is_empty() {
            return bad("--format is empty");
        }
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("--lambda values must be finite and non-negative");
        }
        if self.command == Command::Estimate && self.basis.len() != 1 {
            return bad("estimate takes exactly one --basis");
        }
        if self.command == Command::Cv && self.basis.len() < 2 {
            return bad("cv needs at least two --basis candidates");
        }
        if self.command == Command::Simulate {
            if self.reps < 2 {
                return bad("--reps must be at least 2");
            }
            if self.n.iter().any(|&n| n < 10) {
                return bad("--n values must be at least 10");
            }
            if self.delta.iter().any(|&d| !(d > 0.0 && d < 0.5)) {
                return bad("--delta values must lie in (0, 0.5)");
            }
        }
        if self.bootstrap == 1 {
            return bad("--bootstrap must be 0 or at least 2");
        }
        if let Some(k) = self.folds {
            if k < 2 {
                return bad("--folds must be at least 2");
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        Path::new(&self.out)
    }

    pub fn wants(&self, f: Format) -> bool {
        self.format.contains(&f)
    }
}

/// Default cross-validation grid: additive splines of degree 1 to 3 with 0
/// to 3 interior knots.
pub fn default_cv_grid() -> Vec<BasisSpec> {
    let mut out = Vec::new();
    for degree in 1..=3 {
        for knots in 0..=3 {
            out.push(BasisSpec::additive_spline(degree, knots));
        }
    }
    out
}

/// Splits on commas that are not inside parentheses.
pub fn split_top_level(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if c == ',' && depth == 0 {
            out.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(c);
        }
    }
    out.push(cur.trim().to_string());
    out.retain(|t| !t.is_empty());
    out
}

pub fn parse_penalty(s: &str) -> Result<Option<PenaltyConfig>, CliError> {
    let s = s.trim().to_ascii_lowercase();
    let (kind, alpha) = match s.split_once(':') {
        None => (s.as_str(), None),
        Some((k, a)) => (k, Some(a.parse::<f64>().map_err(|_| CliError::Input(format!("bad elastic-net alpha {a:?}")))?)),
    };
    let cfg = match kind {
        "none" => return Ok(None),
        "l1" | "lasso" => PenaltyConfig { kind: PenaltyKind::L1, alpha: 1.0 },
        "l2" | "ridge" => PenaltyConfig { kind: PenaltyKind::L2, alpha: 0.0 },
        "elastic-net" | "elastic_net" | "en" => {
            let alpha = alpha.unwrap_or(0.5);
            if !(0.0..=1.0).contains(&alpha) {
                return Err(CliError::Input(format!("elastic-net alpha must lie in [0, 1], got {alpha}")));
            }
            PenaltyConfig { kind: PenaltyKind::ElasticNet, alpha }
        }
        _ => return Err(CliError::Input(format!("unknown penalty {s:?} (expected none, l1, l2 or elastic-net:ALPHA)"))),
    };
    Ok(Some(cfg))
}

fn parse_usize(field: &str, what: &str) -> Result<usize, CliError> {
    field.parse().map_err(|_| CliError::Input(format!("basis: {what} must be a non-negative integer, got {field:?}")))
}

/// Parses a basis description; `@path` reads a JSON file holding either a
/// basis spec or a cv report with a `selected` field.
pub fn parse_basis(s: &str) -> Result<BasisSpec, CliError> {
    let s = s.trim();
    if let Some(path) = s.strip_prefix('@') {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read basis file {path}: {e}")))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("basis file {path}: {e}")))?;
        let spec = value.get("selected").cloned().unwrap_or(value);
        return serde_json::from_value(spec).map_err(|e| CliError::Input(format!("basis file {path}: {e}")));
    }
    let mut parts = s.split('+');
    let head = parts.next().unwrap_or("");
    let mut fields = head.splitn(2, ':');
    let name = fields.next().unwrap_or("").to_ascii_lowercase();
    let rest = fields.next();
    let mut spec = match (name.as_str(), rest) {
        ("raw", None) => BasisSpec::raw(true),
        ("raw-nointercept", None) => BasisSpec::raw(false),
        ("intercept", None) => BasisSpec::custom(Vec::new()),
        ("power", Some(k)) => BasisSpec::power_series(parse_usize(k, "K")?),
        ("spline", Some(args)) => {
            let (d, k) = args.split_once(':').ok_or_else(|| CliError::Input(format!("basis {s:?}: expected spline:DEGREE:KNOTS")))?;
            BasisSpec::additive_spline(parse_usize(d, "degree")?, parse_usize(k, "knots")?)
        }
        ("custom", Some(list)) => BasisSpec::custom(list.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect()),
        _ => return Err(CliError::Input(format!("unknown basis {s:?}"))),
    };
    for flag in parts {
        match flag {
            "int" => spec.binary_interactions = true,
            "orth" => spec.orthonormalized = true,
            "std" => spec.standardized = true,
            _ => return Err(CliError::Input(format!("basis {s:?}: unknown modifier +{flag}"))),
        }
    }
    if let BasisKind::PowerSeries { k: 0 } = spec.kind {
        return Err(CliError::Input("basis: power series needs K >= 1".into()));
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_level_split_keeps_parentheses() {
        assert_eq!(split_top_level("IV, B(D,X),MLE(2)"), vec!["IV", "B(D,X)", "MLE(2)"]);
    }

    #[test]
    fn basis_grammar() {
        assert_eq!(parse_basis("spline:3:2+int").unwrap().tag(), "spline(3,2)+int");
        assert_eq!(parse_basis("power:2+orth").unwrap().tag(), "power(2)+orth");
        assert!(parse_basis("spline:3").is_err());
        assert!(parse_basis("raw+bogus").is_err());
        assert_eq!(parse_basis("custom:a, b").unwrap().kind, BasisKind::Custom { labels: vec!["a".into(), "b".into()] });
    }

    #[test]
    fn penalty_grammar() {
        assert_eq!(parse_penalty("none").unwrap(), None);
        assert_eq!(parse_penalty("elastic-net:0.3").unwrap().unwrap().alpha, 0.3);
        assert!(parse_penalty("elastic-net:3").is_err());
        assert!(parse_penalty("l3").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let flags = Flags { seed: Some(9), ..Flags::default() };
        let file: Flags = toml::from_str("seed = 4\nreps = 20\ndesign = [\"B\"]").unwrap();
        let merged = flags.or(file);
        assert_eq!(merged.seed, Some(9));
        assert_eq!(merged.reps, Some(20));
    }

    #[test]
    fn requirements_per_command() {
        assert!(RunConfig::resolve(Command::Estimate, Flags::default()).is_err());
        assert!(RunConfig::resolve(Command::Simulate, Flags::default()).is_err());
        let f = Flags { design: Some(vec!["a".into()]), ..Flags::default() };
        let cfg = RunConfig::resolve(Command::Simulate, f).unwrap();
        assert_eq!(cfg.methods, MethodLabel::TABLE_ORDER.to_vec());
        assert_eq!(cfg.design, vec![DesignLabel::A]);
    }
}
