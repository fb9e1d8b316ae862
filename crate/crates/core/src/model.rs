//! Core domain types shared by every estimation stage.
//!
//! A [`Dataset`] holds the observed sample `(y, d, z, x)`. Treatment and
//! instrument are stored as `f64` but are validated to be exactly `0.0` or
//! `1.0`, which keeps the weighted sums in the estimators free of casts.
//! Row numbers in error messages are 0-based data-row indices.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balancer::Penalty;
use crate::error::{Error, Result};

/// Default convergence thresholds used across the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Max-abs first-order (balance) residual accepted for a converged fit.
    pub balance: f64,
    /// Sup-norm of the gradient at which Newton iterations stop.
    pub gradient: f64,
    pub max_iterations: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { balance: 1e-8, gradient: 1e-10, max_iterations: 100 }
    }
}

/// Observed sample `(y_i, d_i, z_i, x_i)`, `i = 0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    pub z: Vec<f64>,
    /// `n x p` covariate matrix (column-major).
    pub x: DMatrix<f64>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds and validates a dataset. Covariates are named `x1..xp`.
    pub fn new(y: Vec<f64>, d: Vec<f64>, z: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(y, d, z, x, names)
    }

    pub fn with_names(
        y: Vec<f64>,
        d: Vec<f64>,
        z: Vec<f64>,
        x: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        Self { y, d, z, x, covariate_names }.validate()
    }

    /// Returns the dataset iff every invariant holds; otherwise reports the
    /// first violation found.
    pub fn validate(self) -> Result<Self> {
        let n = self.y.len();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 observations, got {n}")));
        }
        for (name, len) in [("d", self.d.len()), ("z", self.z.len()), ("x", self.x.nrows())] {
            if len != n {
                return Err(Error::InvalidData(format!(
                    "length mismatch: y has {n} entries but {name} has {len}"
                )));
            }
        }
        if self.covariate_names.len() != self.x.ncols() {
            return Err(Error::InvalidData(format!(
                "{} covariate names for {} covariate columns",
                self.covariate_names.len(),
                self.x.ncols()
            )));
        }
        for i in 0..n {
            if !self.y[i].is_finite() {
                return Err(Error::InvalidRow { row: i, reason: format!("y is not finite ({})", self.y[i]) });
            }
            for (name, v) in [("d", self.d[i]), ("z", self.z[i])] {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::InvalidRow { row: i, reason: format!("{name} must be 0 or 1, got {v}") });
                }
            }
            for j in 0..self.x.ncols() {
                let v = self.x[(i, j)];
                if !v.is_finite() {
                    return Err(Error::InvalidRow {
                        row: i,
                        reason: format!("covariate {} is not finite ({v})", self.covariate_names[j]),
                    });
                }
            }
        }
        let n1 = self.z.iter().filter(|&&v| v == 1.0).count();
        if n1 == 0 || n1 == n {
            return Err(Error::InvalidData("instrument has no variation".into()));
        }
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn z_mean(&self) -> f64 {
        self.z.iter().sum::<f64>() / self.n() as f64
    }

    /// True when column `j` takes only the values 0 and 1.
    pub fn is_binary_covariate(&self, j: usize) -> bool {
        is_binary(self.x.column(j).iter())
    }

    /// Rows `indices` (with repetition allowed), validated.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let pick = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let x = self.x.select_rows(indices.iter());
        Self::with_names(pick(&self.y), pick(&self.d), pick(&self.z), x, self.covariate_names.clone())
    }

    /// Reads a dataset from CSV. A header is required; `y`, `d`, `z` are found
    /// by name and every other column is a covariate, kept in file order.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::InvalidData(format!("required column {name} not found")))
        };
        let (iy, id, iz) = (find("y")?, find("d")?, find("z")?);
        let cov_idx: Vec<usize> = (0..headers.len()).filter(|&c| c != iy && c != id && c != iz).collect();
        let names: Vec<String> = cov_idx.iter().map(|&c| headers[c].to_string()).collect();

        let (mut y, mut d, mut z, mut xs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |c: usize| -> Result<f64> {
                let field = rec.get(c).unwrap_or("");
                field.parse::<f64>().map_err(|_| Error::InvalidRow {
                    row,
                    reason: format!("column {}: cannot parse {field:?} as a number", &headers[c]),
                })
            };
            y.push(parse(iy)?);
            d.push(parse(id)?);
            z.push(parse(iz)?);
            for &c in &cov_idx {
                xs.push(parse(c)?);
            }
        }
        let n = y.len();
        let x = DMatrix::from_row_slice(n, cov_idx.len(), &xs);
        Self::with_names(y, d, z, x, names)
    }

    pub fn from_csv_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    /// Writes the dataset as CSV with columns `y,d,z,<covariates>`. Reals use
    /// the shortest representation that parses back to the same `f64`.
    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string(), "d".into(), "z".into()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![format!("{}", self.y[i]), format!("{}", self.d[i] as u8), format!("{}", self.z[i] as u8)];
            rec.extend((0..self.p()).map(|j| format!("{}", self.x[(i, j)])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn is_binary<'a>(values: impl Iterator<Item = &'a f64>) -> bool {
    let mut seen = [false; 2];
    for &v in values {
        if v == 0.0 {
            seen[0] = true;
        } else if v == 1.0 {
            seen[1] = true;
        } else {
            return false;
        }
    }
    seen[0] && seen[1]
}

/// Recipe for a balancing-function matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub standardized: bool,
    pub orthonormalized: bool,
    /// Add pairwise products of binary covariates (spline bases only).
    pub binary_interactions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BasisKind {
    Raw { intercept: bool },
    PowerSeries { k: usize },
    AdditiveSpline {
        degree: usize,
        n_knots: usize,
        /// Knots per continuous covariate, filled in at construction.
        #[serde(default)]
        knots: Vec<Vec<f64>>,
    },
    Custom { labels: Vec<String> },
}

impl BasisSpec {
    pub fn raw(intercept: bool) -> Self {
        Self::plain(BasisKind::Raw { intercept })
    }

    pub fn power_series(k: usize) -> Self {
        Self::plain(BasisKind::PowerSeries { k })
    }

    pub fn additive_spline(degree: usize, n_knots: usize) -> Self {
        Self::plain(BasisKind::AdditiveSpline { degree, n_knots, knots: Vec::new() })
    }

    pub fn custom(labels: Vec<String>) -> Self {
        Self::plain(BasisKind::Custom { labels })
    }

    fn plain(kind: BasisKind) -> Self {
        Self { kind, standardized: false, orthonormalized: false, binary_interactions: false }
    }

    /// Short human-readable tag, e.g. `spline(3,2)`.
    pub fn tag(&self) -> String {
        let base = match &self.kind {
            BasisKind::Raw { intercept: true } => "raw".to_string(),
            BasisKind::Raw { intercept: false } => "raw-nointercept".to_string(),
            BasisKind::PowerSeries { k } => format!("power({k})"),
            BasisKind::AdditiveSpline { degree, n_knots, .. } => format!("spline({degree},{n_knots})"),
            BasisKind::Custom { .. } => "custom".to_string(),
        };
        let mut tag = base;
        if self.binary_interactions {
            tag.push_str("+int");
        }
        if self.orthonormalized {
            tag.push_str("+orth");
        }
        if self.standardized {
            tag.push_str("+std");
        }
        tag
    }
}

/// `n x r` evaluation of the balancing functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub has_intercept: bool,
    pub spec: BasisSpec,
    pub labels: Vec<String>,
}

impl BasisMatrix {
    pub fn r(&self) -> usize {
        self.values.ncols()
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(indices.iter()),
            has_intercept: self.has_intercept,
            spec: self.spec.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Fitted instrument propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPropensity {
    pub theta: DVector<f64>,
    /// Fitted scores, strictly inside (0, 1).
    pub scores: Vec<f64>,
    /// `z / score + (1 - z) / (1 - score)`.
    pub weights: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    /// Max-abs balance residual `n^-1 sum (2z - 1) w phi_m` over columns.
    pub max_balance_residual: f64,
    pub penalty: Option<Penalty>,
    pub hessian_condition_estimate: f64,
    pub separation: bool,
    /// Free-form notes (e.g. why a fit stopped).
    pub notes: Vec<String>,
}

/// IPW weights from instrument values and scores.
pub fn ipw_weights(z: &[f64], scores: &[f64]) -> Vec<f64> {
    z.iter().zip(scores).map(|(&zi, &p)| zi / p + (1.0 - zi) / (1.0 - p)).collect()
}

/// Estimator vocabulary used in reports and simulation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodLabel {
    Wald,
    #[serde(rename = "IV")]
    Iv,
    #[serde(rename = "MLE")]
    Mle,
    #[serde(rename = "MLE(2)")]
    Mle2,
    #[serde(rename = "B(X)")]
    BX,
    #[serde(rename = "B(D)")]
    BD,
    #[serde(rename = "B(D,X)")]
    BDX,
    #[serde(rename = "B(Dhat)")]
    BDhat,
    #[serde(rename = "B(Dhat_m)")]
    BDhatM,
    #[serde(rename = "custom")]
    Custom,
}

impl MethodLabel {
    pub const TABLE_ORDER: [MethodLabel; 8] = [
        MethodLabel::Iv,
        MethodLabel::Mle,
        MethodLabel::Mle2,
        MethodLabel::BX,
        MethodLabel::BD,
        MethodLabel::BDX,
        MethodLabel::BDhat,
        MethodLabel::BDhatM,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodLabel::Wald => "Wald",
            MethodLabel::Iv => "IV",
            MethodLabel::Mle => "MLE",
            MethodLabel::Mle2 => "MLE(2)",
            MethodLabel::BX => "B(X)",
            MethodLabel::BD => "B(D)",
            MethodLabel::BDX => "B(D,X)",
            MethodLabel::BDhat => "B(Dhat)",
            MethodLabel::BDhatM => "B(Dhat_m)",
            MethodLabel::Custom => "custom",
        }
    }

    pub fn is_balancing(&self) -> bool {
        matches!(
            self,
            MethodLabel::BX | MethodLabel::BD | MethodLabel::BDX | MethodLabel::BDhat | MethodLabel::BDhatM | MethodLabel::Custom
        )
    }
}

impl fmt::Display for MethodLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "wald" => MethodLabel::Wald,
            "iv" | "tsls" | "2sls" => MethodLabel::Iv,
            "mle" => MethodLabel::Mle,
            "mle(2)" | "mle2" => MethodLabel::Mle2,
            "b(x)" | "bx" | "balancing" => MethodLabel::BX,
            "b(d)" | "bd" => MethodLabel::BD,
            "b(d,x)" | "bdx" => MethodLabel::BDX,
            "b(dhat)" | "bdhat" => MethodLabel::BDhat,
            "b(dhat_m)" | "bdhatm" | "bdhat_m" => MethodLabel::BDhatM,
            "custom" => MethodLabel::Custom,
            _ => return Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMethod {
    None,
    Asymptotic,
    Bootstrap,
}

/// Convergence and weight diagnostics attached to an estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateDiagnostics {
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub final_gradient_norm: Option<f64>,
    pub max_balance_residual: Option<f64>,
    pub hessian_condition_estimate: Option<f64>,
    pub separation: bool,
    /// Set when the caller forced estimation on a non-converged fit.
    pub forced: bool,
    pub min_score: Option<f64>,
    pub max_score: Option<f64>,
    pub basis: Option<String>,
    pub notes: Vec<String>,
}

impl EstimateDiagnostics {
    pub fn from_fit(fit: &FittedPropensity) -> Self {
        let (lo, hi) = fit.scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        Self {
            converged: Some(fit.converged),
            iterations: Some(fit.iterations),
            final_gradient_norm: Some(fit.final_gradient_norm),
            max_balance_residual: Some(fit.max_balance_residual),
            hessian_condition_estimate: Some(fit.hessian_condition_estimate),
            separation: fit.separation,
            forced: false,
            min_score: Some(lo),
            max_score: Some(hi),
            basis: None,
            notes: fit.notes.clone(),
        }
    }
}

/// A LATE point estimate with its components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateEstimate {
    pub method: MethodLabel,
    pub tau_hat: f64,
    pub se: Option<f64>,
    pub se_method: SeMethod,
    pub delta_hat: f64,
    pub gamma_hat: f64,
    /// `n^-1 sum w_i^2`, present for weighting estimators.
    pub weight_variance_proxy: Option<f64>,
    pub diagnostics: EstimateDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignLabel {
    A,
    B,
    C,
}

impl fmt::Display for DesignLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DesignLabel::A => "A",
            DesignLabel::B => "B",
            DesignLabel::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for DesignLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(DesignLabel::A),
            "B" => Ok(DesignLabel::B),
            "C" => Ok(DesignLabel::C),
            _ => Err(Error::InvalidArgument(format!("unknown design {s:?} (expected A, B or C)"))),
        }
    }
}

/// One method's row in a Monte Carlo cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub method: MethodLabel,
    /// MSE divided by the IV MSE.
    pub relative_mse: f64,
    pub mse: f64,
    pub abs_bias: f64,
    pub failures: usize,
    pub successes: usize,
}

/// Monte Carlo summary for one (design, n, delta) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub design: DesignLabel,
    pub n: usize,
    pub delta: f64,
    pub replications: usize,
    pub rows: Vec<McRow>,
    pub true_late: f64,
    pub seed: u64,
    /// Replicates dropped for every method because IV failed.
    pub dropped_replicates: usize,
}

impl McResult {
    pub fn row(&self, method: MethodLabel) -> Option<&McRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_rows() -> (Vec<f64>, Vec<f64>, Vec<f64>, DMatrix<f64>) {
        let z = vec![1.0, 1.0, 0.0, 0.0];
        (vec![1.0, 1.0, 0.0, 0.0], z.clone(), z, DMatrix::from_column_slice(4, 1, &[0.1, 0.2, 0.3, 0.4]))
    }

    #[test]
    fn accepts_valid_dataset() {
        let (y, d, z, x) = four_rows();
        let ds = Dataset::new(y, d, z, x).unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.z_mean(), 0.5);
    }

    #[test]
    fn rejects_constant_instrument() {
        let (y, d, _, x) = four_rows();
        let err = Dataset::new(y, d, vec![1.0; 4], x).unwrap_err();
        assert!(err.to_string().contains("instrument has no variation"), "{err}");
    }

    #[test]
    fn names_row_of_non_finite_outcome() {
        let (mut y, d, z, x) = four_rows();
        y[3] = f64::NAN;
        match Dataset::new(y, d, z, x).unwrap_err() {
            Error::InvalidRow { row, .. } => assert_eq!(row, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let (y, mut d, z, x) = four_rows();
        d[1] = 0.5;
        match Dataset::new(y, d, z, x).unwrap_err() {
            Error::InvalidRow { row, reason } => {
                assert_eq!(row, 1);
                assert!(reason.contains("d must be 0 or 1"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_short_or_mismatched() {
        let x = DMatrix::zeros(1, 0);
        assert!(Dataset::new(vec![1.0], vec![1.0], vec![1.0], x).is_err());
        let x = DMatrix::zeros(3, 0);
        assert!(Dataset::new(vec![1.0, 2.0], vec![1.0, 0.0], vec![1.0, 0.0], x).is_err());
    }

    #[test]
    fn missing_column_is_reported() {
        let csv = "y,d,x1\n1,1,0.5\n0,0,0.2\n";
        let err = Dataset::from_csv_reader(csv.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "invalid data: required column z not found");
    }

    #[test]
    fn covariates_keep_file_order() {
        let csv = "b,y,z,a,d\n1,2,1,3,1\n4,5,0,6,0\n";
        let ds = Dataset::from_csv_reader(csv.as_bytes()).unwrap();
        assert_eq!(ds.covariate_names, vec!["b", "a"]);
        assert_eq!(ds.x[(1, 1)], 6.0);
        assert_eq!(ds.y, vec![2.0, 5.0]);
    }

    #[test]
    fn weights_identity() {
        let w = ipw_weights(&[1.0, 0.0], &[0.4, 0.4]);
        assert_eq!(w, vec![2.5, 1.0 / 0.6]);
    }

    #[test]
    fn method_labels_parse() {
        for m in MethodLabel::TABLE_ORDER {
            assert_eq!(m.as_str().parse::<MethodLabel>().unwrap(), m);
        }
        assert!("nope".parse::<MethodLabel>().is_err());
    }
}
