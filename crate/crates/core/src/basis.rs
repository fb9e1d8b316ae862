//! Balancing-function matrices: raw covariates, power series, additive
//! splines, plus standardization, orthonormalization and cross-validation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balancer::{self, tailored_loss_term, SolverOptions};
use crate::error::{Error, Result};
use crate::model::{is_binary, BasisKind, BasisMatrix, BasisSpec};

/// Relative residual norm below which a column counts as dependent.
const RANK_TOLERANCE: f64 = 1e-10;

fn covariate_label(names: &[String], j: usize) -> String {
    names.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1))
}

/// Optional intercept followed by the covariates verbatim.
pub fn raw_basis(x: &DMatrix<f64>, intercept: bool, names: &[String]) -> BasisMatrix {
    let n = x.nrows();
    let mut labels = Vec::with_capacity(x.ncols() + 1);
    let values = if intercept {
        labels.push("1".to_string());
        x.clone().insert_column(0, 1.0)
    } else {
        x.clone()
    };
    labels.extend((0..x.ncols()).map(|j| covariate_label(names, j)));
    debug_assert_eq!(values.nrows(), n);
    BasisMatrix { values, has_intercept: intercept, spec: BasisSpec::raw(intercept), labels }
}

/// Multi-indices of total degree `degree` over `p` variables, descending
/// lexicographic order (so `x1` precedes `x2`).
fn multi_indices(p: usize, degree: usize) -> Vec<Vec<usize>> {
    if p == 0 {
        return if degree == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in (0..=degree).rev() {
        for mut rest in multi_indices(p - 1, degree - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// The first `k` multi-indices ordered by total degree.
pub fn power_series_indices(p: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(k);
    let mut degree = 0;
    while out.len() < k {
        let block = multi_indices(p, degree);
        if block.is_empty() {
            break;
        }
        out.extend(block);
        degree += 1;
    }
    out.truncate(k);
    out
}

fn monomial_label(lambda: &[usize], names: &[String]) -> String {
    let parts: Vec<String> = lambda
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > 0)
        .map(|(j, &e)| if e == 1 { covariate_label(names, j) } else { format!("{}^{e}", covariate_label(names, j)) })
        .collect();
    if parts.is_empty() {
        "1".into()
    } else {
        parts.join("*")
    }
}

/// First `k` power functions `x^lambda(1), ..., x^lambda(k)` with
/// `lambda(1) = 0`.
pub fn power_series_basis(x: &DMatrix<f64>, k: usize, names: &[String]) -> Result<BasisMatrix> {
    let n = x.nrows();
    if k == 0 {
        return Err(Error::InvalidArgument("power series order K must be >= 1".into()));
    }
    if k >= n {
        return Err(Error::InvalidArgument(format!("power series order K = {k} must be below n = {n}")));
    }
    let p = x.ncols();
    let indices = power_series_indices(p, k);
    if indices.len() < k {
        return Err(Error::InvalidArgument(format!("only {} power functions exist for p = 0", indices.len())));
    }
    let mut values = DMatrix::zeros(n, k);
    for (c, lambda) in indices.iter().enumerate() {
        for i in 0..n {
            values[(i, c)] = lambda.iter().enumerate().map(|(j, &e)| x[(i, j)].powi(e as i32)).product();
        }
    }
    let labels = indices.iter().map(|l| monomial_label(l, names)).collect();
    Ok(BasisMatrix { values, has_intercept: true, spec: BasisSpec::power_series(k), labels })
}

/// Modified Gram-Schmidt (two passes) in column order. Returns `Q` with
/// `n^-1 Q'Q = I` or the index of the first dependent column.
fn gram_schmidt(values: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, usize> {
    let (n, r) = values.shape();
    let mut q = DMatrix::zeros(n, r);
    for j in 0..r {
        let mut v: DVector<f64> = values.column(j).into_owned();
        let original = v.norm();
        if !(original > 0.0) {
            return Err(j);
        }
        for _ in 0..2 {
            for k in 0..j {
                let c = q.column(k).dot(&v);
                v.axpy(-c, &q.column(k), 1.0);
            }
        }
        let remaining = v.norm();
        if remaining <= RANK_TOLERANCE * original {
            return Err(j);
        }
        q.set_column(j, &(v / remaining));
    }
    Ok(q * (n as f64).sqrt())
}

/// Errors with the first column (in order) that lies in the span of the
/// preceding ones.
pub fn check_full_rank(values: &DMatrix<f64>, labels: &[String]) -> Result<()> {
    if values.ncols() > values.nrows() {
        return Err(Error::RankDeficient { column: values.nrows(), label: label_at(labels, values.nrows()) });
    }
    gram_schmidt(values).map(|_| ()).map_err(|column| Error::RankDeficient { column, label: label_at(labels, column) })
}

fn label_at(labels: &[String], j: usize) -> String {
    labels.get(j).cloned().unwrap_or_else(|| format!("column {j}"))
}

/// Rotates the basis so that `n^-1 Phi'Phi = I`; the column span, the column
/// order of the nested spans and an intercept in column 0 are preserved.
pub fn orthonormalize(basis: &BasisMatrix) -> Result<BasisMatrix> {
    if basis.r() > basis.n() {
        return Err(Error::RankDeficient { column: basis.n(), label: label_at(&basis.labels, basis.n()) });
    }
    let values = gram_schmidt(&basis.values)
        .map_err(|column| Error::RankDeficient { column, label: label_at(&basis.labels, column) })?;
    let mut spec = basis.spec.clone();
    spec.orthonormalized = true;
    Ok(BasisMatrix { values, has_intercept: basis.has_intercept, spec, labels: basis.labels.clone() })
}

/// Centers and scales every non-intercept column to mean 0 and population
/// variance 1.
pub fn standardize(basis: &BasisMatrix) -> Result<BasisMatrix> {
    let n = basis.n() as f64;
    let mut values = basis.values.clone();
    let start = usize::from(basis.has_intercept);
    for j in start..basis.r() {
        let mut col = values.column_mut(j);
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if !(sd > 0.0) {
            return Err(Error::InvalidData(format!("basis column {} is constant and cannot be standardized", label_at(&basis.labels, j))));
        }
        col.apply(|v| *v = (*v - mean) / sd);
    }
    let mut spec = basis.spec.clone();
    spec.standardized = true;
    Ok(BasisMatrix { values, has_intercept: basis.has_intercept, spec, labels: basis.labels.clone() })
}

/// Empirical quantile of sorted data (linear interpolation between order
/// statistics at `(n - 1) p`).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Interior knots at the `j / (n_knots + 1)` empirical quantiles.
pub fn quantile_knots(column: &[f64], n_knots: usize) -> Vec<f64> {
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..=n_knots).map(|j| quantile(&sorted, j as f64 / (n_knots + 1) as f64)).collect()
}

/// Additive truncated-power spline basis.
///
/// Per continuous covariate: `x, ..., x^degree` and `(x - k)_+^degree` for
/// each knot. Binary covariates enter linearly, plus their pairwise products
/// when `binary_interactions` is set (products that are identically zero are
/// skipped). `knots`, when non-empty, gives the knots per continuous
/// covariate; otherwise they are placed at empirical quantiles.
pub fn spline_basis(
    x: &DMatrix<f64>,
    degree: usize,
    n_knots: usize,
    names: &[String],
    binary_interactions: bool,
    knots: &[Vec<f64>],
) -> Result<BasisMatrix> {
    let n = x.nrows();
    if !(1..=3).contains(&degree) {
        return Err(Error::InvalidArgument(format!("spline degree must be 1, 2 or 3, got {degree}")));
    }
    if n / (n_knots + 1) < 5 {
        return Err(Error::InvalidArgument(format!(
            "{n_knots} knots leave fewer than 5 observations per interval at n = {n}"
        )));
    }
    let binary: Vec<bool> = (0..x.ncols()).map(|j| is_binary(x.column(j).iter())).collect();
    let continuous: Vec<usize> = (0..x.ncols()).filter(|&j| !binary[j]).collect();
    if !knots.is_empty() && knots.len() != continuous.len() {
        return Err(Error::InvalidArgument(format!(
            "{} knot sequences supplied for {} continuous covariates",
            knots.len(),
            continuous.len()
        )));
    }

    let mut columns: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0)];
    let mut labels = vec!["1".to_string()];
    let mut used_knots = Vec::with_capacity(continuous.len());
    for (c, &j) in continuous.iter().enumerate() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if lo == hi {
            return Err(Error::InvalidData(format!("covariate {} is constant", covariate_label(names, j))));
        }
        let ks = if knots.is_empty() { quantile_knots(&col, n_knots) } else { knots[c].clone() };
        for w in ks.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidData(format!(
                    "knots for {} are not strictly increasing (too many ties)",
                    covariate_label(names, j)
                )));
            }
        }
        if ks.iter().any(|&k| !(k > lo && k < hi)) {
            return Err(Error::InvalidData(format!("knots for {} fall outside its support", covariate_label(names, j))));
        }
        let name = covariate_label(names, j);
        for e in 1..=degree {
            columns.push(DVector::from_iterator(n, col.iter().map(|v| v.powi(e as i32))));
            labels.push(if e == 1 { name.clone() } else { format!("{name}^{e}") });
        }
        for &k in &ks {
            columns.push(DVector::from_iterator(n, col.iter().map(|v| (v - k).max(0.0).powi(degree as i32))));
            labels.push(format!("({name}-{k})+^{degree}"));
        }
        used_knots.push(ks);
    }
    let bins: Vec<usize> = (0..x.ncols()).filter(|&j| binary[j]).collect();
    for &j in &bins {
        columns.push(x.column(j).into_owned());
        labels.push(covariate_label(names, j));
    }
    if binary_interactions {
        for (a, &ja) in bins.iter().enumerate() {
            for &jb in &bins[a + 1..] {
                let prod = x.column(ja).component_mul(&x.column(jb));
                if prod.iter().any(|&v| v != 0.0) {
                    columns.push(prod);
                    labels.push(format!("{}*{}", covariate_label(names, ja), covariate_label(names, jb)));
                }
            }
        }
    }
    let values = DMatrix::from_columns(&columns);
    let spec = BasisSpec {
        kind: BasisKind::AdditiveSpline { degree, n_knots, knots: used_knots },
        standardized: false,
        orthonormalized: false,
        binary_interactions,
    };
    Ok(BasisMatrix { values, has_intercept: true, spec, labels })
}

/// Builds the basis described by `spec` from covariates `x`.
///
/// `Custom` selects the named covariates after an intercept. Orthonormalization
/// and standardization are applied last, in that order.
pub fn build_basis(x: &DMatrix<f64>, names: &[String], spec: &BasisSpec) -> Result<BasisMatrix> {
    let mut basis = match &spec.kind {
        BasisKind::Raw { intercept } => raw_basis(x, *intercept, names),
        BasisKind::PowerSeries { k } => power_series_basis(x, *k, names)?,
        BasisKind::AdditiveSpline { degree, n_knots, knots } => {
            spline_basis(x, *degree, *n_knots, names, spec.binary_interactions, knots)?
        }
        BasisKind::Custom { labels } => {
            let mut idx = Vec::with_capacity(labels.len());
            for l in labels {
                let j = names
                    .iter()
                    .position(|nm| nm == l)
                    .ok_or_else(|| Error::InvalidArgument(format!("basis column {l:?} is not a covariate")))?;
                idx.push(j);
            }
            let sub = x.select_columns(idx.iter());
            let mut b = raw_basis(&sub, true, labels);
            b.spec = spec.clone();
            b
        }
    };
    basis.spec.binary_interactions = spec.binary_interactions;
    if spec.orthonormalized {
        basis = orthonormalize(&basis)?;
    }
    if spec.standardized {
        basis = standardize(&basis)?;
    }
    Ok(basis)
}

/// Cross-validation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub seed: u64,
    /// Number of folds; `None` means leave-one-out for `n <= 500` and 10
    /// folds otherwise.
    pub folds: Option<usize>,
    pub solver: SolverOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { seed: 0, folds: None, solver: SolverOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCandidate {
    pub spec: BasisSpec,
    pub tag: String,
    pub r: usize,
    /// Mean held-out tailored loss; `None` stands for minus infinity.
    pub held_out_loss: Option<f64>,
    pub feasible: bool,
    pub failed: bool,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// `"leave-one-out"` or `"k-fold"`.
    pub scheme: String,
    pub folds: usize,
    pub seed: u64,
    pub candidates: Vec<CvCandidate>,
    pub best: usize,
    pub best_spec: BasisSpec,
}

fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    fold_of
}

fn score_candidate(basis: &BasisMatrix, z: &[f64], fold_of: &[usize], folds: usize, solver: &SolverOptions) -> std::result::Result<f64, String> {
    let n = z.len();
    let mut total = 0.0;
    for k in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
        let valid: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
        let zt: Vec<f64> = train.iter().map(|&i| z[i]).collect();
        let fit = balancer::fit(&basis.select_rows(&train), &zt, solver).map_err(|e| format!("fold {k}: {e}"))?;
        if !fit.converged {
            return Err(format!("fold {k}: fit did not converge ({})", fit.notes.join("; ")));
        }
        for &i in &valid {
            let eta = basis.values.row(i).transpose().dot(&fit.theta);
            total += tailored_loss_term(z[i], eta);
        }
    }
    Ok(total / n as f64)
}

/// Scores each candidate basis by its held-out mean tailored loss and picks
/// the largest; ties go to the earlier candidate.
///
/// Candidates whose basis cannot be built, that have at least as many
/// columns as a training fold has rows, or whose fit fails on any fold, are
/// scored minus infinity and flagged.
pub fn cross_validate(
    x: &DMatrix<f64>,
    names: &[String],
    z: &[f64],
    candidates: &[BasisSpec],
    options: &CvOptions,
) -> Result<CvReport> {
    if candidates.len() < 2 {
        return Err(Error::InvalidArgument("cross-validation needs at least 2 candidates".into()));
    }
    let n = z.len();
    let (scheme, folds) = match options.folds {
        Some(k) if k >= 2 && k <= n => (if k == n { "leave-one-out" } else { "k-fold" }, k),
        Some(k) => return Err(Error::InvalidArgument(format!("need 2 <= folds <= n, got {k}"))),
        None if n <= 500 => ("leave-one-out", n),
        None => ("k-fold", 10),
    };
    let fold_of = fold_assignment(n, folds, options.seed);
    let min_train = (0..folds).map(|k| fold_of.iter().filter(|&&f| f != k).count()).min().unwrap_or(0);

    let scored: Vec<CvCandidate> = candidates
        .par_iter()
        .map(|spec| {
            let basis = match build_basis(x, names, spec) {
                Ok(b) => b,
                Err(e) => {
                    return CvCandidate {
                        spec: spec.clone(),
                        tag: spec.tag(),
                        r: 0,
                        held_out_loss: None,
                        feasible: false,
                        failed: false,
                        message: Some(e.to_string()),
                    }
                }
            };
            let r = basis.r();
            let mut cand = CvCandidate {
                spec: basis.spec.clone(),
                tag: spec.tag(),
                r,
                held_out_loss: None,
                feasible: r < min_train,
                failed: false,
                message: None,
            };
            if !cand.feasible {
                cand.message = Some(format!("r = {r} is not below the training-fold size {min_train}"));
                return cand;
            }
            match score_candidate(&basis, z, &fold_of, folds, &options.solver) {
                Ok(s) => cand.held_out_loss = Some(s),
                Err(msg) => {
                    cand.failed = true;
                    cand.message = Some(msg);
                }
            }
            cand
        })
        .collect();

    let mut best: Option<usize> = None;
    for (i, c) in scored.iter().enumerate() {
        if let Some(s) = c.held_out_loss {
            if best.is_none_or(|b| s > scored[b].held_out_loss.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(i);
            }
        }
    }
    let best = best.ok_or_else(|| Error::FitFailed("every cross-validation candidate is infeasible or failed".into()))?;
    Ok(CvReport {
        scheme: scheme.to_string(),
        folds,
        seed: options.seed,
        best_spec: candidates[best].clone(),
        candidates: scored,
        best,
    })
}
