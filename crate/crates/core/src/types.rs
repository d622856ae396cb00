//! Domain types shared by every stage: label distributions, importance
//! weights, posterior/logit tables and the source/target data model.
//!
//! Labels are stored 0-based. Every external surface (CSV, JSON, CLI)
//! speaks 1-based labels and converts at the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance applied to externally supplied probability rows.
pub const INGEST_TOL: f64 = 1e-6;
/// Tolerance applied to rows produced inside the library.
pub const INTERNAL_TOL: f64 = 1e-12;

const DIST_TOL: f64 = 1e-12;
const CONSTRAINT_TOL: f64 = 1e-10;

/// A probability vector over `k >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDist {
    probs: Vec<f64>,
}

impl LabelDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {p} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DIST_TOL {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative masses into a distribution.
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) || masses.iter().any(|m| *m < 0.0 || !m.is_finite()) {
            return Err(Error::InvalidDistribution("masses must be nonnegative with positive total".into()));
        }
        Self::new(masses.iter().map(|m| m / total).collect())
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::from_masses(&vec![1.0; k])
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }
}

impl TryFrom<Vec<f64>> for LabelDist {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelDist> for Vec<f64> {
    fn from(d: LabelDist) -> Self {
        d.probs
    }
}

/// Importance weights `omega_i = p_t(y=i) / p_s(y=i)` together with the
/// source proportions used to close the reference (last) class.
///
/// Values are kept exactly as estimated; `clipped` records whether any
/// entry is negative and will be clipped to 0 by [`Weights::clipped_view`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    omega: Vec<f64>,
    source_props: LabelDist,
    clipped: bool,
}

impl Weights {
    /// Builds the full vector from the first `k-1` entries, closing the last
    /// one so that `sum_i p_i omega_i = 1` holds exactly.
    pub fn complete(omega_minus_k: &[f64], source_props: &LabelDist) -> Result<Self> {
        let k = source_props.k();
        if omega_minus_k.len() + 1 != k {
            return Err(Error::DimensionMismatch { expected: k - 1, got: omega_minus_k.len() });
        }
        let p = source_props.as_slice();
        if p[k - 1] <= 0.0 {
            return Err(Error::ZeroReferenceProp);
        }
        let partial: f64 = omega_minus_k.iter().zip(p).map(|(w, p)| w * p).sum();
        let mut omega = omega_minus_k.to_vec();
        omega.push((1.0 - partial) / p[k - 1]);
        Ok(Self::from_ratios(omega, source_props.clone()))
    }

    /// Wraps a full weight vector as estimated. The closing identity is not
    /// enforced; see [`Weights::constraint_residual`].
    pub fn from_ratios(omega: Vec<f64>, source_props: LabelDist) -> Self {
        let clipped = omega.iter().any(|w| *w < 0.0);
        Self { omega, source_props, clipped }
    }

    /// Exact weights `target / source` for two known distributions.
    pub fn from_distributions(target: &LabelDist, source: &LabelDist) -> Result<Self> {
        if target.k() != source.k() {
            return Err(Error::DimensionMismatch { expected: source.k(), got: target.k() });
        }
        let mut omega = Vec::with_capacity(source.k());
        for (i, (t, s)) in target.as_slice().iter().zip(source.as_slice()).enumerate() {
            if *s <= 0.0 {
                return Err(Error::ZeroSourceProp { class: i + 1 });
            }
            omega.push(t / s);
        }
        Ok(Self::from_ratios(omega, source.clone()))
    }

    pub fn ones(source_props: &LabelDist) -> Self {
        Self::from_ratios(vec![1.0; source_props.k()], source_props.clone())
    }

    pub fn k(&self) -> usize {
        self.omega.len()
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn omega_minus_k(&self) -> &[f64] {
        &self.omega[..self.omega.len() - 1]
    }

    pub fn source_props(&self) -> &LabelDist {
        &self.source_props
    }

    pub fn clipped(&self) -> bool {
        self.clipped
    }

    /// Nonnegative view used for Bayes adjustment.
    pub fn clipped_view(&self) -> Vec<f64> {
        self.omega.iter().map(|w| w.max(0.0)).collect()
    }

    /// `sum_i p_i omega_i - 1`.
    pub fn constraint_residual(&self) -> f64 {
        self.omega.iter().zip(self.source_props.as_slice()).map(|(w, p)| w * p).sum::<f64>() - 1.0
    }

    pub fn satisfies_constraint(&self) -> bool {
        self.constraint_residual().abs() <= CONSTRAINT_TOL
    }
}

/// Row-major `n x k` table of class posteriors, one simplex row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    rows: usize,
    classes: usize,
    values: Vec<f64>,
}

impl ProbMatrix {
    /// Validates with the ingestion tolerance.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        validate_prob_matrix(rows, INGEST_TOL)
    }

    /// Trusted constructor for rows produced by the library itself.
    pub(crate) fn from_flat_unchecked(rows: usize, classes: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * classes);
        Self { rows, classes, values }
    }

    pub fn from_flat(rows: usize, classes: usize, values: Vec<f64>, tol: f64) -> Result<Self> {
        if values.len() != rows * classes {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{classes} table",
                values.len()
            )));
        }
        validate_prob_matrix(values.chunks(classes.max(1)).map(|r| r.to_vec()).collect(), tol)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.classes)
    }

    /// Keeps the listed rows, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.classes);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self::from_flat_unchecked(indices.len(), self.classes, values)
    }

    /// Per-row argmax, ties to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }
}

/// Row-major `n x k` table of unnormalized scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    rows: usize,
    classes: usize,
    values: Vec<f64>,
}

impl LogitMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let (n, k) = table_shape(&rows)?;
        let mut values = Vec::with_capacity(n * k);
        for (i, r) in rows.iter().enumerate() {
            if let Some(j) = r.iter().position(|z| !z.is_finite()) {
                return Err(Error::ShapeMismatch(format!("non-finite logit at row {i}, column {j}")));
            }
            values.extend_from_slice(r);
        }
        Ok(Self { rows: n, classes: k, values })
    }

    pub fn from_flat(rows: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * classes || rows == 0 || classes < 2 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{classes} table",
                values.len()
            )));
        }
        if values.iter().any(|z| !z.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite logit".into()));
        }
        Ok(Self { rows, classes, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.classes)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.classes);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), classes: self.classes, values }
    }
}

/// Classifier output for a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Probs(ProbMatrix),
    Logits(LogitMatrix),
}

impl Predictions {
    pub fn rows(&self) -> usize {
        match self {
            Predictions::Probs(p) => p.rows(),
            Predictions::Logits(z) => z.rows(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Predictions::Probs(p) => p.classes(),
            Predictions::Logits(z) => z.classes(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            Predictions::Probs(p) => Predictions::Probs(p.select(indices)),
            Predictions::Logits(z) => Predictions::Logits(z.select(indices)),
        }
    }

    /// Logits view; probability tables map through `ln`, floored at 1e-300.
    pub fn to_logits(&self) -> LogitMatrix {
        match self {
            Predictions::Logits(z) => z.clone(),
            Predictions::Probs(p) => LogitMatrix {
                rows: p.rows,
                classes: p.classes,
                values: p.values.iter().map(|v| v.max(1e-300).ln()).collect(),
            },
        }
    }
}

/// Labeled source sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    pub predictions: Predictions,
    labels: Vec<usize>,
}

impl SourceSet {
    /// `labels` are 0-based.
    pub fn new(predictions: Predictions, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != predictions.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                predictions.rows()
            )));
        }
        let k = predictions.classes();
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelRange { label: l as i64 + 1, k });
        }
        Ok(Self { predictions, labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.predictions.classes()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            predictions: self.predictions.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Unlabeled target sample. Hidden labels, when known, are used only for
/// evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub predictions: Predictions,
    hidden_labels: Option<Vec<usize>>,
}

impl TargetSet {
    pub fn new(predictions: Predictions, hidden_labels: Option<Vec<usize>>) -> Result<Self> {
        if predictions.rows() == 0 {
            return Err(Error::ShapeMismatch("target set is empty".into()));
        }
        if let Some(labels) = &hidden_labels {
            if labels.len() != predictions.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "{} hidden labels for {} rows",
                    labels.len(),
                    predictions.rows()
                )));
            }
            let k = predictions.classes();
            if let Some(&l) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::LabelRange { label: l as i64 + 1, k });
            }
        }
        Ok(Self { predictions, hidden_labels })
    }

    pub fn hidden_labels(&self) -> Option<&[usize]> {
        self.hidden_labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.predictions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn table_shape(rows: &[Vec<f64>]) -> Result<(usize, usize)> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::ShapeMismatch("table has no rows".into()));
    }
    let k = rows[0].len();
    if k < 2 {
        return Err(Error::ShapeMismatch(format!("need at least 2 classes, got {k}")));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != k) {
        return Err(Error::ShapeMismatch(format!("row {i} has {} columns, expected {k}", rows[i].len())));
    }
    Ok((n, k))
}

/// Validates rows onto the simplex. Rows whose sum is within `tol` of one are
/// renormalized; entries in `(-tol, 0)` are treated as rounding noise and
/// set to zero.
pub fn validate_prob_matrix(rows: Vec<Vec<f64>>, tol: f64) -> Result<ProbMatrix> {
    let (n, k) = table_shape(&rows)?;
    let mut values = Vec::with_capacity(n * k);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() || *v < -tol {
                return Err(Error::NegativeEntry { row: i, col: j, value: *v });
            }
        }
        let clean: Vec<f64> = row.iter().map(|v| v.max(0.0)).collect();
        let sum: f64 = clean.iter().sum();
        if (sum - 1.0).abs() >= tol {
            return Err(Error::RowSumViolation { row: i, sum, tol });
        }
        values.extend(clean.iter().map(|v| v / sum));
    }
    Ok(ProbMatrix::from_flat_unchecked(n, k, values))
}

/// Empirical class proportions of 0-based labels.
pub fn class_proportions(labels: &[usize], k: usize) -> Result<LabelDist> {
    if labels.is_empty() {
        return Err(Error::ShapeMismatch("no labels".into()));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::LabelRange { label: l as i64 + 1, k });
        }
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    let mut probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    // Absorb rounding so the sum is 1 to machine precision.
    let drift: f64 = 1.0 - probs.iter().sum::<f64>();
    if let Some(j) = counts.iter().enumerate().max_by_key(|(_, c)| **c).map(|(j, _)| j) {
        probs[j] += drift;
    }
    LabelDist::new(probs)
}

/// Index of the largest entry, ties broken toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
