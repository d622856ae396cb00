//! Confusion-matrix estimators: BBSE (hard and soft) and RLLS.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{default_ridge, lu_solve, rcond};
use crate::types::{argmax, LabelDist, ProbMatrix, Weights};

/// Below this reciprocal condition number a matrix counts as singular.
pub const MIN_RCOND: f64 = 1e-12;

/// Whether predictions enter as argmax counts or as posterior mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    Hard,
    Soft,
}

/// Joint table of predicted mass (rows) against true labels (columns),
/// normalized by the sample size. Column `j` sums to the proportion of
/// class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    values: DMatrix<f64>,
}

impl ConfusionMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if k < 2 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch("confusion matrix must be square with k >= 2".into()));
        }
        Ok(Self { values: DMatrix::from_fn(k, k, |i, j| rows[i][j]) })
    }

    pub fn k(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, predicted: usize, truth: usize) -> f64 {
        self.values[(predicted, truth)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Column sums, i.e. the source class proportions.
    pub fn column_sums(&self) -> Vec<f64> {
        self.values.column_iter().map(|c| c.sum()).collect()
    }

    fn source_props(&self) -> Result<LabelDist> {
        LabelDist::from_masses(&self.column_sums())
    }
}

pub fn confusion_matrix(probs: &ProbMatrix, labels: &[usize], mode: PredictionMode) -> Result<ConfusionMatrix> {
    let k = probs.classes();
    if labels.len() != probs.rows() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} rows", labels.len(), probs.rows())));
    }
    let mut seen = vec![false; k];
    let mut values = DMatrix::zeros(k, k);
    for (row, &y) in probs.iter_rows().zip(labels) {
        if y >= k {
            return Err(Error::LabelRange { label: y as i64 + 1, k });
        }
        seen[y] = true;
        match mode {
            PredictionMode::Hard => values[(argmax(row), y)] += 1.0,
            PredictionMode::Soft => {
                for (i, p) in row.iter().enumerate() {
                    values[(i, y)] += p;
                }
            }
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::EmptyClass { class: c + 1 });
    }
    values /= probs.rows() as f64;
    Ok(ConfusionMatrix { values })
}

/// Mean target prediction: argmax frequencies (hard) or column means (soft).
pub fn target_mean(probs: &ProbMatrix, mode: PredictionMode) -> Vec<f64> {
    let k = probs.classes();
    let mut mu = vec![0.0; k];
    for row in probs.iter_rows() {
        match mode {
            PredictionMode::Hard => mu[argmax(row)] += 1.0,
            PredictionMode::Soft => mu.iter_mut().zip(row).for_each(|(m, p)| *m += p),
        }
    }
    let m = probs.rows() as f64;
    mu.iter_mut().for_each(|v| *v /= m);
    mu
}

fn check_dims(c: &ConfusionMatrix, mu: &[f64]) -> Result<()> {
    if mu.len() != c.k() {
        return Err(Error::DimensionMismatch { expected: c.k(), got: mu.len() });
    }
    Ok(())
}

/// BBSE: `omega = C^-1 mu`. A near-singular `C` gets one retry on
/// `C + ridge I` (ridge at least `1e-10 tr(C)/k`); the retry is accepted
/// only if it still solves the original system to a relative residual of
/// 1e-6. Negative entries are kept and flagged.
pub fn solve_bbse(c: &ConfusionMatrix, mu: &[f64], ridge: f64) -> Result<Weights> {
    check_dims(c, mu)?;
    let m = c.matrix();
    let b = DVector::from_column_slice(mu);
    let rc = rcond(m);
    let omega = if rc >= MIN_RCOND {
        lu_solve(m, &b).ok_or(Error::SingularMatrix { rcond: rc })?
    } else {
        let r = ridge.max(default_ridge(m));
        let shifted = m + DMatrix::identity(c.k(), c.k()) * r;
        if rcond(&shifted) < MIN_RCOND {
            return Err(Error::SingularMatrix { rcond: rc });
        }
        let x = lu_solve(&shifted, &b).ok_or(Error::SingularMatrix { rcond: rc })?;
        let resid = (m * &x - &b).norm() / b.norm().max(f64::MIN_POSITIVE);
        if resid > 1e-6 {
            return Err(Error::SingularMatrix { rcond: rc });
        }
        x
    };
    Ok(Weights::from_ratios(omega.iter().copied().collect(), c.source_props()?))
}

/// RLLS: `omega = 1 + theta`, `theta = argmin |C theta - (mu - C 1)|^2 +
/// lambda |theta|^2`, via the normal equations.
pub fn solve_rlls(c: &ConfusionMatrix, mu: &[f64], lambda: f64) -> Result<Weights> {
    check_dims(c, mu)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("RLLS lambda must be nonnegative, got {lambda}")));
    }
    let m = c.matrix();
    let k = c.k();
    if lambda == 0.0 {
        let rc = rcond(m);
        if rc < MIN_RCOND {
            return Err(Error::SingularMatrix { rcond: rc });
        }
    }
    let ones = DVector::from_element(k, 1.0);
    let resid = DVector::from_column_slice(mu) - m * &ones;
    let normal = m.transpose() * m + DMatrix::identity(k, k) * lambda;
    let rhs = m.transpose() * resid;
    let theta = lu_solve(&normal, &rhs).ok_or(Error::SingularMatrix { rcond: rcond(&normal) })?;
    Ok(Weights::from_ratios((theta + ones).iter().copied().collect(), c.source_props()?))
}

/// RLLS regularization default `0.05 / sqrt(n)`.
pub fn default_rlls_lambda(n: usize) -> f64 {
    0.05 / (n.max(1) as f64).sqrt()
}
