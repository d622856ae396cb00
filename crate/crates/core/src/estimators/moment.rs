//! Generic moment matching: choose `omega` so that the `omega`-reweighted
//! source mean of a feature map `h(x)` in `R^(k-1)` equals its target mean.
//!
//! With the last class as reference, `omega_k = (1 - sum_{i<k} p_i omega_i) / p_k`,
//! and the matching condition becomes the `(k-1)`-square linear system
//!
//! ```text
//! (1/n) { H A omega^(-k) + H v } = (1/m) H* 1
//! ```
//!
//! where `H A` only depends on the per-class sums of `h` over the source.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{default_ridge, lu_solve, rcond};
use crate::types::{LabelDist, Weights};

use super::confusion::MIN_RCOND;

/// Sufficient statistics of one moment-matching system.
#[derive(Debug, Clone)]
pub(crate) struct MomentSums {
    /// `class_sums[c]` = sum of `h(x_j)` over source samples with label `c`.
    pub class_sums: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
    pub target_mean: Vec<f64>,
    pub n: usize,
}

impl MomentSums {
    pub fn new(k: usize) -> Self {
        Self {
            class_sums: vec![vec![0.0; k - 1]; k],
            class_counts: vec![0; k],
            target_mean: vec![0.0; k - 1],
            n: 0,
        }
    }

    pub fn add_source(&mut self, label: usize, h: &[f64]) {
        self.class_sums[label].iter_mut().zip(h).for_each(|(s, v)| *s += v);
        self.class_counts[label] += 1;
        self.n += 1;
    }

    pub fn add_target(&mut self, h: &[f64]) {
        self.target_mean.iter_mut().zip(h).for_each(|(s, v)| *s += v);
    }

    pub fn finish_target(&mut self, m: usize) {
        self.target_mean.iter_mut().for_each(|s| *s /= m as f64);
    }

    /// `(H A / n, target_mean - H v / n)`.
    pub fn system(&self, props: &LabelDist) -> (DMatrix<f64>, DVector<f64>) {
        let k = props.k();
        let d = k - 1;
        let p = props.as_slice();
        let n = self.n as f64;
        let last = &self.class_sums[d];
        let lhs = DMatrix::from_fn(d, d, |r, c| (self.class_sums[c][r] - p[c] / p[d] * last[r]) / n);
        let rhs = DVector::from_fn(d, |r, _| self.target_mean[r] - last[r] / (p[d] * n));
        (lhs, rhs)
    }

    /// Solves for `omega^(-k)`. Near-singular systems get one ridge retry
    /// when `ridge` is given; otherwise the reciprocal condition is returned.
    pub fn solve(&self, props: &LabelDist, ridge: Option<f64>) -> std::result::Result<Vec<f64>, f64> {
        let (lhs, rhs) = self.system(props);
        let rc = rcond(&lhs);
        if rc >= MIN_RCOND {
            return lu_solve(&lhs, &rhs).map(|x| x.iter().copied().collect()).ok_or(rc);
        }
        let Some(r) = ridge else { return Err(rc) };
        let r = if r > 0.0 { r } else { default_ridge(&lhs) };
        let shifted = &lhs + DMatrix::identity(lhs.nrows(), lhs.ncols()) * r;
        if rcond(&shifted) < MIN_RCOND {
            return Err(rc);
        }
        lu_solve(&shifted, &rhs).map(|x| x.iter().copied().collect()).ok_or(rc)
    }
}

fn check_rows(rows: &[Vec<f64>], dim: usize) -> Result<()> {
    match rows.iter().find(|r| r.len() != dim) {
        Some(r) => Err(Error::DimensionMismatch { expected: dim, got: r.len() }),
        None => Ok(()),
    }
}

/// One exact moment-matching solve for a fixed map `h` (rows of length
/// `k-1`). The last class is closed through the source proportions.
pub fn moment_match_solve(
    h_source: &[Vec<f64>],
    h_target: &[Vec<f64>],
    labels: &[usize],
    source_props: &LabelDist,
) -> Result<Weights> {
    let k = source_props.k();
    if h_source.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} source rows for {} labels", h_source.len(), labels.len())));
    }
    if h_target.is_empty() || h_source.is_empty() {
        return Err(Error::ShapeMismatch("empty source or target".into()));
    }
    check_rows(h_source, k - 1)?;
    check_rows(h_target, k - 1)?;
    if source_props.get(k - 1) <= 0.0 {
        return Err(Error::ZeroReferenceProp);
    }
    let mut sums = MomentSums::new(k);
    for (h, &y) in h_source.iter().zip(labels) {
        if y >= k {
            return Err(Error::LabelRange { label: y as i64 + 1, k });
        }
        sums.add_source(y, h);
    }
    if let Some(c) = sums.class_counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class: c + 1 });
    }
    for h in h_target {
        sums.add_target(h);
    }
    sums.finish_target(h_target.len());
    let reduced = sums.solve(source_props, None).map_err(|rcond| Error::SingularSystem { rcond })?;
    Weights::complete(&reduced, source_props)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_example() {
        let half = LabelDist::new(vec![0.5, 0.5]).unwrap();
        let w = moment_match_solve(&[vec![1.0], vec![0.0]], &[vec![0.75]], &[0, 1], &half).unwrap();
        assert!((w.omega()[0] - 1.5).abs() < 1e-15);
        assert!((w.omega()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_samples_give_ones() {
        let src = vec![vec![0.2, 0.1], vec![0.5, -0.3], vec![0.9, 0.4], vec![-0.1, 0.7], vec![0.3, 0.3], vec![0.0, -0.6]];
        let labels = [0, 1, 2, 0, 1, 2];
        let props = LabelDist::uniform(3).unwrap();
        let w = moment_match_solve(&src, &src, &labels, &props).unwrap();
        assert!(w.omega().iter().all(|v| (v - 1.0).abs() < 1e-12), "{:?}", w.omega());
    }

    #[test]
    fn errors() {
        let half = LabelDist::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            moment_match_solve(&[vec![1.0], vec![0.0]], &[vec![0.5]], &[0, 0], &half),
            Err(Error::EmptyClass { class: 2 })
        ));
        assert!(matches!(
            moment_match_solve(&[vec![1.0], vec![1.0]], &[vec![0.5]], &[0, 1], &half),
            Err(Error::SingularSystem { .. })
        ));
    }

    #[test]
    fn scaling_h_leaves_the_solution_unchanged() {
        let src = vec![vec![0.3, 0.1], vec![0.5, -0.3], vec![0.9, 0.4], vec![-0.1, 0.7], vec![0.2, 0.2]];
        let tgt = vec![vec![0.4, 0.0], vec![0.1, 0.5]];
        let labels = [0, 1, 2, 0, 2];
        let props = LabelDist::new(vec![0.4, 0.2, 0.4]).unwrap();
        let a = moment_match_solve(&src, &tgt, &labels, &props).unwrap();
        let scale = |rows: &[Vec<f64>]| rows.iter().map(|r| r.iter().map(|v| v * 7.3).collect()).collect::<Vec<Vec<f64>>>();
        let b = moment_match_solve(&scale(&src), &scale(&tgt), &labels, &props).unwrap();
        for (x, y) in a.omega().iter().zip(b.omega()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
