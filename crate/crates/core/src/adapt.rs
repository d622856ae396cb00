//! Posterior correction with estimated weights, and the two scoring metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{argmax, ProbMatrix, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub raw_accuracy: f64,
    pub adapted_accuracy: f64,
    pub delta_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weight_mse: Option<f64>,
}

fn adjust_with(row: &[f64], omega: &[f64]) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = row.iter().zip(omega).map(|(p, w)| p * w).collect();
    let total: f64 = out.iter().sum();
    if !(total >= 1e-300) {
        return Err(Error::ZeroMass);
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// `p'_i ∝ omega_i p_i` using the clipped nonnegative weights.
pub fn bayes_adjust(row: &[f64], omega: &Weights) -> Result<Vec<f64>> {
    if row.len() != omega.k() {
        return Err(Error::DimensionMismatch { expected: omega.k(), got: row.len() });
    }
    adjust_with(row, &omega.clipped_view())
}

/// Adjusted argmax decision per row.
pub fn adapt_and_predict(probs: &ProbMatrix, omega: &Weights) -> Result<Vec<usize>> {
    if probs.classes() != omega.k() {
        return Err(Error::DimensionMismatch { expected: omega.k(), got: probs.classes() });
    }
    let w = omega.clipped_view();
    (0..probs.rows())
        .into_par_iter()
        .map(|i| adjust_with(probs.row(i), &w).map(|r| argmax(&r)))
        .collect()
}

/// Mean over classes of the squared error, on unclipped estimates.
pub fn weight_mse(estimate: &Weights, truth: &Weights) -> Result<f64> {
    if estimate.k() != truth.k() {
        return Err(Error::DimensionMismatch { expected: truth.k(), got: estimate.k() });
    }
    let sse: f64 = estimate.omega().iter().zip(truth.omega()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / estimate.k() as f64)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: preds.len() });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn delta_accuracy(raw: &[usize], adapted: &[usize], labels: &[usize]) -> Result<f64> {
    if raw.len() != adapted.len() {
        return Err(Error::DimensionMismatch { expected: raw.len(), got: adapted.len() });
    }
    Ok(accuracy(adapted, labels)? - accuracy(raw, labels)?)
}

/// Scores raw and adjusted predictions on labeled target rows.
pub fn evaluate(
    probs: &ProbMatrix,
    labels: &[usize],
    estimate: &Weights,
    truth: Option<&Weights>,
) -> Result<AdaptationReport> {
    let raw = probs.argmax();
    let adapted = adapt_and_predict(probs, estimate)?;
    let raw_accuracy = accuracy(&raw, labels)?;
    let adapted_accuracy = accuracy(&adapted, labels)?;
    Ok(AdaptationReport {
        raw_accuracy,
        adapted_accuracy,
        delta_accuracy: adapted_accuracy - raw_accuracy,
        weight_mse: truth.map(|t| weight_mse(estimate, t)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{posterior_matrix, sample_dirichlet_dist, sample_features, MixtureSpec};
    use crate::types::LabelDist;
    use proptest::prelude::*;

    fn w(omega: &[f64]) -> Weights {
        let k = omega.len();
        Weights::from_ratios(omega.to_vec(), LabelDist::uniform(k).unwrap())
    }

    #[test]
    fn adjust_examples() {
        let a = bayes_adjust(&[0.5, 0.5], &w(&[2.0, 0.5])).unwrap();
        assert!((a[0] - 0.8).abs() < 1e-15 && (a[1] - 0.2).abs() < 1e-15);
        assert_eq!(bayes_adjust(&[1.0, 0.0], &w(&[0.3, 5.0])).unwrap(), vec![1.0, 0.0]);
        assert_eq!(bayes_adjust(&[1.0, 0.0], &w(&[0.0, 1.0])), Err(Error::ZeroMass));
    }

    #[test]
    fn negative_weights_are_clipped_for_adjustment() {
        let a = bayes_adjust(&[0.5, 0.5], &w(&[-1.0, 1.0])).unwrap();
        assert_eq!(a, vec![0.0, 1.0]);
    }

    #[test]
    fn predict_examples() {
        let probs = ProbMatrix::new(vec![vec![0.45, 0.55], vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        assert_eq!(adapt_and_predict(&probs, &w(&[1.0, 1.0])).unwrap(), probs.argmax());
        assert_eq!(adapt_and_predict(&probs, &w(&[2.0, 0.5])).unwrap(), vec![0, 0, 0]);
        assert_eq!(adapt_and_predict(&probs, &w(&[0.0, 1.0])).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(weight_mse(&w(&[1.0, 1.0]), &w(&[1.0, 1.0])).unwrap(), 0.0);
        assert!((weight_mse(&w(&[1.1, 0.9]), &w(&[1.0, 1.0])).unwrap() - 0.01).abs() < 1e-15);
        let mut off = vec![1.0; 10];
        off[3] = 1.3;
        assert!((weight_mse(&w(&off), &w(&[1.0; 10])).unwrap() - 0.009).abs() < 1e-15);
        assert!(weight_mse(&w(&[1.0, 1.0]), &w(&[1.0; 3])).is_err());

        let labels = vec![0usize; 100];
        let hits = |c: usize| (0..100).map(|i| if i < c { 0 } else { 1 }).collect::<Vec<usize>>();
        assert_eq!(delta_accuracy(&hits(60), &hits(60), &labels).unwrap(), 0.0);
        assert!((delta_accuracy(&hits(60), &hits(66), &labels).unwrap() - 0.06).abs() < 1e-12);
        assert!((delta_accuracy(&hits(70), &hits(65), &labels).unwrap() + 0.05).abs() < 1e-12);
        assert!(delta_accuracy(&hits(70), &hits(65)[..50], &labels).is_err());
    }

    fn simplex_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn identity_simplex_and_inverse(row in simplex_row(4), om in prop::collection::vec(0.05f64..5.0, 4)) {
            let same = bayes_adjust(&row, &w(&[1.0; 4])).unwrap();
            for (a, b) in same.iter().zip(&row) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let adj = bayes_adjust(&row, &w(&om)).unwrap();
            prop_assert!((adj.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(adj.iter().all(|v| *v >= 0.0));
            let inv: Vec<f64> = om.iter().map(|v| 1.0 / v).collect();
            let back = bayes_adjust(&adj, &w(&inv)).unwrap();
            for (a, b) in back.iter().zip(&row) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn true_weights_help_on_average() {
        let prior = LabelDist::uniform(4).unwrap();
        let spec = MixtureSpec::simplex(4, 1.5, 1.0, prior.clone()).unwrap();
        let mut gain = 0.0;
        for rep in 0..20u64 {
            let target = sample_dirichlet_dist(4, 0.5, rep).unwrap();
            let (x, y) = sample_features(&spec, &target, 2000, 1000 + rep).unwrap();
            let probs = posterior_matrix(&spec, &prior, &x).unwrap();
            let truth = Weights::from_distributions(&target, &prior).unwrap();
            let r = evaluate(&probs, &y, &truth, Some(&truth)).unwrap();
            assert_eq!(r.weight_mse, Some(0.0));
            assert_eq!(r.delta_accuracy, r.adapted_accuracy - r.raw_accuracy);
            gain += r.delta_accuracy;
        }
        assert!(gain > 0.0, "{gain}");
    }
}
