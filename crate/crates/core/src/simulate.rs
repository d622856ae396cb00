//! Synthetic ground truth: axis-aligned Gaussian class conditionals with
//! exact posteriors, plus the Dirichlet and tweak-one label shifts.
//!
//! Because the class conditionals are known, the true importance weights of
//! any shifted target are known exactly, which makes every estimator
//! testable against a planted answer.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal, Uniform, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::types::{LabelDist, LogitMatrix, Predictions, ProbMatrix, TargetSet};

/// Per-class axis-aligned Gaussians sharing `p(x|y)` across domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub source_prior: LabelDist,
}

impl MixtureSpec {
    pub fn new(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>, source_prior: LabelDist) -> Result<Self> {
        let spec = Self { means, variances, source_prior };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k < 2 || self.variances.len() != k || self.source_prior.k() != k {
            return Err(Error::ShapeMismatch(format!(
                "mixture has {k} means, {} variance rows, prior of length {}",
                self.variances.len(),
                self.source_prior.k()
            )));
        }
        let dim = self.means[0].len();
        if dim == 0 {
            return Err(Error::ShapeMismatch("feature dimension is zero".into()));
        }
        for (m, v) in self.means.iter().zip(&self.variances) {
            if m.len() != dim || v.len() != dim {
                return Err(Error::ShapeMismatch("ragged mean/variance rows".into()));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("non-finite mean".into()));
            }
            if v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidParameter("variances must be positive".into()));
            }
        }
        Ok(())
    }

    /// Class `i` centred at `separation * e_i` in `R^k`, isotropic variance.
    pub fn simplex(k: usize, separation: f64, variance: f64, source_prior: LabelDist) -> Result<Self> {
        let means = (0..k)
            .map(|i| (0..k).map(|d| if d == i { separation } else { 0.0 }).collect())
            .collect();
        Self::new(means, vec![vec![variance; k]; k], source_prior)
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Copy with every mean coordinate moved by `±eps` in a fixed
    /// checkerboard pattern (`+` when class + coordinate index is even).
    /// Posteriors computed under the copy emulate an imperfect classifier.
    pub fn perturbed(&self, eps: f64) -> Self {
        let means = self
            .means
            .iter()
            .enumerate()
            .map(|(i, m)| {
                m.iter()
                    .enumerate()
                    .map(|(d, x)| if (i + d) % 2 == 0 { x + eps } else { x - eps })
                    .collect()
            })
            .collect();
        Self { means, variances: self.variances.clone(), source_prior: self.source_prior.clone() }
    }

    fn log_density(&self, class: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xd, m), v) in x.iter().zip(&self.means[class]).zip(&self.variances[class]) {
            let d = xd - m;
            acc -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v);
        }
        acc
    }
}

/// How the target label distribution is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMechanism {
    Dirichlet { alpha: f64 },
    /// `tweak_index` is 1-based.
    TweakOne { rho: f64, #[serde(default = "default_tweak_index")] tweak_index: usize },
}

fn default_tweak_index() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub mechanism: ShiftMechanism,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mechanism {
            ShiftMechanism::Dirichlet { alpha } if !(alpha > 0.0) || !alpha.is_finite() => Err(Error::InvalidAlpha(alpha)),
            ShiftMechanism::TweakOne { rho, .. } if !(0.0..=1.0).contains(&rho) => {
                Err(Error::InvalidParameter(format!("rho = {rho} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Draws the target distribution using `self.seed`.
    pub fn draw(&self, k: usize) -> Result<LabelDist> {
        match self.mechanism {
            ShiftMechanism::Dirichlet { alpha } => sample_dirichlet_dist(k, alpha, self.seed),
            ShiftMechanism::TweakOne { rho, tweak_index } => tweak_one_dist(k, rho, tweak_index),
        }
    }
}

/// One draw from a symmetric Dirichlet(alpha) via normalized Gamma(alpha, 1)
/// variates.
pub fn sample_dirichlet_dist(k: usize, alpha: f64, seed: u64) -> Result<LabelDist> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidAlpha(alpha));
    }
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k = {k} < 2")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        // All k variates can underflow to zero for tiny alpha; redraw.
        if total > 0.0 && total.is_finite() {
            return LabelDist::from_masses(&draws);
        }
    }
}

/// `rho` on the (1-based) tweak class, `(1 - rho)/(k - 1)` elsewhere.
pub fn tweak_one_dist(k: usize, rho: f64, tweak_index: usize) -> Result<LabelDist> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k = {k} < 2")));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!("rho = {rho} outside [0, 1]")));
    }
    if tweak_index == 0 || tweak_index > k {
        return Err(Error::IndexOutOfRange { index: tweak_index, k });
    }
    let rest = (1.0 - rho) / (k - 1) as f64;
    let probs: Vec<f64> = (1..=k).map(|i| if i == tweak_index { rho } else { rest }).collect();
    LabelDist::from_masses(&probs)
}

/// Log posterior `log p(y=i|x)` under `prior`, normalized in log space.
pub fn exact_log_posterior(spec: &MixtureSpec, prior: &LabelDist, x: &[f64]) -> Result<Vec<f64>> {
    if prior.k() != spec.k() {
        return Err(Error::DimensionMismatch { expected: spec.k(), got: prior.k() });
    }
    if x.len() != spec.dim() {
        return Err(Error::DimensionMismatch { expected: spec.dim(), got: x.len() });
    }
    let joint: Vec<f64> = (0..spec.k())
        .map(|i| {
            let p = prior.get(i);
            if p > 0.0 {
                p.ln() + spec.log_density(i, x)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NumericalUnderflow);
    }
    let lse = max + joint.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(joint.iter().map(|l| l - lse).collect())
}

pub fn exact_posterior(spec: &MixtureSpec, prior: &LabelDist, x: &[f64]) -> Result<Vec<f64>> {
    let logp = exact_log_posterior(spec, prior, x)?;
    let mut row: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
    Ok(row)
}

/// Posterior table for a batch of feature vectors.
pub fn posterior_matrix(spec: &MixtureSpec, prior: &LabelDist, features: &[Vec<f64>]) -> Result<ProbMatrix> {
    let k = spec.k();
    let mut values = Vec::with_capacity(features.len() * k);
    for x in features {
        values.extend(exact_posterior(spec, prior, x)?);
    }
    Ok(ProbMatrix::from_flat_unchecked(features.len(), k, values))
}

/// `temperature * log p(y|x)`: logits whose softmax at temperature 1 is the
/// exact posterior sharpened (`temperature > 1`) or flattened.
pub fn posterior_logits(
    spec: &MixtureSpec,
    prior: &LabelDist,
    features: &[Vec<f64>],
    temperature: f64,
) -> Result<LogitMatrix> {
    let k = spec.k();
    let mut values = Vec::with_capacity(features.len() * k);
    for x in features {
        // Floor keeps zero-prior classes finite.
        values.extend(exact_log_posterior(spec, prior, x)?.into_iter().map(|l| temperature * l.max(-1e4)));
    }
    LogitMatrix::from_flat(features.len(), k, values)
}

/// Features and 0-based labels drawn i.i.d. from `label_dist` and the
/// class Gaussians.
pub fn sample_features(
    spec: &MixtureSpec,
    label_dist: &LabelDist,
    n: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    spec.validate()?;
    if label_dist.k() != spec.k() {
        return Err(Error::DimensionMismatch { expected: spec.k(), got: label_dist.k() });
    }
    let mut rng = rng_from_seed(seed);
    let picker = WeightedIndex::new(label_dist.as_slice()).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = picker.sample(&mut rng);
        let x = spec.means[y]
            .iter()
            .zip(&spec.variances[y])
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + v.sqrt() * z
            })
            .collect();
        features.push(x);
        labels.push(y);
    }
    Ok((features, labels))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerateOptions {
    /// Mean perturbation of the spec used for posteriors; 0 gives exact ones.
    pub misspecification: f64,
}

#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub posteriors: ProbMatrix,
}

/// Draws `n` samples and their posteriors under the same `label_dist`.
pub fn generate_mixture(
    spec: &MixtureSpec,
    label_dist: &LabelDist,
    n: usize,
    seed: u64,
    options: &GenerateOptions,
) -> Result<MixtureSample> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be positive".into()));
    }
    let (features, labels) = sample_features(spec, label_dist, n, seed)?;
    let posteriors = if options.misspecification == 0.0 {
        posterior_matrix(spec, label_dist, &features)?
    } else {
        posterior_matrix(&spec.perturbed(options.misspecification), label_dist, &features)?
    };
    Ok(MixtureSample { features, labels, posteriors })
}

/// Pool indices for a with-replacement target: labels drawn from
/// `target_dist`, then a uniform member of that class's pool.
pub fn resample_indices(pool_labels: &[usize], target_dist: &LabelDist, m: usize, seed: u64) -> Result<Vec<usize>> {
    let k = target_dist.k();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in pool_labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelRange { label: y as i64 + 1, k });
        }
        by_class[y].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() && target_dist.get(c) > 0.0 {
            return Err(Error::UnsupportedClass { class: c + 1 });
        }
    }
    let picker = WeightedIndex::new(target_dist.as_slice()).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    let mut rng: Rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let y = picker.sample(&mut rng);
        let members = &by_class[y];
        let j = Uniform::new(0, members.len()).map_err(|e| Error::InvalidParameter(e.to_string()))?.sample(&mut rng);
        out.push(members[j]);
    }
    Ok(out)
}

/// Uniform with-replacement draw of `m` pool indices.
pub fn bootstrap_indices(pool_size: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from_seed(seed);
    (0..m).map(|_| rng.random_range(0..pool_size)).collect()
}

/// Resamples a labeled pool into a target set whose hidden labels follow
/// `target_dist`.
pub fn resample_target(
    pool: &Predictions,
    pool_labels: &[usize],
    target_dist: &LabelDist,
    m: usize,
    seed: u64,
) -> Result<TargetSet> {
    if pool.rows() != pool_labels.len() {
        return Err(Error::ShapeMismatch("pool predictions and labels differ in length".into()));
    }
    let idx = resample_indices(pool_labels, target_dist, m, seed)?;
    let hidden = idx.iter().map(|&i| pool_labels[i]).collect();
    TargetSet::new(pool.select(&idx), Some(hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::class_proportions;

    fn two_class() -> MixtureSpec {
        MixtureSpec::new(
            vec![vec![-1.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]],
            LabelDist::new(vec![0.5, 0.5]).unwrap(),
        )
        .unwrap()
    }

    // Independent density evaluation, no log-space tricks.
    fn brute_force_posterior(spec: &MixtureSpec, prior: &[f64], x: &[f64]) -> Vec<f64> {
        let dens: Vec<f64> = (0..spec.k())
            .map(|i| {
                let mut d = prior[i];
                for j in 0..x.len() {
                    let v = spec.variances[i][j];
                    let diff = x[j] - spec.means[i][j];
                    d *= (-diff * diff / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                d
            })
            .collect();
        let s: f64 = dens.iter().sum();
        dens.iter().map(|d| d / s).collect()
    }

    #[test]
    fn dirichlet_concentrates_at_large_alpha() {
        let d = sample_dirichlet_dist(3, 1e6, 11).unwrap();
        for p in d.as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn dirichlet_moments_k2_alpha1() {
        let reps = 100_000;
        let xs: Vec<f64> = (0..reps).map(|s| sample_dirichlet_dist(2, 1.0, s).unwrap().get(0)).collect();
        let mean = xs.iter().sum::<f64>() / reps as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        // (1/k)(1-1/k)/(k alpha + 1) = 0.25 / 3
        assert!((var - 1.0 / 12.0).abs() < 0.005, "var {var}");
    }

    #[test]
    fn dirichlet_rejects_bad_alpha() {
        assert_eq!(sample_dirichlet_dist(3, 0.0, 1), Err(Error::InvalidAlpha(0.0)));
        assert!(sample_dirichlet_dist(3, -1.0, 1).is_err());
    }

    #[test]
    fn dirichlet_small_alpha_is_valid() {
        for s in 0..500 {
            let d = sample_dirichlet_dist(10, 0.05, s).unwrap();
            assert!((d.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tweak_one_examples() {
        let d = tweak_one_dist(10, 0.9, 4).unwrap();
        assert!((d.get(3) - 0.9).abs() < 1e-15);
        for i in [0, 1, 2, 4, 9] {
            assert!((d.get(i) - 0.1 / 9.0).abs() < 1e-12);
        }
        let u = tweak_one_dist(5, 0.2, 1).unwrap();
        assert!(u.as_slice().iter().all(|p| (p - 0.2).abs() < 1e-15));
        assert_eq!(tweak_one_dist(2, 0.0, 1).unwrap().as_slice(), &[0.0, 1.0]);
        assert_eq!(tweak_one_dist(3, 0.5, 4), Err(Error::IndexOutOfRange { index: 4, k: 3 }));
        assert_eq!(tweak_one_dist(3, 0.5, 0), Err(Error::IndexOutOfRange { index: 0, k: 3 }));
    }

    #[test]
    fn posterior_examples() {
        let spec = two_class();
        let half = LabelDist::new(vec![0.5, 0.5]).unwrap();
        let row = exact_posterior(&spec, &half, &[0.0]).unwrap();
        assert!((row[0] - 0.5).abs() < 1e-15);

        let degenerate = LabelDist::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(exact_posterior(&spec, &degenerate, &[3.7]).unwrap(), vec![1.0, 0.0]);

        let row = exact_posterior(&spec, &half, &[0.5]).unwrap();
        let e = std::f64::consts::E;
        assert!((row[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((row[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((row[0] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn posterior_stable_far_from_means() {
        // Densities underflow individually; log space keeps the ratio.
        let spec = two_class();
        let half = LabelDist::new(vec![0.5, 0.5]).unwrap();
        let row = exact_posterior(&spec, &half, &[60.0]).unwrap();
        assert!(row.iter().all(|v| v.is_finite()));
        assert!(row[1] > 0.999_999);
        // An extra coordinate shared by all classes adds the same constant
        // (about -5000 here) to every class log-density.
        let padded = MixtureSpec::new(
            vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            half.clone(),
        )
        .unwrap();
        let a = exact_posterior(&spec, &half, &[0.3]).unwrap();
        let b = exact_posterior(&padded, &half, &[0.3, 100.0]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12);
    }

    #[test]
    fn generate_matches_brute_force() {
        let spec = MixtureSpec::new(
            vec![vec![0.0, 1.0], vec![1.0, -0.5], vec![-1.0, 0.2]],
            vec![vec![1.0, 0.5], vec![2.0, 1.0], vec![0.7, 1.3]],
            LabelDist::new(vec![0.2, 0.3, 0.5]).unwrap(),
        )
        .unwrap();
        let dist = LabelDist::new(vec![0.6, 0.1, 0.3]).unwrap();
        let s = generate_mixture(&spec, &dist, 500, 3, &GenerateOptions::default()).unwrap();
        for (x, row) in s.features.iter().zip(s.posteriors.iter_rows()) {
            let oracle = brute_force_posterior(&spec, dist.as_slice(), x);
            for (a, b) in row.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generate_label_frequencies() {
        let spec = two_class();
        let dist = LabelDist::new(vec![0.5, 0.5]).unwrap();
        let s = generate_mixture(&spec, &dist, 1000, 5, &GenerateOptions::default()).unwrap();
        let p = class_proportions(&s.labels, 2).unwrap();
        assert!((p.get(0) - 0.5).abs() < 0.05);

        let dist = LabelDist::new(vec![0.15, 0.35, 0.5]).unwrap();
        let spec3 = MixtureSpec::simplex(3, 1.0, 1.0, dist.clone()).unwrap();
        let s = sample_features(&spec3, &dist, 100_000, 9).unwrap();
        let p = class_proportions(&s.1, 3).unwrap();
        for i in 0..3 {
            assert!((p.get(i) - dist.get(i)).abs() < 0.01);
        }
    }

    #[test]
    fn uninformative_features_return_prior() {
        let prior = LabelDist::new(vec![0.3, 0.7]).unwrap();
        let spec = MixtureSpec::new(vec![vec![0.0], vec![0.0]], vec![vec![1.0], vec![1.0]], prior.clone()).unwrap();
        let s = generate_mixture(&spec, &prior, 50, 1, &GenerateOptions::default()).unwrap();
        for row in s.posteriors.iter_rows() {
            assert!((row[0] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = two_class();
        let d = LabelDist::new(vec![0.4, 0.6]).unwrap();
        let a = generate_mixture(&spec, &d, 100, 42, &GenerateOptions::default()).unwrap();
        let b = generate_mixture(&spec, &d, 100, 42, &GenerateOptions::default()).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.posteriors, b.posteriors);
        let c = generate_mixture(&spec, &d, 100, 42, &GenerateOptions { misspecification: 0.3 }).unwrap();
        assert_eq!(a.labels, c.labels);
        assert_ne!(a.posteriors, c.posteriors);
    }

    #[test]
    fn resampling() {
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let preds = Predictions::Probs(ProbMatrix::new(vec![vec![0.5, 0.5]; 200]).unwrap());

        let point = LabelDist::new(vec![1.0, 0.0]).unwrap();
        let t = resample_target(&preds, &labels, &point, 300, 1).unwrap();
        assert!(t.hidden_labels().unwrap().iter().all(|&y| y == 0));

        let d = LabelDist::new(vec![0.3, 0.7]).unwrap();
        let t = resample_target(&preds, &labels, &d, 10_000, 2).unwrap();
        let p = class_proportions(t.hidden_labels().unwrap(), 2).unwrap();
        assert!((p.get(0) - 0.3).abs() < 0.02);

        let only_first = vec![0usize; 10];
        let preds10 = preds.select(&(0..10).collect::<Vec<_>>());
        let d = LabelDist::new(vec![0.9, 0.1]).unwrap();
        assert_eq!(
            resample_target(&preds10, &only_first, &d, 5, 3).unwrap_err(),
            Error::UnsupportedClass { class: 2 }
        );
    }
}
