//! Plug-in uncertainty for the ELSA estimator.
//!
//! The estimator is a Z-estimator for the pooled estimating function
//!
//! ```text
//! g(x, y, r) = (r/pi) {1 - omega(y)} E[h | y = k]
//!            + {(r/pi) omega(y) - (1 - r)/(1 - pi)} h(x)
//! ```
//!
//! so `sqrt(n) (omega^(-k) - omega0^(-k))` is asymptotically normal with
//! covariance `pi U V U^T`, `U = E[dg/domega]^-1`, `V = E[g g^T]`. Both
//! expectations are replaced by pooled sample means over all `n + m` rows;
//! the Jacobian is taken by central finite differences.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::elsa::h_elsa_into;
use crate::estimators::confusion::MIN_RCOND;
use crate::linalg::rcond;
use crate::stats::normal_quantile;
use crate::types::{ProbMatrix, Weights};

/// `g` for one observation. `label` is 0-based and required on source rows.
pub fn estimating_function_g(
    row: &[f64],
    label: Option<usize>,
    is_source: bool,
    omega: &Weights,
    pi: f64,
    eh_k: &[f64],
) -> Result<Vec<f64>> {
    let k = omega.k();
    if row.len() != k || eh_k.len() != k - 1 {
        return Err(Error::DimensionMismatch { expected: k, got: row.len() });
    }
    let mut out = vec![0.0; k - 1];
    g_into(row, label, is_source, omega.omega(), pi, eh_k, &mut out)?;
    Ok(out)
}

fn g_into(
    row: &[f64],
    label: Option<usize>,
    is_source: bool,
    omega: &[f64],
    pi: f64,
    eh_k: &[f64],
    out: &mut [f64],
) -> Result<()> {
    h_elsa_into(row, omega, pi, out)?;
    if is_source {
        let y = label.ok_or(Error::MissingLabel)?;
        let wy = omega[y];
        for (o, e) in out.iter_mut().zip(eh_k) {
            *o = (1.0 - wy) * e / pi + wy * *o / pi;
        }
    } else {
        out.iter_mut().for_each(|o| *o = -*o / (1.0 - pi));
    }
    Ok(())
}

/// Sample mean of `h` over source rows of the last class.
pub fn mean_h_last_class(source: &ProbMatrix, labels: &[usize], omega: &[f64], pi: f64) -> Result<Vec<f64>> {
    let k = source.classes();
    let mut acc = vec![0.0; k - 1];
    let mut h = vec![0.0; k - 1];
    let mut count = 0usize;
    for (row, &y) in source.iter_rows().zip(labels) {
        if y == k - 1 {
            h_elsa_into(row, omega, pi, &mut h)?;
            acc.iter_mut().zip(&h).for_each(|(a, v)| *a += v);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyClass { class: k });
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(acc)
}

struct Pooled<'a> {
    source: &'a ProbMatrix,
    labels: &'a [usize],
    target: &'a ProbMatrix,
    pi: f64,
}

impl Pooled<'_> {
    fn total(&self) -> f64 {
        (self.source.rows() + self.target.rows()) as f64
    }

    /// Calls `visit` with `g` for every pooled row, `Eh_k` re-estimated at
    /// `omega`.
    fn for_each_g(&self, omega: &[f64], mut visit: impl FnMut(&[f64])) -> Result<()> {
        let k = self.source.classes();
        let eh_k = mean_h_last_class(self.source, self.labels, omega, self.pi)?;
        let mut g = vec![0.0; k - 1];
        for (row, &y) in self.source.iter_rows().zip(self.labels) {
            g_into(row, Some(y), true, omega, self.pi, &eh_k, &mut g)?;
            visit(&g);
        }
        for row in self.target.iter_rows() {
            g_into(row, None, false, omega, self.pi, &eh_k, &mut g)?;
            visit(&g);
        }
        Ok(())
    }

    fn mean_g(&self, omega: &[f64]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.source.classes() - 1];
        self.for_each_g(omega, |g| acc.iter_mut().zip(g).for_each(|(a, v)| *a += v))?;
        let total = self.total();
        acc.iter_mut().for_each(|a| *a /= total);
        Ok(acc)
    }
}

/// Pooled sample mean of `g` at `omega`; zero at an exact ELSA solution.
pub fn pooled_mean_g(
    source: &ProbMatrix,
    labels: &[usize],
    target: &ProbMatrix,
    omega: &Weights,
    pi: f64,
) -> Result<Vec<f64>> {
    Pooled { source, labels, target, pi }.mean_g(omega.omega())
}

/// ELSA weights with their plug-in limit covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichEstimate {
    pub weights: Weights,
    /// `(k-1) x (k-1)` covariance of `sqrt(n) (omega^(-k) - omega0^(-k))`.
    pub covariance: Vec<Vec<f64>>,
    pub pi: f64,
    pub n: usize,
}

/// Sandwich covariance `pi U V U^T` at `omega_hat`. The Jacobian uses steps
/// `fd_step * max(1, |omega_i|)`, closing the last class with the source
/// proportions stored in `omega_hat`.
pub fn sandwich_covariance(
    source: &ProbMatrix,
    labels: &[usize],
    target: &ProbMatrix,
    omega_hat: &Weights,
    pi: f64,
    fd_step: f64,
) -> Result<SandwichEstimate> {
    let k = source.classes();
    if omega_hat.k() != k || target.classes() != k {
        return Err(Error::DimensionMismatch { expected: k, got: omega_hat.k() });
    }
    if labels.len() != source.rows() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} rows", labels.len(), source.rows())));
    }
    if !(pi > 0.0 && pi < 1.0) || !(fd_step > 0.0) {
        return Err(Error::InvalidParameter(format!("pi = {pi}, fd_step = {fd_step}")));
    }
    let d = k - 1;
    let pooled = Pooled { source, labels, target, pi };
    let props = omega_hat.source_props();
    let theta = omega_hat.omega_minus_k().to_vec();

    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let step = fd_step * theta[j].abs().max(1.0);
        let mut up = theta.clone();
        up[j] += step;
        let mut dn = theta.clone();
        dn[j] -= step;
        let gu = pooled.mean_g(Weights::complete(&up, props)?.omega())?;
        let gd = pooled.mean_g(Weights::complete(&dn, props)?.omega())?;
        for i in 0..d {
            jac[(i, j)] = (gu[i] - gd[i]) / (2.0 * step);
        }
    }
    let rc = rcond(&jac);
    if rc < MIN_RCOND {
        return Err(Error::SingularJacobian { rcond: rc });
    }
    let u = jac.try_inverse().ok_or(Error::SingularJacobian { rcond: rc })?;

    let mut v = DMatrix::zeros(d, d);
    pooled.for_each_g(omega_hat.omega(), |g| {
        for a in 0..d {
            for b in 0..d {
                v[(a, b)] += g[a] * g[b];
            }
        }
    })?;
    v /= pooled.total();

    let cov = (&u * v * u.transpose()) * pi;
    let sym = (&cov + cov.transpose()) * 0.5;
    Ok(SandwichEstimate {
        weights: omega_hat.clone(),
        covariance: (0..d).map(|i| (0..d).map(|j| sym[(i, j)]).collect()).collect(),
        pi,
        n: source.rows(),
    })
}

/// Normal-approximation interval for one class (1-based in `class`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub class: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `omega_i ± z sqrt(cov_ii / n)` for `i < k`; the last class uses the
/// linear closing map `a_i = -p_i / p_k`, variance `a^T cov a / n`.
pub fn confidence_intervals(est: &SandwichEstimate, level: f64) -> Vec<Interval> {
    let z = normal_quantile((1.0 + level.clamp(0.0, 1.0)) / 2.0);
    let n = est.n as f64;
    let omega = est.weights.omega();
    let p = est.weights.source_props().as_slice();
    let k = omega.len();
    let interval = |class: usize, var: f64| {
        let half = if z == 0.0 { 0.0 } else { z * (var.max(0.0) / n).sqrt() };
        Interval { class: class + 1, estimate: omega[class], lower: omega[class] - half, upper: omega[class] + half }
    };
    let mut out: Vec<Interval> = (0..k - 1).map(|i| interval(i, est.covariance[i][i])).collect();
    let a: Vec<f64> = (0..k - 1).map(|i| -p[i] / p[k - 1]).collect();
    let mut var_k = 0.0;
    for i in 0..k - 1 {
        for j in 0..k - 1 {
            var_k += a[i] * est.covariance[i][j] * a[j];
        }
    }
    out.push(interval(k - 1, var_k));
    out
}
