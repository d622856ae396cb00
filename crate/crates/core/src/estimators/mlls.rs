//! Maximum-likelihood label shift via EM on the target mixture weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelDist, ProbMatrix, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub weights: Weights,
    pub iterations: usize,
    pub converged: bool,
    /// Average target log-likelihood `mean_j log sum_i omega_i p_s(i|x_j)` at
    /// the initial point and after every update.
    pub log_likelihood: Vec<f64>,
}

impl EmResult {
    /// True when no step lowered the log-likelihood by more than `slack`.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.log_likelihood.windows(2).all(|w| w[1] >= w[0] - slack)
    }
}

/// EM over the target priors `q`, starting at `q = p̂`:
/// `q_i <- mean_j omega_i f_i(x_j) / sum_l omega_l f_l(x_j)` with
/// `omega = q / p̂`, until the largest change in `q` drops below `tol`.
pub fn mlls_em(target: &ProbMatrix, source_props: &LabelDist, cfg: &EmConfig) -> Result<EmResult> {
    let k = target.classes();
    if source_props.k() != k {
        return Err(Error::DimensionMismatch { expected: k, got: source_props.k() });
    }
    if let Some(c) = source_props.as_slice().iter().position(|p| *p <= 0.0) {
        return Err(Error::ZeroSourceProp { class: c + 1 });
    }
    let p = source_props.as_slice();
    let m = target.rows() as f64;
    let mut q = p.to_vec();
    let mut omega: Vec<f64> = vec![1.0; k];
    let mut next = vec![0.0; k];
    let mut log_likelihood = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    loop {
        // E-step and log-likelihood share the per-row normalizer.
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut ll = 0.0;
        for row in target.iter_rows() {
            let den: f64 = row.iter().zip(&omega).map(|(f, w)| f * w).sum();
            if !(den > 0.0) {
                return Err(Error::ZeroMass);
            }
            ll += den.ln();
            for i in 0..k {
                next[i] += omega[i] * row[i] / den;
            }
        }
        log_likelihood.push(ll / m);
        if converged || iterations >= cfg.max_iter {
            break;
        }
        next.iter_mut().for_each(|v| *v /= m);
        let delta = next.iter().zip(&q).fold(0.0f64, |d, (a, b)| d.max((a - b).abs()));
        q.copy_from_slice(&next);
        for i in 0..k {
            omega[i] = q[i] / p[i];
        }
        iterations += 1;
        converged = delta < cfg.tol;
    }

    debug_assert!(log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    Ok(EmResult {
        weights: Weights::from_ratios(omega, source_props.clone()),
        iterations,
        converged,
        log_likelihood,
    })
}
