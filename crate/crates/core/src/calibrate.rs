//! Post-hoc logit calibration: temperature scaling (TS), bias-corrected TS
//! (BCTS), no-bias vector scaling (NBVS) and vector scaling (VS), each fitted
//! by minimizing the average negative log-likelihood of held-out labels.
//!
//! Every map is `softmax(scale ⊙ z + bias)` for some tying of the
//! parameters, so a single NLL/gradient routine serves all four. TS and BCTS
//! are optimized in the inverse temperature `1/T` and reported as `T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LogitMatrix, ProbMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMethod {
    None,
    Ts,
    Bcts,
    Nbvs,
    Vs,
}

impl CalibrationMethod {
    pub const ALL: [CalibrationMethod; 5] = [Self::None, Self::Ts, Self::Bcts, Self::Nbvs, Self::Vs];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Ts => "ts",
            Self::Bcts => "bcts",
            Self::Nbvs => "nbvs",
            Self::Vs => "vs",
        }
    }

    fn n_params(self, k: usize) -> usize {
        match self {
            Self::None => 0,
            Self::Ts => 1,
            Self::Bcts => 1 + k,
            Self::Nbvs => k,
            Self::Vs => 2 * k,
        }
    }
}

impl std::str::FromStr for CalibrationMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown calibration method `{s}`")))
    }
}

impl std::fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fitted calibration parameters. Blocks a method does not use are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub method: CalibrationMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
}

impl CalibrationMap {
    /// The identity parameters (`T = 1`, `w = 1`, `b = 0`) for `method`.
    pub fn identity(method: CalibrationMethod, k: usize) -> Self {
        Self::from_params(method, k, &initial_params(method, k))
    }

    pub fn none() -> Self {
        Self { method: CalibrationMethod::None, temperature: None, scale: None, bias: None }
    }

    fn from_params(method: CalibrationMethod, k: usize, theta: &[f64]) -> Self {
        let mut map = Self { method, temperature: None, scale: None, bias: None };
        match method {
            CalibrationMethod::None => {}
            CalibrationMethod::Ts => map.temperature = Some(1.0 / theta[0]),
            CalibrationMethod::Bcts => {
                map.temperature = Some(1.0 / theta[0]);
                map.bias = Some(theta[1..=k].to_vec());
            }
            CalibrationMethod::Nbvs => map.scale = Some(theta[..k].to_vec()),
            CalibrationMethod::Vs => {
                map.scale = Some(theta[..k].to_vec());
                map.bias = Some(theta[k..2 * k].to_vec());
            }
        }
        map
    }

    fn validate(&self, k: usize) -> Result<()> {
        let need_t = matches!(self.method, CalibrationMethod::Ts | CalibrationMethod::Bcts);
        let need_w = matches!(self.method, CalibrationMethod::Nbvs | CalibrationMethod::Vs);
        let need_b = matches!(self.method, CalibrationMethod::Bcts | CalibrationMethod::Vs);
        match (need_t, self.temperature) {
            (true, Some(t)) if t > 0.0 && t.is_finite() => {}
            (false, None) => {}
            _ => return Err(Error::InvalidParameter(format!("bad temperature block for {}", self.method))),
        }
        for (need, block) in [(need_w, &self.scale), (need_b, &self.bias)] {
            match (need, block) {
                (true, Some(v)) if v.len() == k => {}
                (true, Some(v)) => return Err(Error::DimensionMismatch { expected: k, got: v.len() }),
                (false, None) => {}
                _ => return Err(Error::InvalidParameter(format!("bad parameter block for {}", self.method))),
            }
        }
        Ok(())
    }

    /// Calibrated scores `scale ⊙ z + bias` for one row.
    fn transform_row(&self, z: &[f64], out: &mut [f64]) {
        let inv_t = self.temperature.map(|t| 1.0 / t);
        for (i, (o, zi)) in out.iter_mut().zip(z).enumerate() {
            let scale = match (&self.scale, inv_t) {
                (Some(w), _) => w[i],
                (None, Some(a)) => a,
                (None, None) => 1.0,
            };
            let bias = self.bias.as_ref().map_or(0.0, |b| b[i]);
            *o = scale * zi + bias;
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Applies `map` row-wise and returns probabilities.
pub fn apply_calibration(map: &CalibrationMap, logits: &LogitMatrix) -> Result<ProbMatrix> {
    let k = logits.classes();
    map.validate(k)?;
    let mut values = vec![0.0; logits.rows() * k];
    for (z, out) in logits.iter_rows().zip(values.chunks_mut(k)) {
        map.transform_row(z, out);
        softmax_in_place(out);
    }
    Ok(ProbMatrix::from_flat_unchecked(logits.rows(), k, values))
}

/// Settings for the gradient-descent fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    /// Convergence threshold on the gradient infinity-norm.
    pub tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Backtracking shrink factor.
    pub shrink: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { max_iter: 2000, tol: 1e-7, armijo: 1e-4, shrink: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub map: CalibrationMap,
    pub converged: bool,
    pub iterations: usize,
    pub nll_identity: f64,
    pub nll: f64,
    pub grad_norm: f64,
}

fn initial_params(method: CalibrationMethod, k: usize) -> Vec<f64> {
    match method {
        CalibrationMethod::None => vec![],
        CalibrationMethod::Ts => vec![1.0],
        CalibrationMethod::Bcts => std::iter::once(1.0).chain(std::iter::repeat_n(0.0, k)).collect(),
        CalibrationMethod::Nbvs => vec![1.0; k],
        CalibrationMethod::Vs => std::iter::repeat_n(1.0, k).chain(std::iter::repeat_n(0.0, k)).collect(),
    }
}

struct NllProblem<'a> {
    method: CalibrationMethod,
    logits: &'a LogitMatrix,
    labels: &'a [usize],
}

impl NllProblem<'_> {
    /// Average NLL and its gradient; `+inf` outside the feasible region
    /// (nonpositive inverse temperature).
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.logits.classes();
        let method = self.method;
        if matches!(method, CalibrationMethod::Ts | CalibrationMethod::Bcts) && !(theta[0] > 0.0) {
            return f64::INFINITY;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut s = vec![0.0; k];
        let mut nll = 0.0;
        for (z, &y) in self.logits.iter_rows().zip(self.labels) {
            for i in 0..k {
                s[i] = match method {
                    CalibrationMethod::None => z[i],
                    CalibrationMethod::Ts => theta[0] * z[i],
                    CalibrationMethod::Bcts => theta[0] * z[i] + theta[1 + i],
                    CalibrationMethod::Nbvs => theta[i] * z[i],
                    CalibrationMethod::Vs => theta[i] * z[i] + theta[k + i],
                };
            }
            let score_y = s[y];
            let lse = softmax_in_place(&mut s);
            nll += lse - score_y;
            // s now holds probabilities; d nll / d score_i = p_i - [i == y].
            for i in 0..k {
                let d = s[i] - if i == y { 1.0 } else { 0.0 };
                match method {
                    CalibrationMethod::None => {}
                    CalibrationMethod::Ts => grad[0] += d * z[i],
                    CalibrationMethod::Bcts => {
                        grad[0] += d * z[i];
                        grad[1 + i] += d;
                    }
                    CalibrationMethod::Nbvs => grad[i] += d * z[i],
                    CalibrationMethod::Vs => {
                        grad[i] += d * z[i];
                        grad[k + i] += d;
                    }
                }
            }
        }
        let n = self.labels.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        nll / n
    }
}

/// Average NLL of `map` on labeled logits.
pub fn negative_log_likelihood(map: &CalibrationMap, logits: &LogitMatrix, labels: &[usize]) -> Result<f64> {
    let probs = apply_calibration(map, logits)?;
    let n = labels.len() as f64;
    Ok(probs.iter_rows().zip(labels).map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / n)
}

/// Fits `method` by full-batch gradient descent from the identity map.
/// Trial steps use the Barzilai-Borwein length and are backtracked until
/// the Armijo condition holds, so the NLL never increases.
pub fn fit_calibration(
    method: CalibrationMethod,
    logits: &LogitMatrix,
    labels: &[usize],
    opt: &OptimizerConfig,
) -> Result<CalibrationFit> {
    if method == CalibrationMethod::None {
        return Err(Error::InvalidParameter("calibration method `none` has nothing to fit".into()));
    }
    let k = logits.classes();
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    if labels.is_empty() {
        return Err(Error::ShapeMismatch("no calibration samples".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelRange { label: l as i64 + 1, k });
    }
    let problem = NllProblem { method, logits, labels };
    let dim = method.n_params(k);
    let mut theta = initial_params(method, k);
    let mut grad = vec![0.0; dim];
    let mut f = problem.eval(&theta, &mut grad);
    let nll_identity = f;
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut trial = vec![0.0; dim];
    let mut trial_grad = vec![0.0; dim];

    while iterations < opt.max_iter {
        let gnorm = inf_norm(&grad);
        if gnorm <= opt.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let mut t = step;
        let mut accepted = false;
        for _ in 0..80 {
            for i in 0..dim {
                trial[i] = theta[i] - t * grad[i];
            }
            let ft = problem.eval(&trial, &mut trial_grad);
            if ft.is_finite() && ft <= f - opt.armijo * t * g2 {
                // Barzilai-Borwein length for the next trial step.
                let mut ss = 0.0;
                let mut sy = 0.0;
                for i in 0..dim {
                    let si = trial[i] - theta[i];
                    ss += si * si;
                    sy += si * (trial_grad[i] - grad[i]);
                }
                step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { (t * 2.0).min(1e10) };
                std::mem::swap(&mut theta, &mut trial);
                std::mem::swap(&mut grad, &mut trial_grad);
                f = ft;
                accepted = true;
                break;
            }
            t *= opt.shrink;
        }
        if !accepted {
            // No representable descent step left.
            break;
        }
    }
    let grad_norm = inf_norm(&grad);
    converged |= grad_norm <= opt.tol;
    Ok(CalibrationFit {
        map: CalibrationMap::from_params(method, k, &theta),
        converged,
        iterations,
        nll_identity,
        nll: f,
        grad_norm,
    })
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
