//! ELSA: moment matching with the damped posterior-difference map
//!
//! ```text
//! h(x; omega) = mu~(x) / ( E_s[omega^2 | x] / pi + E_s[omega | x] / (1 - pi) )
//! mu~_i(x)   = p_s(i|x) - p_s(k|x),  i < k
//! ```
//!
//! Because `h` depends on `omega`, the matching equation is nonlinear. Two
//! solvers are provided: a fixed-point iteration that re-solves the linear
//! moment system with `h` frozen at the current iterate, and a direct
//! minimization of the squared equation residual (Levenberg-Marquardt with
//! a finite-difference Jacobian).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lu_solve;
use crate::types::{class_proportions, LabelDist, ProbMatrix, Weights};

use super::moment::MomentSums;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElsaSolver {
    FixedPoint,
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElsaConfig {
    pub solver: ElsaSolver,
    pub tol: f64,
    pub max_iter: usize,
    /// Ridge for a singular iteration matrix; 0 selects `1e-10 tr/k`.
    pub ridge: f64,
    /// Full initial weight vector; all-ones when absent.
    pub init: Option<Vec<f64>>,
    /// Overrides `pi = n / (n + m)`.
    pub pi: Option<f64>,
    /// Retry with least squares when the fixed point fails to converge.
    pub fallback: bool,
}

impl Default for ElsaConfig {
    fn default() -> Self {
        Self {
            solver: ElsaSolver::FixedPoint,
            tol: 1e-8,
            max_iter: 500,
            ridge: 0.0,
            init: None,
            pi: None,
            fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElsaState {
    pub omega_minus_k: Vec<f64>,
    pub pi: f64,
    pub iteration: usize,
    /// Infinity norm of the last update.
    pub residual: f64,
    /// Infinity norm of the matching equation at the returned point.
    pub equation_residual: f64,
    pub converged: bool,
    pub solver: ElsaSolver,
    pub fell_back: bool,
}

const MIN_DENOMINATOR: f64 = 1e-300;

/// Writes `h(row; omega)` into `out` (length `k-1`). Negative weights enter
/// the denominator as 0, which keeps it positive along solver paths.
pub(crate) fn h_elsa_into(row: &[f64], omega: &[f64], pi: f64, out: &mut [f64]) -> Result<()> {
    let k = row.len();
    let mut e1 = 0.0;
    let mut e2 = 0.0;
    for (p, w) in row.iter().zip(omega) {
        let w = w.max(0.0);
        e1 += w * p;
        e2 += w * w * p;
    }
    let den = e2 / pi + e1 / (1.0 - pi);
    if !(den > MIN_DENOMINATOR) {
        return Err(Error::DegenerateDenominator(den));
    }
    let last = row[k - 1];
    for (o, p) in out.iter_mut().zip(&row[..k - 1]) {
        *o = (p - last) / den;
    }
    Ok(())
}

/// ELSA feature map for one posterior row.
pub fn h_elsa(row: &[f64], omega: &Weights, pi: f64) -> Result<Vec<f64>> {
    if row.len() != omega.k() {
        return Err(Error::DimensionMismatch { expected: omega.k(), got: row.len() });
    }
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::InvalidParameter(format!("pi = {pi} outside (0, 1)")));
    }
    let mut out = vec![0.0; row.len() - 1];
    h_elsa_into(row, omega.omega(), pi, &mut out)?;
    Ok(out)
}

/// A map `(posterior row, full omega, pi) -> h` written into a buffer.
pub(crate) trait FeatureMap: Sync {
    fn eval(&self, row: &[f64], omega: &[f64], pi: f64, out: &mut [f64]) -> Result<()>;
}

pub(crate) struct ElsaMap;

impl FeatureMap for ElsaMap {
    fn eval(&self, row: &[f64], omega: &[f64], pi: f64, out: &mut [f64]) -> Result<()> {
        h_elsa_into(row, omega, pi, out)
    }
}

/// Source/target posteriors with everything that stays fixed while solving.
pub(crate) struct Problem<'a, H: FeatureMap> {
    pub source: &'a ProbMatrix,
    pub labels: &'a [usize],
    pub target: &'a ProbMatrix,
    pub props: LabelDist,
    pub pi: f64,
    pub map: H,
}

impl<'a, H: FeatureMap> Problem<'a, H> {
    pub fn new(source: &'a ProbMatrix, labels: &'a [usize], target: &'a ProbMatrix, pi: Option<f64>, map: H) -> Result<Self> {
        let k = source.classes();
        if target.classes() != k {
            return Err(Error::DimensionMismatch { expected: k, got: target.classes() });
        }
        if labels.len() != source.rows() {
            return Err(Error::ShapeMismatch(format!("{} labels for {} rows", labels.len(), source.rows())));
        }
        let props = class_proportions(labels, k)?;
        if let Some(c) = props.as_slice().iter().position(|p| *p == 0.0) {
            return Err(Error::EmptyClass { class: c + 1 });
        }
        let n = source.rows() as f64;
        let m = target.rows() as f64;
        let pi = pi.unwrap_or(n / (n + m));
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::InvalidParameter(format!("pi = {pi} outside (0, 1)")));
        }
        Ok(Self { source, labels, target, props, pi, map })
    }

    pub fn k(&self) -> usize {
        self.source.classes()
    }

    pub fn full_omega(&self, reduced: &[f64]) -> Result<Weights> {
        Weights::complete(reduced, &self.props)
    }

    /// Moment sums with `h` evaluated at `omega`.
    pub fn sums(&self, omega: &[f64]) -> Result<MomentSums> {
        let k = self.k();
        let mut sums = MomentSums::new(k);
        let mut h = vec![0.0; k - 1];
        for (row, &y) in self.source.iter_rows().zip(self.labels) {
            self.map.eval(row, omega, self.pi, &mut h)?;
            sums.add_source(y, &h);
        }
        for row in self.target.iter_rows() {
            self.map.eval(row, omega, self.pi, &mut h)?;
            sums.add_target(&h);
        }
        sums.finish_target(self.target.rows());
        Ok(sums)
    }

    /// Left side of the matching equation,
    /// `(1/n) sum_source omega(y_j) h(x_j) - (1/m) sum_target h(x_j)`,
    /// with `h` evaluated at the same `omega`.
    pub fn equation(&self, reduced: &[f64]) -> Result<Vec<f64>> {
        let w = self.full_omega(reduced)?;
        let sums = self.sums(w.omega())?;
        Ok(self.residual_from(w.omega(), &sums))
    }

    /// `equation` divided by the mean absolute size of `h`. Both sides of the
    /// equation are linear in `h`, so the roots are unchanged, but the
    /// decay `h -> 0` as `omega` grows no longer looks like a root.
    pub fn normalized_equation(&self, reduced: &[f64]) -> Result<Vec<f64>> {
        let w = self.full_omega(reduced)?;
        let sums = self.sums(w.omega())?;
        let n = sums.n as f64;
        let scale = sums.class_sums.iter().flatten().map(|v| v.abs()).sum::<f64>() / n
            + sums.target_mean.iter().map(|v| v.abs()).sum::<f64>();
        let mut r = self.residual_from(w.omega(), &sums);
        if scale > 0.0 {
            r.iter_mut().for_each(|v| *v /= scale);
        }
        Ok(r)
    }

    fn residual_from(&self, omega: &[f64], sums: &MomentSums) -> Vec<f64> {
        let n = sums.n as f64;
        let mut r = vec![0.0; self.k() - 1];
        for (c, s) in sums.class_sums.iter().enumerate() {
            for (ri, si) in r.iter_mut().zip(s) {
                *ri += omega[c] * si / n;
            }
        }
        r.iter_mut().zip(&sums.target_mean).for_each(|(ri, t)| *ri -= t);
        r
    }

    /// One fixed-point update: solve the linear system with `h` frozen.
    pub fn fixed_point_step(&self, reduced: &[f64], ridge: f64, iteration: usize) -> Result<Vec<f64>> {
        let w = self.full_omega(reduced)?;
        let sums = self.sums(w.omega())?;
        sums.solve(&self.props, Some(ridge)).map_err(|_| Error::SingularIterationMatrix { iteration })
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct SolveOutcome {
    reduced: Vec<f64>,
    iterations: usize,
    last_step: f64,
    converged: bool,
    trace: Vec<Vec<f64>>,
}

fn fixed_point<H: FeatureMap>(problem: &Problem<'_, H>, init: &[f64], cfg: &ElsaConfig) -> Result<SolveOutcome> {
    let mut theta = init.to_vec();
    let mut trace = vec![theta.clone()];
    let mut last_step = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let next = problem.fixed_point_step(&theta, cfg.ridge, it)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularIterationMatrix { iteration: it });
        }
        last_step = theta.iter().zip(&next).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        theta = next;
        trace.push(theta.clone());
        if last_step < cfg.tol {
            return Ok(SolveOutcome { reduced: theta, iterations: it, last_step, converged: true, trace });
        }
    }
    Ok(SolveOutcome { reduced: theta, iterations: cfg.max_iter, last_step, converged: false, trace })
}

/// Minimizes `|equation(theta)|^2` by Levenberg-Marquardt with a central
/// finite-difference Jacobian. Convergence also requires a small normalized
/// residual, which rules out the drift towards `omega -> infinity`.
fn least_squares<H: FeatureMap>(problem: &Problem<'_, H>, init: &[f64], cfg: &ElsaConfig) -> Result<SolveOutcome> {
    let d = init.len();
    let objective = |theta: &[f64]| -> Option<(Vec<f64>, f64)> {
        let r = problem.equation(theta).ok()?;
        let f: f64 = r.iter().map(|v| v * v).sum();
        f.is_finite().then_some((r, f))
    };
    let mut theta = init.to_vec();
    let (mut r, mut f) = objective(&theta).ok_or(Error::DegenerateDenominator(0.0))?;
    let mut damping = 1e-3;
    let mut last_step = f64::INFINITY;
    let mut trace = vec![theta.clone()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iter {
        iterations += 1;
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut up = theta.clone();
            up[j] += h;
            let mut dn = theta.clone();
            dn[j] -= h;
            let ru = problem.equation(&up)?;
            let rd = problem.equation(&dn)?;
            for i in 0..d {
                jac[(i, j)] = (ru[i] - rd[i]) / (2.0 * h);
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let grad = &jt * DVector::from_column_slice(&r);
        let mut accepted = false;
        while damping < 1e12 {
            let mut a = jtj.clone();
            for i in 0..d {
                a[(i, i)] += damping * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = lu_solve(&a, &(-&grad)) else {
                damping *= 4.0;
                continue;
            };
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            match objective(&cand) {
                Some((rc, fc)) if fc < f => {
                    last_step = inf_norm(step.as_slice());
                    theta = cand;
                    r = rc;
                    f = fc;
                    damping = (damping / 3.0).max(1e-15);
                    accepted = true;
                    break;
                }
                _ => damping *= 4.0,
            }
        }
        trace.push(theta.clone());
        if !accepted || f == 0.0 {
            converged = f.sqrt() < 1e-12 || !accepted && last_step < cfg.tol;
            break;
        }
        if last_step < cfg.tol {
            converged = true;
            break;
        }
    }
    // Small steps at a non-root local minimum do not count.
    let k = problem.k() as f64;
    let converged = converged && problem.normalized_equation(&theta).is_ok_and(|r| inf_norm(&r) < 1e-6 * k);
    Ok(SolveOutcome { reduced: theta, iterations, last_step, converged, trace })
}

pub(crate) fn solve_problem<H: FeatureMap>(problem: &Problem<'_, H>, cfg: &ElsaConfig) -> Result<(Weights, ElsaState, Vec<Vec<f64>>)> {
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(Error::InvalidParameter("ELSA needs tol > 0 and max_iter >= 1".into()));
    }
    let k = problem.k();
    let init: Vec<f64> = match &cfg.init {
        Some(w) if w.len() == k => w[..k - 1].to_vec(),
        Some(w) => return Err(Error::DimensionMismatch { expected: k, got: w.len() }),
        None => vec![1.0; k - 1],
    };
    let mut fell_back = false;
    let (outcome, solver) = match cfg.solver {
        ElsaSolver::LeastSquares => (least_squares(problem, &init, cfg)?, ElsaSolver::LeastSquares),
        ElsaSolver::FixedPoint => match fixed_point(problem, &init, cfg) {
            Ok(o) if o.converged || !cfg.fallback => (o, ElsaSolver::FixedPoint),
            Err(e) if !cfg.fallback => return Err(e),
            first => {
                fell_back = true;
                let second = least_squares(problem, &init, cfg);
                let residual =
                    |o: &SolveOutcome| problem.normalized_equation(&o.reduced).map_or(f64::INFINITY, |r| inf_norm(&r));
                match (first, second) {
                    (Ok(a), Ok(b)) if !b.converged && residual(&a) < residual(&b) => (a, ElsaSolver::FixedPoint),
                    (Ok(a), Err(_)) => (a, ElsaSolver::FixedPoint),
                    (_, b) => (b?, ElsaSolver::LeastSquares),
                }
            }
        },
    };
    let weights = problem.full_omega(&outcome.reduced)?;
    let equation_residual = inf_norm(&problem.equation(&outcome.reduced)?);
    let state = ElsaState {
        omega_minus_k: outcome.reduced.clone(),
        pi: problem.pi,
        iteration: outcome.iterations,
        residual: outcome.last_step,
        equation_residual,
        converged: outcome.converged,
        solver,
        fell_back,
    };
    Ok((weights, state, outcome.trace))
}

/// Estimates importance weights from source posteriors with labels and
/// target posteriors. The last class is closed with the empirical source
/// proportions, so the returned weights satisfy `sum_i p̂_i omega_i = 1`.
pub fn elsa_solve(
    source: &ProbMatrix,
    labels: &[usize],
    target: &ProbMatrix,
    cfg: &ElsaConfig,
) -> Result<(Weights, ElsaState)> {
    let problem = Problem::new(source, labels, target, cfg.pi, ElsaMap)?;
    let (w, state, _) = solve_problem(&problem, cfg)?;
    Ok((w, state))
}
