//! Importance-weight estimators.

pub mod confusion;
pub mod elsa;
pub mod mlls;
pub mod moment;

pub use confusion::{
    confusion_matrix, default_rlls_lambda, solve_bbse, solve_rlls, target_mean, ConfusionMatrix, PredictionMode,
};
pub use elsa::{elsa_solve, h_elsa, ElsaConfig, ElsaSolver, ElsaState};
pub use mlls::{mlls_em, EmConfig, EmResult};
pub use moment::moment_match_solve;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{class_proportions, ProbMatrix, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    BbseHard,
    BbseSoft,
    Rlls,
    Mlls,
    Elsa,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [Self::BbseHard, Self::BbseSoft, Self::Rlls, Self::Mlls, Self::Elsa];

    pub fn name(self) -> &'static str {
        match self {
            Self::BbseHard => "bbse_hard",
            Self::BbseSoft => "bbse_soft",
            Self::Rlls => "rlls",
            Self::Mlls => "mlls",
            Self::Elsa => "elsa",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Solver settings shared by every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EstimatorSettings {
    pub elsa: ElsaConfig,
    /// RLLS penalty; `0.05 / sqrt(n)` when absent.
    pub rlls_lambda: Option<f64>,
    pub em: EmConfig,
    /// Ridge passed to the BBSE retry.
    pub bbse_ridge: f64,
}

/// Per-run solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_monotone: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rlls_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equation_residual: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub weights: Weights,
    pub diagnostics: Diagnostics,
    pub elsa_state: Option<ElsaState>,
}

/// Slack allowed on the EM log-likelihood sequence for rounding.
pub const EM_MONOTONE_SLACK: f64 = 1e-12;

/// Runs one estimator on calibrated source/target posteriors.
pub fn estimate(
    kind: EstimatorKind,
    source: &ProbMatrix,
    labels: &[usize],
    target: &ProbMatrix,
    settings: &EstimatorSettings,
) -> Result<Estimate> {
    let simple = |weights| Estimate {
        weights,
        diagnostics: Diagnostics { converged: true, ..Default::default() },
        elsa_state: None,
    };
    match kind {
        EstimatorKind::BbseHard | EstimatorKind::BbseSoft => {
            let mode = if kind == EstimatorKind::BbseHard { PredictionMode::Hard } else { PredictionMode::Soft };
            let c = confusion_matrix(source, labels, mode)?;
            Ok(simple(solve_bbse(&c, &target_mean(target, mode), settings.bbse_ridge)?))
        }
        EstimatorKind::Rlls => {
            let lambda = settings.rlls_lambda.unwrap_or_else(|| default_rlls_lambda(source.rows()));
            let c = confusion_matrix(source, labels, PredictionMode::Hard)?;
            let mut e = simple(solve_rlls(&c, &target_mean(target, PredictionMode::Hard), lambda)?);
            e.diagnostics.rlls_lambda = Some(lambda);
            Ok(e)
        }
        EstimatorKind::Mlls => {
            let props = class_proportions(labels, source.classes())?;
            let r = mlls_em(target, &props, &settings.em)?;
            Ok(Estimate {
                diagnostics: Diagnostics {
                    converged: r.converged,
                    iterations: r.iterations,
                    em_monotone: Some(r.is_monotone(EM_MONOTONE_SLACK)),
                    ..Default::default()
                },
                weights: r.weights,
                elsa_state: None,
            })
        }
        EstimatorKind::Elsa => {
            let (weights, state) = elsa_solve(source, labels, target, &settings.elsa)?;
            Ok(Estimate {
                weights,
                diagnostics: Diagnostics {
                    converged: state.converged,
                    iterations: state.iteration,
                    equation_residual: Some(state.equation_residual),
                    ..Default::default()
                },
                elsa_state: Some(state),
            })
        }
    }
}
