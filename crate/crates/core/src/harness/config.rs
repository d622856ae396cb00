use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationMethod;
use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, EstimatorSettings};
use crate::simulate::{MixtureSpec, ShiftMechanism, ShiftSpec};
use crate::types::LabelDist;

/// Where replication data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian mixture oracle. Classifier outputs are the posteriors of the
    /// mixture with means perturbed by `misspecification`, returned as
    /// logits scaled by `logit_temperature`.
    Synthetic {
        spec: MixtureSpec,
        #[serde(default)]
        misspecification: f64,
        #[serde(default = "one")]
        logit_temperature: f64,
    },
    /// Labeled prediction tables; both pools are resampled per replication.
    Files { source: PathBuf, target: PathBuf },
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn ci_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown format `{other}`"))),
        }
    }
}

/// One benchmark run. `output`, `format` and `jobs` only steer emission and
/// scheduling, so they are left out of the echo stored in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub shift: ShiftSpec,
    pub n: usize,
    pub m: usize,
    pub estimators: Vec<EstimatorKind>,
    pub calibrations: Vec<CalibrationMethod>,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub settings: EstimatorSettings,
    /// Fraction of the source held out for fitting calibration. At 0 the
    /// whole source is used both for calibration and estimation.
    #[serde(default = "half")]
    pub calibration_split: f64,
    #[serde(default = "ci_level")]
    pub ci_level: f64,
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing)]
    pub format: ReportFormat,
    #[serde(default, skip_serializing)]
    pub jobs: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let prior = LabelDist::uniform(3).expect("k = 3");
        Self {
            data: DataSource::Synthetic {
                spec: MixtureSpec::simplex(3, 2.0, 1.0, prior).expect("valid simplex"),
                misspecification: 0.0,
                logit_temperature: 1.0,
            },
            shift: ShiftSpec { mechanism: ShiftMechanism::Dirichlet { alpha: 1.0 }, seed: 0 },
            n: 1000,
            m: 1000,
            estimators: EstimatorKind::ALL.to_vec(),
            calibrations: vec![CalibrationMethod::None],
            replications: 20,
            seed: 0,
            settings: EstimatorSettings::default(),
            calibration_split: 0.5,
            ci_level: 0.95,
            output: None,
            format: ReportFormat::Json,
            jobs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Class count implied by the data source; files are not read here.
    pub fn synthetic_k(&self) -> Option<usize> {
        match &self.data {
            DataSource::Synthetic { spec, .. } => Some(spec.k()),
            DataSource::Files { .. } => None,
        }
    }

    /// Source rows used for calibration fitting and for estimation.
    pub fn split_sizes(&self) -> (usize, usize) {
        let cal = (self.calibration_split * self.n as f64).round() as usize;
        if cal == 0 {
            (self.n, self.n)
        } else {
            (cal, self.n - cal)
        }
    }

    pub fn validate_for(&self, k: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.replications < 1 {
            return bad("replications must be at least 1".into());
        }
        if self.estimators.is_empty() || self.calibrations.is_empty() {
            return bad("estimator and calibration lists must be non-empty".into());
        }
        if !(0.0..1.0).contains(&self.calibration_split) {
            return bad(format!("calibration_split {} outside [0, 1)", self.calibration_split));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level {} outside (0, 1)", self.ci_level));
        }
        let (cal, est) = self.split_sizes();
        if self.n < k || self.m < k || cal < k || est < k {
            return bad(format!("n = {}, m = {} too small for k = {k} after the calibration split", self.n, self.m));
        }
        if let Some(0) = self.jobs {
            return bad("jobs must be positive".into());
        }
        self.shift.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let ShiftMechanism::TweakOne { tweak_index, .. } = self.shift.mechanism {
            if tweak_index == 0 || tweak_index > k {
                return bad(format!("tweak_index {tweak_index} outside 1..={k}"));
            }
        }
        if let DataSource::Synthetic { spec, misspecification, logit_temperature } = &self.data {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            if !misspecification.is_finite() || !(*logit_temperature > 0.0 && logit_temperature.is_finite()) {
                return bad("misspecification must be finite and logit_temperature positive".into());
            }
        }
        Ok(())
    }
}
