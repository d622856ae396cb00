use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{evaluate, weight_mse, AdaptationReport};
use crate::calibrate::{apply_calibration, fit_calibration, CalibrationMap, CalibrationMethod, OptimizerConfig};
use crate::error::{Error, Result};
use crate::estimators::{estimate, Diagnostics, EstimatorKind, EstimatorSettings};
use crate::inference::{confidence_intervals, sandwich_covariance, Interval};
use crate::rng::derive_seed;
use crate::simulate::{bootstrap_indices, posterior_logits, resample_indices, sample_features, ShiftSpec};
use crate::types::{class_proportions, LabelDist, LogitMatrix, Predictions, ProbMatrix, Weights};

use super::config::{DataSource, ExperimentConfig};
use super::report::BenchmarkReport;
use super::table::{load_table, Table};

/// Finite-difference step for the plug-in covariance Jacobian.
pub const CI_FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginCi {
    pub level: f64,
    /// Row-major `(k-1) x (k-1)`.
    pub covariance: Vec<Vec<f64>>,
    pub intervals: Vec<Interval>,
}

/// One estimator under one calibration on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub estimator: EstimatorKind,
    pub calibration: CalibrationMethod,
    pub replication: usize,
    pub seed: u64,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub true_weights: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub mse: Option<f64>,
    pub adaptation: Option<AdaptationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_map: Option<CalibrationMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plugin_ci: Option<PluginCi>,
    pub calib_seconds: f64,
    pub adapt_seconds: f64,
}

impl ReplicationRow {
    fn failure(estimator: EstimatorKind, calibration: CalibrationMethod, replication: usize, seed: u64, e: &Error) -> Self {
        Self {
            estimator,
            calibration,
            replication,
            seed,
            failed: true,
            error: Some(e.to_string()),
            true_weights: None,
            weights: None,
            mse: None,
            adaptation: None,
            calibration_map: None,
            diagnostics: None,
            plugin_ci: None,
            calib_seconds: 0.0,
            adapt_seconds: 0.0,
        }
    }
}

/// Data for one replication, before calibration.
#[derive(Debug, Clone)]
pub struct ReplicationData {
    pub source: Predictions,
    pub source_labels: Vec<usize>,
    pub target: Predictions,
    pub target_labels: Vec<usize>,
    pub target_dist: LabelDist,
    /// Population importance weights of this replication.
    pub truth: Weights,
}

/// Loaded pools for files mode; nothing for synthetic data.
pub enum Pools {
    Synthetic,
    Files { source: Table, source_labels: Vec<usize>, target: Table, target_labels: Vec<usize> },
}

impl Pools {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.data {
            DataSource::Synthetic { .. } => Ok(Pools::Synthetic),
            DataSource::Files { source, target } => {
                let s = load_table(source)?;
                let t = load_table(target)?;
                if s.predictions.classes() != t.predictions.classes() {
                    return Err(Error::DimensionMismatch { expected: s.predictions.classes(), got: t.predictions.classes() });
                }
                let need = |t: &Table, what: &str| {
                    t.labels.clone().ok_or_else(|| Error::ShapeMismatch(format!("{what} table needs a label column")))
                };
                let source_labels = need(&s, "source")?;
                let target_labels = need(&t, "target")?;
                Ok(Pools::Files { source: s, source_labels, target: t, target_labels })
            }
        }
    }

    pub fn k(&self, cfg: &ExperimentConfig) -> usize {
        match self {
            Pools::Synthetic => cfg.synthetic_k().unwrap_or(0),
            Pools::Files { source, .. } => source.predictions.classes(),
        }
    }
}

pub fn replication_seed(cfg: &ExperimentConfig, replication: usize) -> u64 {
    derive_seed(cfg.seed, replication as u64)
}

/// Draws the shift and the source/target samples of one replication.
pub fn generate_replication(cfg: &ExperimentConfig, pools: &Pools, replication: usize) -> Result<ReplicationData> {
    let seed = replication_seed(cfg, replication);
    let k = pools.k(cfg);
    let shift = ShiftSpec { mechanism: cfg.shift.mechanism.clone(), seed: derive_seed(seed, 1) };
    let target_dist = shift.draw(k)?;
    match (&cfg.data, pools) {
        (DataSource::Synthetic { spec, misspecification, logit_temperature }, _) => {
            let prior = &spec.source_prior;
            let (xs, ys) = sample_features(spec, prior, cfg.n, derive_seed(seed, 2))?;
            let (xt, yt) = sample_features(spec, &target_dist, cfg.m, derive_seed(seed, 3))?;
            let classifier = if *misspecification == 0.0 { spec.clone() } else { spec.perturbed(*misspecification) };
            let logits = |x: &[Vec<f64>]| posterior_logits(&classifier, prior, x, *logit_temperature);
            Ok(ReplicationData {
                source: Predictions::Logits(logits(&xs)?),
                source_labels: ys,
                target: Predictions::Logits(logits(&xt)?),
                target_labels: yt,
                truth: Weights::from_distributions(&target_dist, prior)?,
                target_dist,
            })
        }
        (DataSource::Files { .. }, Pools::Files { source, source_labels, target, target_labels }) => {
            let props = class_proportions(source_labels, k)?;
            let si = bootstrap_indices(source_labels.len(), cfg.n, derive_seed(seed, 2));
            let ti = resample_indices(target_labels, &target_dist, cfg.m, derive_seed(seed, 3))?;
            Ok(ReplicationData {
                source: source.predictions.select(&si),
                source_labels: si.iter().map(|&i| source_labels[i]).collect(),
                target: target.predictions.select(&ti),
                target_labels: ti.iter().map(|&i| target_labels[i]).collect(),
                truth: Weights::from_distributions(&target_dist, &props)?,
                target_dist,
            })
        }
        _ => Err(Error::Config("pools do not match the data source".into())),
    }
}

fn first_rows(p: &Predictions, range: std::ops::Range<usize>) -> Predictions {
    p.select(&range.collect::<Vec<_>>())
}

struct Calibrated {
    map: CalibrationMap,
    source: ProbMatrix,
    labels: Vec<usize>,
    target: ProbMatrix,
    seconds: f64,
}

fn calibrate_stage(cfg: &ExperimentConfig, data: &ReplicationData, method: CalibrationMethod) -> Result<Calibrated> {
    let start = Instant::now();
    let (cal, _) = cfg.split_sizes();
    let n = data.source.rows();
    let (cal_range, est_range) = if cal >= n { (0..n, 0..n) } else { (0..cal, cal..n) };
    let est_logits = first_rows(&data.source, est_range.clone()).to_logits();
    let target_logits: LogitMatrix = data.target.to_logits();
    let map = if method == CalibrationMethod::None {
        CalibrationMap::none()
    } else {
        let cal_logits = first_rows(&data.source, cal_range.clone()).to_logits();
        fit_calibration(method, &cal_logits, &data.source_labels[cal_range], &OptimizerConfig::default())?.map
    };
    let source = apply_calibration(&map, &est_logits)?;
    let target = apply_calibration(&map, &target_logits)?;
    Ok(Calibrated {
        map,
        source,
        labels: data.source_labels[est_range].to_vec(),
        target,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn plugin_ci(c: &Calibrated, weights: &Weights, pi: f64, level: f64) -> Option<PluginCi> {
    let est = sandwich_covariance(&c.source, &c.labels, &c.target, weights, pi, CI_FD_STEP).ok()?;
    Some(PluginCi { level, intervals: confidence_intervals(&est, level), covariance: est.covariance })
}

fn score_row(
    cfg: &ExperimentConfig,
    data: &ReplicationData,
    c: &Calibrated,
    kind: EstimatorKind,
    settings: &EstimatorSettings,
    row: &mut ReplicationRow,
) -> Result<()> {
    let start = Instant::now();
    let est = estimate(kind, &c.source, &c.labels, &c.target, settings)?;
    let adaptation = evaluate(&c.target, &data.target_labels, &est.weights, Some(&data.truth))?;
    row.adapt_seconds = start.elapsed().as_secs_f64();
    row.mse = Some(weight_mse(&est.weights, &data.truth)?);
    row.weights = Some(est.weights.omega().to_vec());
    row.adaptation = Some(adaptation);
    if let Some(state) = &est.elsa_state {
        row.plugin_ci = plugin_ci(c, &est.weights, state.pi, cfg.ci_level);
    }
    row.diagnostics = Some(est.diagnostics);
    Ok(())
}

/// All rows of one replication. Failures are recorded on the rows.
pub fn run_replication(cfg: &ExperimentConfig, pools: &Pools, replication: usize) -> Vec<ReplicationRow> {
    let seed = replication_seed(cfg, replication);
    let data = generate_replication(cfg, pools, replication);
    let mut rows = Vec::with_capacity(cfg.calibrations.len() * cfg.estimators.len());
    for &method in &cfg.calibrations {
        let calibrated = data.as_ref().map_err(Clone::clone).and_then(|d| calibrate_stage(cfg, d, method));
        for &kind in &cfg.estimators {
            let (d, c) = match (&data, &calibrated) {
                (Ok(d), Ok(c)) => (d, c),
                (Err(e), _) | (_, Err(e)) => {
                    rows.push(ReplicationRow::failure(kind, method, replication, seed, e));
                    continue;
                }
            };
            let mut row = ReplicationRow {
                true_weights: Some(d.truth.omega().to_vec()),
                calibration_map: Some(c.map.clone()),
                calib_seconds: c.seconds,
                ..ReplicationRow::failure(kind, method, replication, seed, &Error::ZeroMass)
            };
            row.failed = false;
            row.error = None;
            if let Err(e) = score_row(cfg, d, c, kind, &cfg.settings, &mut row) {
                row.failed = true;
                row.error = Some(e.to_string());
                row.weights = None;
                row.mse = None;
                row.adaptation = None;
                row.diagnostics = None;
                row.plugin_ci = None;
            }
            rows.push(row);
        }
    }
    rows
}

/// Runs every replication on a pool of `cfg.jobs` threads (default: all
/// cores). Per-replication seeds make the result independent of scheduling.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkReport> {
    let pools = Pools::load(cfg)?;
    cfg.validate_for(pools.k(cfg))?;
    let jobs = cfg.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut rows: Vec<ReplicationRow> = pool.install(|| {
        (0..cfg.replications).into_par_iter().flat_map_iter(|r| run_replication(cfg, &pools, r)).collect()
    });
    rows.sort_by(|a, b| {
        (a.estimator, a.calibration, a.replication).cmp(&(b.estimator, b.calibration, b.replication))
    });
    Ok(BenchmarkReport::new(cfg.clone(), rows))
}
