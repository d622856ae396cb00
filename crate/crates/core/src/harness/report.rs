use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibrate::CalibrationMethod;
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::stats::{mean, quantile, trimmed_mean};

use super::bench::ReplicationRow;
use super::config::{ExperimentConfig, ReportFormat};

pub const TRIM_FRACTION: f64 = 0.05;
pub const MSE_CONVENTION: &str = "mean over classes of (omega_hat_i - omega_i)^2, unclipped estimates";
pub const CSV_HEADER: &str = "estimator,calibration,replication,seed,mse,delta_acc,calib_seconds,adapt_seconds,failed";

/// Summary of one (estimator, calibration) cell over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub estimator: EstimatorKind,
    pub calibration: CalibrationMethod,
    pub scored: usize,
    pub failed: usize,
    /// Mean MSE after dropping 5% of the replications from each tail.
    pub mse_trimmed_mean: Option<f64>,
    pub mse_mean: Option<f64>,
    /// 2.5% and 97.5% empirical quantiles of MSE across replications.
    pub replication_band: Option<[f64; 2]>,
    pub mean_delta_accuracy: Option<f64>,
    /// Per class, the share of plug-in intervals covering the true weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plugin_ci_coverage: Option<Vec<f64>>,
}

pub fn aggregate(rows: &[ReplicationRow]) -> Option<Vec<Aggregate>> {
    if rows.is_empty() {
        return None;
    }
    let mut cells: BTreeMap<(EstimatorKind, CalibrationMethod), Vec<&ReplicationRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.estimator, r.calibration)).or_default().push(r);
    }
    let out = cells
        .into_iter()
        .map(|((estimator, calibration), cell)| {
            let ok: Vec<&ReplicationRow> = cell.iter().copied().filter(|r| !r.failed).collect();
            let mses: Vec<f64> = ok.iter().filter_map(|r| r.mse).collect();
            let deltas: Vec<f64> = ok.iter().filter_map(|r| r.adaptation.as_ref().map(|a| a.delta_accuracy)).collect();
            Aggregate {
                estimator,
                calibration,
                scored: ok.len(),
                failed: cell.len() - ok.len(),
                mse_trimmed_mean: trimmed_mean(&mses, TRIM_FRACTION),
                mse_mean: mean(&mses),
                replication_band: quantile(&mses, 0.025).zip(quantile(&mses, 0.975)).map(|(a, b)| [a, b]),
                mean_delta_accuracy: mean(&deltas),
                plugin_ci_coverage: coverage(&ok),
            }
        })
        .collect();
    Some(out)
}

fn coverage(rows: &[&ReplicationRow]) -> Option<Vec<f64>> {
    let pairs: Vec<_> = rows
        .iter()
        .filter_map(|r| Some((r.plugin_ci.as_ref()?, r.true_weights.as_ref()?)))
        .collect();
    let k = pairs.first()?.1.len();
    let share = (0..k)
        .map(|i| {
            let hit = pairs.iter().filter(|(ci, t)| ci.intervals[i].lower <= t[i] && t[i] <= ci.intervals[i].upper).count();
            hit as f64 / pairs.len() as f64
        })
        .collect();
    Some(share)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub library_version: String,
    pub mse_convention: String,
    pub generated_at: String,
    pub config: ExperimentConfig,
    pub rows: Vec<ReplicationRow>,
    pub aggregates: Option<Vec<Aggregate>>,
}

fn now_stamp() -> String {
    let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
    format!("unix:{secs}")
}

/// Numbers compared with a relative tolerance; everything else exactly.
fn values_close(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            x == y || (x - y).abs() <= 1e-9 * x.abs().max(y.abs())
        }
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| values_close(p, q)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(key, v)| y.get(key).is_some_and(|w| values_close(v, w)))
        }
        _ => a == b,
    }
}

fn strip_volatile(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.retain(|key, _| key != "generated_at" && !key.ends_with("_seconds"));
            map.values_mut().for_each(strip_volatile);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

impl BenchmarkReport {
    pub fn new(config: ExperimentConfig, rows: Vec<ReplicationRow>) -> Self {
        let aggregates = aggregate(&rows);
        Self {
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            mse_convention: MSE_CONVENTION.to_string(),
            generated_at: now_stamp(),
            config,
            rows,
            aggregates,
        }
    }

    pub fn all_failed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.failed)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    /// Parses a JSON report and checks the stored aggregates against the rows.
    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| Error::ParseError {
            line: e.line(),
            cause: e.to_string(),
        })?;
        report.check_aggregates()?;
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn check_aggregates(&self) -> Result<()> {
        let stored = serde_json::to_value(&self.aggregates).map_err(|e| Error::Io(e.to_string()))?;
        let fresh = serde_json::to_value(aggregate(&self.rows)).map_err(|e| Error::Io(e.to_string()))?;
        if values_close(&stored, &fresh) {
            Ok(())
        } else {
            Err(Error::AggregateMismatch(format!("stored {stored}, recomputed {fresh}")))
        }
    }

    /// The JSON report without the timestamp and wall-clock fields; equal
    /// configurations and seeds give equal canonical strings.
    pub fn canonical(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Io(e.to_string()))?;
        strip_volatile(&mut v);
        serde_json::to_string(&v).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let fields = [
                r.estimator.name().to_string(),
                r.calibration.name().to_string(),
                r.replication.to_string(),
                r.seed.to_string(),
                opt(r.mse),
                opt(r.adaptation.as_ref().map(|a| a.delta_accuracy)),
                r.calib_seconds.to_string(),
                r.adapt_seconds.to_string(),
                r.failed.to_string(),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

/// Writes the report to `path`, or stdout when absent.
pub fn emit_report(report: &BenchmarkReport, path: Option<&Path>, format: ReportFormat) -> Result<()> {
    let mut text = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv(),
    };
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(out.flush()?)
        }
    }
}
