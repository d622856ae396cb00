use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use labelshift::adapt::{accuracy, adapt_and_predict, bayes_adjust, AdaptationReport};
use labelshift::calibrate::{apply_calibration, fit_calibration, CalibrationMap, CalibrationMethod, OptimizerConfig};
use labelshift::estimators::{estimate, Diagnostics, EstimatorKind};
use labelshift::harness::{
    emit_report, generate_replication, load_table, write_table, BenchmarkReport, ExperimentConfig, PluginCi, Pools,
    ReportFormat,
};
use labelshift::inference::{confidence_intervals, sandwich_covariance};
use labelshift::simulate::ShiftMechanism;
use labelshift::types::{LabelDist, Predictions, ProbMatrix};
use labelshift::{Error, Weights};

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_ALL_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "labelshift", version, about = "Label-shift weight estimation and benchmarking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one synthetic replication as source.csv, target.csv and truth.json.
    Simulate(Overrides),
    /// Estimate importance weights from a source and a target table.
    Estimate(EstimateArgs),
    /// Apply a weights JSON to a prediction table.
    Adapt(AdaptArgs),
    /// Run the Monte-Carlo benchmark.
    Benchmark(Overrides),
    /// Re-check and re-emit an existing JSON report.
    Report(ReportArgs),
}

/// Config file plus flag overrides; flags win.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    rho: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Comma-separated, e.g. `elsa,bbse_soft`.
    #[arg(long)]
    estimators: Option<String>,
    /// Comma-separated, e.g. `none,ts`.
    #[arg(long)]
    calibrations: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Labeled source table.
    #[arg(long)]
    source: PathBuf,
    /// Target table; labels, if present, are only used for scoring.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "elsa")]
    estimators: String,
    #[arg(long, default_value = "none")]
    calibrations: String,
    /// Optional experiment config supplying solver settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    /// JSON weights: a weights object or a plain array.
    #[arg(long)]
    weights: PathBuf,
    /// Probability or logit table.
    #[arg(long)]
    predictions: PathBuf,
    /// Adjusted probabilities with a `prediction` column.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

enum Failure {
    Config(String),
    Data(String),
    AllFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidAlpha(_) | Error::InvalidParameter(_) | Error::InvalidDistribution(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> CliResult<Vec<T>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.parse().map_err(Failure::from)).collect()
}

fn effective_config(o: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.reps {
        cfg.replications = v;
    }
    if let Some(alpha) = o.alpha {
        cfg.shift.mechanism = ShiftMechanism::Dirichlet { alpha };
    }
    if let Some(rho) = o.rho {
        let tweak_index = match cfg.shift.mechanism {
            ShiftMechanism::TweakOne { tweak_index, .. } => tweak_index,
            _ => 4,
        };
        cfg.shift.mechanism = ShiftMechanism::TweakOne { rho, tweak_index };
    }
    if o.alpha.is_some() && o.rho.is_some() {
        return Err(Failure::Config("--alpha and --rho are mutually exclusive".into()));
    }
    if let Some(v) = o.n {
        cfg.n = v;
    }
    if let Some(v) = o.m {
        cfg.m = v;
    }
    if let Some(s) = &o.estimators {
        cfg.estimators = parse_list(s)?;
    }
    if let Some(s) = &o.calibrations {
        cfg.calibrations = parse_list(s)?;
    }
    if let Some(p) = &o.out {
        cfg.output = Some(p.clone());
    }
    if let Some(f) = &o.format {
        cfg.format = f.parse()?;
    }
    if o.jobs.is_some() {
        cfg.jobs = o.jobs;
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn benchmark(o: &Overrides) -> CliResult<()> {
    let cfg = effective_config(o)?;
    let report = labelshift::harness::run_benchmark(&cfg)?;
    emit_report(&report, cfg.output.as_deref(), cfg.format)?;
    if report.all_failed() {
        return Err(Failure::AllFailed);
    }
    Ok(())
}

#[derive(Serialize)]
struct Truth {
    target_dist: Vec<f64>,
    weights: Weights,
}

fn simulate(o: &Overrides) -> CliResult<()> {
    let cfg = effective_config(o)?;
    let dir = cfg.output.clone().ok_or_else(|| Failure::Config("simulate needs --out DIR".into()))?;
    let pools = Pools::load(&cfg)?;
    cfg.validate_for(pools.k(&cfg))?;
    let data = generate_replication(&cfg, &pools, 0)?;
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    let create = |name: &str| {
        let p = dir.join(name);
        std::fs::File::create(&p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))
    };
    write_table(create("source.csv")?, &data.source, Some(&data.source_labels))?;
    write_table(create("target.csv")?, &data.target, Some(&data.target_labels))?;
    let truth = Truth { target_dist: data.target_dist.as_slice().to_vec(), weights: data.truth };
    write_json(&truth, Some(&dir.join("truth.json")))
}

#[derive(Serialize)]
struct EstimateRecord {
    estimator: EstimatorKind,
    calibration: CalibrationMethod,
    calibration_map: CalibrationMap,
    weights: Weights,
    diagnostics: Diagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    plugin_ci: Option<PluginCi>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adaptation: Option<AdaptationReport>,
}

fn estimate_cmd(a: &EstimateArgs) -> CliResult<()> {
    let settings = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.settings,
        None => Default::default(),
    };
    let estimators: Vec<EstimatorKind> = parse_list(&a.estimators)?;
    let calibrations: Vec<CalibrationMethod> = parse_list(&a.calibrations)?;
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(Failure::Config(format!("level {} outside (0, 1)", a.level)));
    }
    let source = load_table(&a.source)?;
    let target = load_table(&a.target)?;
    let labels = source.labels.clone().ok_or_else(|| Failure::Data("source table needs a label column".into()))?;
    let k = source.predictions.classes();
    if target.predictions.classes() != k {
        return Err(Error::DimensionMismatch { expected: k, got: target.predictions.classes() }.into());
    }
    let (sz, tz) = (source.predictions.to_logits(), target.predictions.to_logits());
    let mut records = Vec::new();
    for &method in &calibrations {
        let map = match method {
            CalibrationMethod::None => CalibrationMap::none(),
            m => fit_calibration(m, &sz, &labels, &OptimizerConfig::default())?.map,
        };
        let sp = apply_calibration(&map, &sz)?;
        let tp = apply_calibration(&map, &tz)?;
        for &kind in &estimators {
            let est = estimate(kind, &sp, &labels, &tp, &settings)?;
            let plugin_ci = est.elsa_state.as_ref().and_then(|s| {
                let cov = sandwich_covariance(&sp, &labels, &tp, &est.weights, s.pi, 1e-4).ok()?;
                Some(PluginCi { level: a.level, intervals: confidence_intervals(&cov, a.level), covariance: cov.covariance })
            });
            let adaptation = match &target.labels {
                Some(y) => Some(labelshift::adapt::evaluate(&tp, y, &est.weights, None)?),
                None => None,
            };
            records.push(EstimateRecord {
                estimator: kind,
                calibration: method,
                calibration_map: map.clone(),
                weights: est.weights,
                diagnostics: est.diagnostics,
                plugin_ci,
                adaptation,
            });
        }
    }
    write_json(&records, a.out.as_deref())
}

fn read_weights(path: &Path, k: usize) -> CliResult<Weights> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    if let Ok(w) = serde_json::from_str::<Weights>(&text) {
        return Ok(w);
    }
    let omega: Vec<f64> =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: not a weights JSON: {e}", path.display())))?;
    if omega.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: omega.len() }.into());
    }
    Ok(Weights::from_ratios(omega, LabelDist::uniform(k)?))
}

fn adapt_cmd(a: &AdaptArgs) -> CliResult<()> {
    let table = load_table(&a.predictions)?;
    let k = table.predictions.classes();
    let weights = read_weights(&a.weights, k)?;
    if weights.k() != k {
        return Err(Error::DimensionMismatch { expected: k, got: weights.k() }.into());
    }
    let probs: ProbMatrix = match &table.predictions {
        Predictions::Probs(p) => p.clone(),
        Predictions::Logits(z) => apply_calibration(&CalibrationMap::none(), z)?,
    };
    let adjusted = probs.iter_rows().map(|r| bayes_adjust(r, &weights)).collect::<Result<Vec<_>, _>>()?;
    let preds = adapt_and_predict(&probs, &weights)?;

    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header: Vec<String> = (1..=k).map(|i| format!("p_{i}")).collect();
        header.push("prediction".into());
        let io = |e: csv::Error| Failure::Data(e.to_string());
        w.write_record(&header).map_err(io)?;
        for (row, y) in adjusted.iter().zip(&preds) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push((y + 1).to_string());
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Failure::Data(e.to_string()))?;
    }
    match &a.out {
        Some(p) => std::fs::write(p, &buf).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?,
        None => print!("{}", String::from_utf8_lossy(&buf)),
    }
    if let Some(labels) = &table.labels {
        let raw = accuracy(&probs.argmax(), labels)?;
        let adapted = accuracy(&preds, labels)?;
        let report = AdaptationReport {
            raw_accuracy: raw,
            adapted_accuracy: adapted,
            delta_accuracy: adapted - raw,
            weight_mse: None,
        };
        eprintln!("{}", serde_json::to_string(&report).unwrap_or_default());
    }
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> CliResult<()> {
    let loaded = BenchmarkReport::load(&a.input)?;
    let format = match &a.format {
        Some(f) => f.parse()?,
        None => ReportFormat::Json,
    };
    let mut fresh = BenchmarkReport::new(loaded.config, loaded.rows);
    fresh.generated_at = loaded.generated_at;
    emit_report(&fresh, a.out.as_deref(), format)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Simulate(o) => simulate(o),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Benchmark(o) => benchmark(o),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("data error: {msg}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::AllFailed) => {
            eprintln!("every replication failed");
            ExitCode::from(EXIT_ALL_FAILED)
        }
    }
}
