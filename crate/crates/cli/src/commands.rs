use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use fsll_core::data::write_delimited;
use fsll_core::diagnostics::run_checks;
use fsll_core::protocol::{run_protocol_observed, METRICS_CSV_HEADER};
use fsll_core::{build_schedule, MetricsReport, TrainConfig};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Runs the protocol and writes metrics, checkpoint, prototypes and the resolved config into `out`.
pub fn run(config: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let method = config.method()?;
    let dataset = config.dataset()?;
    let schedule = build_schedule(&dataset, &config.schedule, config.seed)?;
    log::info!(
        "{method}: {} sessions, {} classes, input width {}",
        schedule.sessions().len(),
        dataset.num_classes,
        dataset.dim()
    );
    let run = run_protocol_observed(&schedule, &config.protocol(), method, &mut ())?;

    create_dir(out)?;
    write(&out.join("metrics.csv"), run.report.to_csv())?;
    write(&out.join("metrics.json"), run.report.to_json()?)?;
    run.store.save_checkpoint(&out.join("model.json"))?;
    write(&out.join("prototypes.csv"), run.registry.to_csv())?;
    write(&out.join("config.toml"), config.to_toml()?)?;
    log::info!("wrote run artifacts to {}", out.display());
    Ok(run.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Fraction,
    Lambda,
    #[value(name = "cosine_loss")]
    CosineLoss,
    Regularization,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Fraction => "fraction",
            Axis::Lambda => "lambda",
            Axis::CosineLoss => "cosine_loss",
            Axis::Regularization => "regularization",
        }
    }

    /// Returns a copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut config = base.clone();
        let bad = |what: &str| CliError::Config(format!("{} value {value:?} is not {what}", self.name()));
        let number = || value.parse::<f64>().map_err(|_| bad("a number"));
        let switch = || match value.to_ascii_lowercase().as_str() {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            _ => Err(bad("on/off")),
        };
        match self {
            Axis::Fraction => config.train.fraction = number()?,
            Axis::Lambda => config.train.lambda = number()?,
            Axis::CosineLoss => config.train.cosine_loss = switch()?,
            Axis::Regularization => {
                config.train.lambda = match (switch()?, base.train.lambda) {
                    (false, _) => 0.0,
                    (true, l) if l > 0.0 => l,
                    (true, _) => TrainConfig::default().lambda,
                }
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// One run per value with the shared seed, then `ablation.csv` over all runs.
pub fn ablate(base: &RunConfig, axis: Axis, values: &[String], out: &Path, jobs: Option<usize>) -> Result<String> {
    let values: Vec<&str> = values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Config(format!("{} ablation needs at least one value", axis.name())));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be >= 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    let reports: Vec<Result<MetricsReport>> = pool.install(|| {
        configs
            .par_iter()
            .zip(&values)
            .map(|(config, value)| run(config, &out.join(format!("{}-{}", axis.name(), dir_safe(value)))))
            .collect()
    });

    let mut csv = format!("axis,value,{METRICS_CSV_HEADER}\n");
    for (report, value) in reports.into_iter().zip(&values) {
        for row in report?.to_csv().lines().skip(1) {
            let _ = writeln!(csv, "{},{value},{row}", axis.name());
        }
    }
    write(&out.join("ablation.csv"), &csv)?;
    Ok(csv)
}

fn dir_safe(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// A labelled metrics file read from a run directory.
pub struct LoadedRun {
    pub label: String,
    pub report: MetricsReport,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let path = dir.join("metrics.json");
    let err = |message: String| CliError::Metrics {
        path: path.clone(),
        message,
    };
    let text = fs::read_to_string(&path).map_err(|e| err(e.to_string()))?;
    let report = MetricsReport::from_json(&text).map_err(|e| err(e.to_string()))?;
    let label = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(LoadedRun { label, report })
}

/// Final joint accuracy of the first run minus that of `run`; empty for the first run itself.
pub fn relative_improvement(runs: &[LoadedRun], index: usize) -> Option<f64> {
    let last = |r: &LoadedRun| r.report.final_session().map(|m| m.joint_acc);
    if index == 0 {
        return None;
    }
    Some(last(&runs[0])? - last(&runs[index])?)
}

/// Merges run directories into a per-session table; the first directory is the reference.
pub fn report(dirs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let rows = runs.iter().map(|r| r.report.sessions.len()).max().unwrap_or(0);

    let mut table = String::from("session");
    for r in &runs {
        let _ = write!(table, ",{}", r.label);
    }
    table.push('\n');
    for i in 0..rows {
        let _ = write!(table, "{}", i + 1);
        for r in &runs {
            match r.report.sessions.get(i) {
                Some(m) => {
                    let _ = write!(table, ",{}", m.joint_acc);
                }
                None => table.push(','),
            }
        }
        table.push('\n');
    }

    let mut comparison =
        String::from("run,method,sessions,final_joint_acc,final_base_acc,final_new_acc,relative_improvement\n");
    let mut curves = format!("run,method,{METRICS_CSV_HEADER}\n");
    for (i, r) in runs.iter().enumerate() {
        let last = r.report.final_session();
        let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(
            comparison,
            "{},{},{},{},{},{},{}",
            r.label,
            r.report.method,
            r.report.sessions.len(),
            cell(last.map(|m| m.joint_acc)),
            cell(last.map(|m| m.base_acc)),
            cell(last.and_then(|m| m.new_acc)),
            cell(relative_improvement(&runs, i)),
        );
        for row in r.report.to_csv().lines().skip(1) {
            let _ = writeln!(curves, "{},{},{row}", r.label, r.report.method);
        }
    }

    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join("table.csv"), &table)?;
        write(&out.join("comparison.csv"), &comparison)?;
        write(&out.join("curves.csv"), &curves)?;
    }
    Ok(render(&runs))
}

fn render(runs: &[LoadedRun]) -> String {
    let width = runs.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{:<8}", "session");
    for r in runs {
        let _ = write!(s, "  {:>width$}", r.label);
    }
    s.push('\n');
    let rows = runs.iter().map(|r| r.report.sessions.len()).max().unwrap_or(0);
    for i in 0..rows {
        let _ = write!(s, "{:<8}", i + 1);
        for r in runs {
            match r.report.sessions.get(i) {
                Some(m) => {
                    let _ = write!(s, "  {:>width$.4}", m.joint_acc);
                }
                None => {
                    let _ = write!(s, "  {:>width$}", "-");
                }
            }
        }
        s.push('\n');
    }
    if runs.len() > 1 {
        let _ = write!(s, "{:<8}  {:>width$}", "delta", "");
        for i in 1..runs.len() {
            match relative_improvement(runs, i) {
                Some(d) => {
                    let _ = write!(s, "  {:>+width$.4}", d);
                }
                None => {
                    let _ = write!(s, "  {:>width$}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Writes the configured synthetic corpus to `out/data.csv`.
pub fn gen_data(config: &RunConfig, out: &Path) -> Result<PathBuf> {
    if config.data.file.is_some() {
        return Err(CliError::Config("gen-data needs [data.synthetic], not [data.file]".into()));
    }
    let dataset = config.dataset()?;
    create_dir(out)?;
    let path = out.join("data.csv");
    write_delimited(&dataset, &path)?;
    log::info!(
        "wrote {} rows; read back with data.file.test_per_class = {}",
        dataset.train.len() + dataset.test.len(),
        config.synthetic().test_per_class
    );
    Ok(path)
}

/// Prints one line per check and fails if any check failed.
pub fn check(seed: u64, trials: usize) -> Result<()> {
    let results = run_checks(seed, trials)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}
