//! Command-line front end: mixture/dataset generation, variance
//! curves, training, sampling, and solver benchmarking.
//!
//! Every command takes a master seed (from `--seed` or the config
//! file) and derives all of its randomness from named substreams of
//! it, so identical invocations produce byte-identical outputs.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::write_svl;
use crate::error::{Error, Result};
use crate::gmm::GmmSpec;
use crate::nn::{self, VelocityModel};
use crate::profiler::{
    quantile_sorted, uniform_grid, variance_curve, CfmSource, EstimatorKind, Normalization,
    VarianceCurve,
};
use crate::rng::Stream;
use crate::schedules::Schedule;
use crate::solvers::{self, BaseKind, GridKind, SolverPlan, WtCoefficient};
use crate::svg;
use crate::targets::batch_from_filled;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const EXIT_CODE_HELP: &str = "Exit codes:\n  \
    0  success\n  \
    1  usage or configuration error\n  \
    2  numeric failure (a non-finite value was encountered)";

/// Flow-matching laboratory on Gaussian mixtures.
#[derive(Debug, Parser)]
#[command(
    name = "stable-velocity",
    version,
    about = "Variance-profiled flow-matching on Gaussian mixtures: \
             dataset generation, target-variance curves, velocity-model \
             training, two-regime sampling, and solver benchmarks",
    after_help = EXIT_CODE_HELP
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random Gaussian-mixture spec (and optionally a dataset)
    MakeGmm(MakeGmmArgs),
    /// Estimate the training-target variance over a time grid
    VarianceCurve(VarianceCurveArgs),
    /// Train a velocity model and write a checkpoint plus metrics
    Train(TrainArgs),
    /// Integrate the sampling plan and write endpoint samples
    Sample(SampleArgs),
    /// Compare sampling plans against a fine-step reference integration
    SolverBench(SolverBenchArgs),
}

#[derive(Debug, Args)]
pub struct MakeGmmArgs {
    /// Data dimension
    #[arg(long)]
    pub dim: usize,
    /// Number of mixture components
    #[arg(long)]
    pub modes: usize,
    /// Master seed
    #[arg(long)]
    pub seed: u64,
    /// Output path for the spec JSON
    #[arg(long)]
    pub out: PathBuf,
    /// Also draw this many samples into --dataset
    #[arg(long, requires = "dataset")]
    pub samples: Option<usize>,
    /// Output path for the SVL1 dataset (requires --samples)
    #[arg(long, requires = "samples")]
    pub dataset: Option<PathBuf>,
    /// Assign class labels to components (component k gets class k mod C)
    #[arg(long)]
    pub classes: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    /// Marginal velocity from importance sampling over the dataset
    Empirical,
    /// Exact marginal velocity from the mixture spec
    Oracle,
}

#[derive(Debug, Args)]
pub struct VarianceCurveArgs {
    /// Run-config JSON file
    #[arg(long)]
    pub config: PathBuf,
    /// Time grid as start:stop:count
    #[arg(long, default_value = "0.02:0.98:49")]
    pub grid: String,
    /// Marginal-velocity estimator
    #[arg(long, value_enum)]
    pub estimator: EstimatorArg,
    /// Output CSV path
    #[arg(long)]
    pub out: PathBuf,
    /// Also render the curve to this SVG path
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Override the config file's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run-config JSON file (must contain a `train` section and a `gmm`)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for model.ckpt and metrics.csv
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override the config file's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Run-config JSON file
    #[arg(long)]
    pub config: PathBuf,
    /// Number of endpoints to draw
    #[arg(long)]
    pub count: usize,
    /// Velocity field: "oracle" or a checkpoint path
    #[arg(long)]
    pub velocity: String,
    /// Output SVL1 path; a .summary.json sits next to it
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config file's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SolverBenchArgs {
    /// Run-config JSON file (needs a `gmm` for the exact field)
    #[arg(long)]
    pub config: PathBuf,
    /// JSON array of {"id": ..., "plan": {...}} entries
    #[arg(long)]
    pub plans: PathBuf,
    /// Step count of the reference integration
    #[arg(long, default_value_t = 10_000)]
    pub reference_steps: usize,
    /// Number of endpoint paths per plan
    #[arg(long, default_value_t = 512)]
    pub paths: usize,
    /// Output CSV path
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config file's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

/// One benchmark entry in the `--plans` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedPlan {
    pub id: String,
    pub plan: SolverPlan,
}

/// Endpoint statistics written next to `sample` output.
#[derive(Debug, Serialize, Deserialize)]
pub struct SampleSummary {
    pub count: usize,
    pub dim: usize,
    /// Per-coordinate endpoint mean.
    pub mean: Vec<f64>,
    /// Per-coordinate endpoint variance (unbiased).
    pub variance: Vec<f64>,
    /// Average log density of the endpoints under the mixture spec,
    /// when the config names one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_log_likelihood: Option<f64>,
}

/// Parses and runs the process arguments; returns the exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// [`run`] over explicit arguments (first element is the program name).
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => 2,
                _ => 1,
            }
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MakeGmm(args) => make_gmm(&args),
        Command::VarianceCurve(args) => variance_curve_cmd(&args),
        Command::Train(args) => train_cmd(&args),
        Command::Sample(args) => sample_cmd(&args),
        Command::SolverBench(args) => solver_bench_cmd(&args),
    }
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    Ok(config)
}

fn make_gmm(args: &MakeGmmArgs) -> Result<()> {
    let mut spec = GmmSpec::random_spec(
        args.dim,
        args.modes,
        Stream::new(args.seed).child("make-gmm"),
    )?;
    if let Some(classes) = args.classes {
        if classes == 0 {
            return Err(Error::Config("--classes must be at least 1".into()));
        }
        if classes as usize > args.modes {
            return Err(Error::Config(format!(
                "--classes {classes} exceeds --modes {}; every class needs a component",
                args.modes
            )));
        }
        let labels = (0..args.modes).map(|k| (k as u32) % classes).collect();
        spec = GmmSpec::new(spec.dim, spec.weights, spec.means, spec.variances, Some(labels))?;
    }
    spec.to_json_file(&args.out)?;
    println!("wrote {}", args.out.display());

    if let (Some(samples), Some(dataset)) = (args.samples, &args.dataset) {
        if samples == 0 {
            return Err(Error::Config("--samples must be at least 1".into()));
        }
        let mut rng = Stream::new(args.seed).child("dataset").rng();
        let (points, labels) = spec.sample(&mut rng, samples);
        write_svl(
            dataset,
            points.view(),
            labels.as_deref(),
            args.classes.unwrap_or(0),
        )?;
        println!("wrote {} ({samples} rows)", dataset.display());
    }
    Ok(())
}

/// Parses a `start:stop:count` time-grid description.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = |why: &str| Error::Config(format!("invalid grid {text:?}: {why}"));
    if parts.len() != 3 {
        return Err(bad("expected start:stop:count"));
    }
    let start: f64 = parts[0].parse().map_err(|_| bad("bad start"))?;
    let stop: f64 = parts[1].parse().map_err(|_| bad("bad stop"))?;
    let count: usize = parts[2].parse().map_err(|_| bad("bad count"))?;
    uniform_grid(start, stop, count)
}

fn curve_chart(curve: &VarianceCurve) -> svg::Chart {
    let mut chart = svg::Chart::new(
        format!(
            "conditional-target variance ({}, d={})",
            curve.estimator, curve.dim
        ),
        curve.t.clone(),
        curve.values.clone(),
    );
    chart.x_label = "t".into();
    chart.y_label = match curve.normalization {
        Normalization::Raw => "variance".into(),
        Normalization::SqrtD => "variance / sqrt(d)".into(),
    };
    chart.band = Some(svg::Band {
        lo: curve.q15.clone(),
        hi: curve.q85.clone(),
    });
    chart
}

fn variance_curve_cmd(args: &VarianceCurveArgs) -> Result<()> {
    let config = load_config(&args.config, args.seed)?;
    let grid = parse_grid(&args.grid)?;
    let mc = config.budget();
    let stream = Stream::new(config.seed).child("variance-curve");

    let spec;
    let batch;
    let source = match args.estimator {
        EstimatorArg::Oracle => {
            spec = config.require_gmm().map_err(|_| {
                Error::Config("the oracle estimator needs a `gmm` entry in the config".into())
            })?;
            CfmSource::Oracle(&spec)
        }
        EstimatorArg::Empirical => {
            let dataset = config.require_dataset().map_err(|e| match e {
                Error::Config(_) => Error::Config(
                    "the empirical estimator needs a `dataset` entry in the config".into(),
                ),
                other => other,
            })?;
            batch = batch_from_filled(dataset.points);
            CfmSource::Empirical(&batch)
        }
    };
    let curve = variance_curve(
        &source,
        &config.schedule,
        &grid,
        &mc,
        config.profiler.normalization,
        stream,
    )?;
    fs::write(&args.out, curve.to_csv())?;
    println!("wrote {}", args.out.display());
    if let Some(svg_path) = &args.svg {
        fs::write(svg_path, svg::render(&curve_chart(&curve))?)?;
        println!("wrote {}", svg_path.display());
    }
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let config = load_config(&args.config, args.seed)?;
    let mut train_config = config.train.clone().ok_or_else(|| {
        Error::Config("the train command needs a `train` section in the config".into())
    })?;
    // The run-level master seed governs the whole run; a seed inside
    // the train section is ignored.
    train_config.seed = config.seed;
    let spec = config.require_gmm()?;

    let resume = match &args.resume {
        None => None,
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.header.seed != config.seed {
                return Err(Error::Config(format!(
                    "checkpoint {} was produced with seed {}, config says {}; \
                     resuming would not be reproducible",
                    path.display(),
                    ckpt.header.seed,
                    config.seed
                )));
            }
            Some((ckpt.model, ckpt.header.iteration))
        }
    };
    let resuming = resume.is_some();

    let outcome = nn::train(&config.schedule, &train_config, &spec, Some(&spec), resume)?;
    for event in &outcome.events {
        println!("{event}");
    }

    fs::create_dir_all(&args.out)?;
    let ckpt_path = args.out.join("model.ckpt");
    save_checkpoint(&ckpt_path, &outcome.model, config.seed, outcome.final_iteration)?;

    let metrics_path = args.out.join("metrics.csv");
    let csv = outcome.metrics.to_csv();
    if resuming && metrics_path.is_file() {
        append_metrics(&metrics_path, &csv)?;
    } else {
        fs::write(&metrics_path, csv)?;
    }

    let last_loss = outcome.metrics.rows.last().map(|r| r.loss);
    println!(
        "trained to iteration {}{}",
        outcome.final_iteration,
        last_loss
            .map(|l| format!(" (loss {l:.6})"))
            .unwrap_or_default()
    );
    println!("wrote {}", ckpt_path.display());
    println!("wrote {}", metrics_path.display());
    Ok(())
}

/// Appends the data rows of `csv` to an existing metrics file after
/// checking that the headers agree, so a resumed run extends the log
/// without gaps or column drift.
fn append_metrics(path: &Path, csv: &str) -> Result<()> {
    let existing = fs::read_to_string(path)?;
    let old_header = existing.lines().next().unwrap_or_default();
    let mut lines = csv.lines();
    let new_header = lines.next().unwrap_or_default();
    if old_header != new_header {
        return Err(Error::Config(format!(
            "cannot append to {}: its columns ({old_header}) do not match \
             this run ({new_header})",
            path.display()
        )));
    }
    let mut out = existing;
    if !out.ends_with('\n') {
        out.push('\n');
    }
    for line in lines {
        out.push_str(line);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.json")
}

fn endpoint_summary(endpoints: &Array2<f64>, spec: Option<&GmmSpec>) -> Result<SampleSummary> {
    let n = endpoints.nrows();
    let d = endpoints.ncols();
    let mut mean = vec![0.0; d];
    let mut variance = vec![0.0; d];
    for row in endpoints.rows() {
        for (j, &v) in row.iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    if n > 1 {
        for row in endpoints.rows() {
            for (j, &v) in row.iter().enumerate() {
                variance[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        for v in &mut variance {
            *v /= (n - 1) as f64;
        }
    }
    let mean_log_likelihood = match spec {
        Some(spec) => Some(spec.mean_log_likelihood(endpoints)?),
        None => None,
    };
    Ok(SampleSummary {
        count: n,
        dim: d,
        mean,
        variance,
        mean_log_likelihood,
    })
}

fn sample_cmd(args: &SampleArgs) -> Result<()> {
    let config = load_config(&args.config, args.seed)?;
    let plan = config.solver.unwrap_or_default();
    let schedule = config.schedule;
    let stream = Stream::new(config.seed).child("sample");
    let spec = config.load_gmm()?;

    let endpoints = if args.velocity == "oracle" {
        let spec = spec.as_ref().ok_or_else(|| {
            Error::Config("--velocity oracle needs a `gmm` entry in the config".into())
        })?;
        let source = solvers::OracleVelocity::new(spec, schedule);
        solvers::sample(&schedule, &plan, &source, stream, args.count)?
    } else {
        let ckpt = load_checkpoint(&args.velocity)?;
        if let Some(spec) = &spec {
            if ckpt.model.arch.dim != spec.dim {
                return Err(Error::Config(format!(
                    "checkpoint dimension {} does not match the mixture dimension {}",
                    ckpt.model.arch.dim, spec.dim
                )));
            }
        }
        let model: VelocityModel = ckpt.model;
        solvers::sample(&schedule, &plan, &model, stream, args.count)?
    };

    write_svl(&args.out, endpoints.view(), None, 0)?;
    let summary = endpoint_summary(&endpoints, spec.as_ref())?;
    let summary_out = summary_path(&args.out);
    fs::write(&summary_out, serde_json::to_string_pretty(&summary)?)?;
    println!("wrote {} ({} rows)", args.out.display(), args.count);
    println!("wrote {}", summary_out.display());
    Ok(())
}

/// The fine-step deterministic integration every plan is measured
/// against; shares the caller's stream so priors match path-for-path.
fn reference_plan(schedule: &Schedule, steps: usize) -> SolverPlan {
    SolverPlan {
        xi: schedule.t_min,
        high_steps: steps,
        low_steps: 0,
        base: BaseKind::EulerOde,
        f_beta: 0.0,
        w_t: WtCoefficient::Sigma,
        grid: GridKind::Uniform,
    }
}

fn solver_bench_cmd(args: &SolverBenchArgs) -> Result<()> {
    let config = load_config(&args.config, args.seed)?;
    if args.paths == 0 {
        return Err(Error::Config("--paths must be at least 1".into()));
    }
    if args.reference_steps == 0 {
        return Err(Error::Config("--reference-steps must be at least 1".into()));
    }
    let spec = config.require_gmm()?;
    let schedule = config.schedule;
    let text = fs::read_to_string(&args.plans)
        .map_err(|e| Error::Config(format!("cannot read plans {}: {e}", args.plans.display())))?;
    let plans: Vec<NamedPlan> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid plans {}: {e}", args.plans.display())))?;
    if plans.is_empty() {
        return Err(Error::Config("plans file lists no plans".into()));
    }
    for named in &plans {
        named.plan.validate(&schedule).map_err(|e| {
            Error::Config(format!("plan {:?} is invalid: {e}", named.id))
        })?;
    }

    let source = solvers::OracleVelocity::new(&spec, schedule);
    let stream = Stream::new(config.seed).child("solver-bench");
    let reference = solvers::sample(
        &schedule,
        &reference_plan(&schedule, args.reference_steps),
        &source,
        stream,
        args.paths,
    )?;

    let mut csv = String::from("plan,steps,mean_error,p95_error\n");
    for named in &plans {
        let endpoints = solvers::sample(&schedule, &named.plan, &source, stream, args.paths)?;
        let mut errors: Vec<f64> = endpoints
            .rows()
            .into_iter()
            .zip(reference.rows())
            .map(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        errors.sort_by(|a, b| a.total_cmp(b));
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let p95 = quantile_sorted(&errors, 0.95);
        let steps = named.plan.high_steps + named.plan.low_steps;
        println!("plan {}: {steps} steps, mean error {mean:.6e}", named.id);
        csv.push_str(&format!("{},{steps},{mean},{p95}\n", named.id));
    }
    fs::write(&args.out, csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

// Re-exported so integration tests can reuse the exact estimator-kind
// mapping the CLI applies.
impl EstimatorArg {
    pub fn kind(self) -> EstimatorKind {
        match self {
            EstimatorArg::Empirical => EstimatorKind::EmpiricalSnis,
            EstimatorArg::Oracle => EstimatorKind::Oracle,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_all_subcommands() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from([
            "stable-velocity",
            "make-gmm",
            "--dim",
            "10",
            "--modes",
            "100",
            "--seed",
            "7",
            "--out",
            "spec.json",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::MakeGmm(_)));

        let cli = Cli::try_parse_from([
            "stable-velocity",
            "variance-curve",
            "--config",
            "run.json",
            "--estimator",
            "oracle",
            "--out",
            "curve.csv",
        ])
        .unwrap();
        match cli.command {
            Command::VarianceCurve(a) => {
                assert_eq!(a.grid, "0.02:0.98:49");
                assert_eq!(a.estimator, EstimatorArg::Oracle);
            }
            other => panic!("wrong command {other:?}"),
        }
    }

    #[test]
    fn dataset_flags_must_come_together() {
        let r = Cli::try_parse_from([
            "stable-velocity",
            "make-gmm",
            "--dim",
            "2",
            "--modes",
            "3",
            "--seed",
            "1",
            "--out",
            "s.json",
            "--samples",
            "10",
        ]);
        assert!(r.is_err());
        let r = Cli::try_parse_from([
            "stable-velocity",
            "make-gmm",
            "--dim",
            "2",
            "--modes",
            "3",
            "--seed",
            "1",
            "--out",
            "s.json",
            "--dataset",
            "d.svl",
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.02:0.98:49").unwrap();
        assert_eq!(g.len(), 49);
        assert!((g[0] - 0.02).abs() < 1e-12 && (g[48] - 0.98).abs() < 1e-12);
        assert!(parse_grid("0.1:0.9").is_err());
        assert!(parse_grid("a:0.9:5").is_err());
        assert!(parse_grid("0.9:0.1:5").is_err());
    }

    #[test]
    fn help_and_version_exit_zero_and_parse_errors_exit_one() {
        assert_eq!(run_from(["stable-velocity", "--help"]), 0);
        assert_eq!(run_from(["stable-velocity", "--version"]), 0);
        assert_eq!(run_from(["stable-velocity", "no-such-command"]), 1);
        assert_eq!(run_from(["stable-velocity", "train"]), 1);
    }

    #[test]
    fn help_documents_exit_codes() {
        use clap::CommandFactory;
        let help = Cli::command().render_long_help().to_string();
        assert!(help.contains("Exit codes"), "{help}");
        assert!(help.contains("numeric failure"), "{help}");
    }

    #[test]
    fn summary_statistics_are_correct() {
        let endpoints = ndarray::array![[1.0, 0.0], [3.0, 0.0]];
        let s = endpoint_summary(&endpoints, None).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(s.dim, 2);
        assert_eq!(s.mean, vec![2.0, 0.0]);
        assert_eq!(s.variance, vec![2.0, 0.0]);
        assert!(s.mean_log_likelihood.is_none());
    }

    #[test]
    fn summary_path_sits_next_to_the_output() {
        assert_eq!(
            summary_path(Path::new("runs/endpoints.svl")),
            Path::new("runs/endpoints.summary.json")
        );
    }
}
