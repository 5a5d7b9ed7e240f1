//! `addtree`: run Bayesian-optimization experiments on tree-structured
//! spaces, compare their traces, and run the regression study.
//!
//! Exit status: 0 on success, 1 on user error (bad flags, config or
//! objective), 2 on internal failure.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use addtree_bench::{
    calibrate_rates, compare, run_bo, run_regression_study, summarize, Algorithm, RunError, RunTrace, StepError,
    StudyError,
};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ObjectiveConfig, RunConfig, StudyConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "addtree", version, about = "Bayesian optimization over tree-structured parameter spaces")]
struct Cli {
    /// Worker threads for independent runs (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log verbosity on stderr: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: tracing::Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize an objective with one or more algorithms and seeds, writing
    /// one trace per run.
    Run(RunArgs),
    /// Compare trace directories at chosen iterations.
    Compare(CompareArgs),
    /// Prediction error of the Add-Tree GP against independent per-leaf GPs.
    Regression(RegressionArgs),
}

#[derive(Debug, Args)]
struct SourceArgs {
    /// Builtin objective (jenatton, random).
    #[arg(long, conflicts_with = "tree_spec")]
    objective: Option<String>,
    /// Tree-spec file for an external objective.
    #[arg(long)]
    tree_spec: Option<PathBuf>,
    /// External objective program and arguments (after `--`).
    #[arg(last = true)]
    command: Vec<String>,
}

impl SourceArgs {
    fn apply(self, src: &mut ObjectiveConfig) {
        if let Some(o) = self.objective {
            *src = ObjectiveConfig {
                objective: Some(o),
                ..ObjectiveConfig::default()
            };
        }
        if let Some(p) = self.tree_spec {
            src.objective = None;
            src.tree_spec = Some(p);
        }
        if !self.command.is_empty() {
            src.command = self.command;
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    /// Algorithm (repeatable): addtree, independent, random.
    #[arg(long = "algorithm", value_parser = parse_algorithm)]
    algorithms: Vec<Algorithm>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Comma-separated seeds or a half-open range `a..b`.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<Seeds>,
    #[arg(long)]
    n_init: Option<usize>,
    #[arg(long)]
    theta0: Option<f64>,
    #[arg(long)]
    b0: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    gamma_g: Option<f64>,
    #[arg(long)]
    gamma_b: Option<f64>,
    /// Calibrate the growth rates against the reference regret `t^e`.
    #[arg(long)]
    reference_exponent: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Directories of `.jsonl` traces, one per algorithm.
    #[arg(required = true, num_args = 1..)]
    dirs: Vec<PathBuf>,
    /// Comma-separated iterations to test.
    #[arg(long, value_delimiter = ',', default_value = "40,60,80")]
    iterations: Vec<usize>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RegressionArgs {
    /// TOML study configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    /// Comma-separated training-set sizes.
    #[arg(long, value_delimiter = ',')]
    train_sizes: Option<Vec<usize>>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<Seeds>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad range start in `{s}`"))?;
        let b: u64 = b.trim().parse().map_err(|_| format!("bad range end in `{s}`"))?;
        if a >= b {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok(Seeds((a..b).collect()));
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad seed `{p}`")))
        .collect::<Result<_, _>>()
        .map(Seeds)
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse()
}

fn trace_path(out_dir: &Path, alg: Algorithm, seed: u64) -> PathBuf {
    out_dir.join(alg.as_str()).join(format!("seed-{seed}.jsonl"))
}

fn write_trace(path: &Path, trace: &RunTrace) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    trace.write_jsonl(BufWriter::new(file)).map_err(|e| io_err(path, e))
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    args.source.apply(&mut cfg.source);
    if !args.algorithms.is_empty() {
        cfg.algorithms = args.algorithms;
    }
    if let Some(Seeds(s)) = args.seeds {
        cfg.seeds = s;
    }
    if let Some(v) = args.iterations {
        cfg.bo.iterations = v;
    }
    if let Some(v) = args.n_init {
        cfg.bo.n_init = Some(v);
    }
    if let Some(v) = args.theta0 {
        cfg.bo.theta0 = v;
    }
    if let Some(v) = args.b0 {
        cfg.bo.b0 = v;
    }
    if let Some(v) = args.delta {
        cfg.bo.delta = v;
    }
    if let Some(v) = args.gamma_g {
        cfg.bo.gamma_g = v;
    }
    if let Some(v) = args.gamma_b {
        cfg.bo.gamma_b = v;
    }
    if let Some(v) = args.reference_exponent {
        cfg.reference_exponent = Some(v);
    }
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    cfg.resolve();
    cfg.validate()?;
    let objective = cfg.source.build()?;
    let digest = cfg.digest();

    let mut bo = cfg.bo.clone();
    if let Some(e) = cfg.reference_exponent {
        let (g, b) = calibrate_rates(objective.as_ref(), &bo, cfg.seeds[0], e).map_err(run_error)?;
        tracing::info!(gamma_g = g, gamma_b = b, "calibrated growth rates");
        bo.gamma_g = g;
        bo.gamma_b = b;
    }

    for alg in &cfg.algorithms {
        let dir = cfg.out_dir.join(alg.as_str());
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    let stored = cfg.out_dir.join("run-config.json");
    fs::write(&stored, serde_json::to_vec_pretty(&cfg).expect("config serializes")).map_err(|e| io_err(&stored, e))?;

    let jobs: Vec<(Algorithm, u64)> = cfg
        .algorithms
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results: Vec<Result<RunTrace, CliError>> = jobs
        .par_iter()
        .map(|&(alg, seed)| {
            let path = trace_path(&cfg.out_dir, alg, seed);
            match run_bo(objective.as_ref(), alg, &bo, seed) {
                Ok(mut trace) => {
                    trace.header.config_digest = digest.clone();
                    write_trace(&path, &trace)?;
                    Ok(trace)
                }
                Err(e) => {
                    let mut partial = (*e.partial).clone();
                    partial.header.config_digest = digest.clone();
                    write_trace(&path, &partial)?;
                    Err(run_error(e))
                }
            }
        })
        .collect();

    let mut first_err = None;
    for ((alg, seed), r) in jobs.iter().zip(results) {
        match r {
            Ok(t) => {
                let best = t.final_incumbent().expect("runs have at least one iteration");
                match t.header.known_optimum {
                    Some(opt) => println!("{alg} seed {seed}: final incumbent {best:.6e} (gap {:.3e})", best - opt),
                    None => println!("{alg} seed {seed}: final incumbent {best:.6e}"),
                }
            }
            Err(e) => {
                eprintln!("{alg} seed {seed}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn run_error(e: RunError) -> CliError {
    let msg = e.to_string();
    match e.source {
        StepError::Objective(_) | StepError::Config(_) | StepError::Point(_) => CliError::User(msg),
        StepError::Gp(_) | StepError::Acquisition(_) => CliError::Internal(msg),
    }
}

fn load_dir(dir: &Path) -> Result<Vec<RunTrace>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::User(format!("trace directory `{}`: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::User(format!("no .jsonl traces in `{}`", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let f = File::open(p).map_err(|e| CliError::User(format!("{}: {e}", p.display())))?;
            RunTrace::read_jsonl(BufReader::new(f)).map_err(|e| CliError::User(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let mut groups = BTreeMap::new();
    for dir in &args.dirs {
        let base = dir.display().to_string();
        let mut label = base.clone();
        let mut k = 2;
        while groups.contains_key(&label) {
            label = format!("{base}#{k}");
            k += 1;
        }
        groups.insert(label, load_dir(dir)?);
    }
    let report = compare(&groups, &args.iterations).map_err(|e| CliError::User(e.to_string()))?;
    print!("{report}");
    if let Some(p) = &args.json {
        fs::write(p, serde_json::to_vec_pretty(&report).expect("report serializes")).map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

fn cmd_regression(args: RegressionArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => StudyConfig::load(p)?,
        None => StudyConfig::default(),
    };
    args.source.apply(&mut cfg.source);
    if cfg.source.objective.is_none() && cfg.source.tree_spec.is_none() {
        cfg.source.objective = Some("jenatton".into());
    }
    if let Some(v) = args.train_sizes {
        cfg.study.train_sizes = v;
    }
    if let Some(v) = args.test_size {
        cfg.study.test_size = v;
    }
    if let Some(Seeds(s)) = args.seeds {
        cfg.study.seeds = s;
    }
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    cfg.study.validate().map_err(CliError::User)?;
    let objective = cfg.source.build()?;
    let records = run_regression_study(objective.as_ref(), &cfg.study).map_err(|e| match e {
        StudyError::Objective(_) | StudyError::Config(_) | StudyError::Point(_) => CliError::User(e.to_string()),
        _ => CliError::Internal(e.to_string()),
    })?;
    let rows = summarize(&records);

    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let per_seed = cfg.out_dir.join("regression.csv");
    let summary = cfg.out_dir.join("regression-summary.csv");
    let f = File::create(&per_seed).map_err(|e| io_err(&per_seed, e))?;
    addtree_bench::regression::write_csv(f, &records).map_err(|e| io_err(&per_seed, e))?;
    let f = File::create(&summary).map_err(|e| io_err(&summary, e))?;
    addtree_bench::regression::write_csv(f, &rows).map_err(|e| io_err(&summary, e))?;

    println!("{:<12} {:>7} {:>18}", "method", "n_train", "median log10 MSE");
    for r in &rows {
        println!("{:<12} {:>7} {:>18.4}", r.method.as_str(), r.n_train, r.median_log10_mse);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_max_level(cli.log_level)
        .with_writer(std::io::stderr)
        .init();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Regression(a) => cmd_regression(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
