//! `skipscale` command-line runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use skipscale::checkpoint::load_checkpoint;
use skipscale::experiments::{run_experiment, summary_text, write_outputs, ExperimentConfig};
use skipscale::plot::plot_run_dir;
use skipscale::suites::{
    evaluate_experiment, run_math_checks, run_theory_checks, write_suite_outputs, CheckOutcome, MathCheckConfig,
    SuiteReport, TheoryCheckConfig,
};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

const OUT_ENV: &str = "SKIPSCALE_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Parser, Debug)]
#[command(
    name = "skipscale",
    version,
    about = "Scaled long skip connection experiments and checks",
    after_long_help = "Exit codes: 0 success, 1 check failure, 2 usage error, 3 config error, 4 runtime error.\n\
                       Output directory: --out, else $SKIPSCALE_OUT, else ./runs. Existing run directories are never overwritten."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train models per the experiment config and write a run directory.
    #[command(after_long_help = schema_help::<ExperimentConfig>(EXPERIMENT_NOTES))]
    Experiment(CommonArgs),
    /// Scaling-law, robustness and noise-injection checks.
    #[command(after_long_help = schema_help::<TheoryCheckConfig>(""))]
    TheoryCheck(CommonArgs),
    /// Monte-Carlo and closed-form checks of the supporting distributional facts.
    #[command(after_long_help = schema_help::<MathCheckConfig>(""))]
    MathCheck(CommonArgs),
    /// Print the structure and parameter norms of a checkpoint.
    Inspect { checkpoint: PathBuf },
    /// Render SVG plots for a run directory into <run-dir>/plots.
    Plot { run_dir: PathBuf },
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML config file; omitted means all defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replace the seed (experiments: the seed list becomes [SEED]).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output base directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for experiment cells. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Dotted `key=value` override applied after the file, e.g. `model.N=12`.
    /// Values are parsed as TOML, falling back to a plain string.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Allow κ > 1 in experiment policies.
    #[arg(long)]
    pub unsafe_kappa: bool,
}

const EXPERIMENT_NOTES: &str = "kind: oscillation | convergence | direction | kappa-sweep | m0-tracking\n\
policies: unit, universal:K, cs:K, reverse-cs:K, ls, ls-per-connection\n\
convergence needs exactly one of convergence.threshold or convergence.threshold_factor\n\
optimizer.kind: adamw | sgd; data.kind: uniform | corpus\n";

fn schema_help<T: Default + Serialize>(notes: &str) -> String {
    let body = toml::to_string_pretty(&T::default()).unwrap_or_default();
    format!("Config schema (TOML, every key optional, shown with defaults; unknown keys are errors):\n\n{body}\n{notes}")
}

#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

/// Parses `raw` as a TOML value, or keeps it as a string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not KEY=VALUE"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        anyhow::bail!("override `{spec}` has an empty key segment");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override `{spec}`: `{p}` is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn load_config<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T, CliError> {
    let mut table = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| config_err(anyhow::anyhow!("{}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| config_err(anyhow::anyhow!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o).map_err(config_err)?;
    }
    T::deserialize(table).map_err(|e| {
        let src = path.map(|p| p.display().to_string()).unwrap_or_else(|| "config".into());
        config_err(anyhow::anyhow!("{src}: {e}"))
    })
}

fn out_base(args: &CommonArgs) -> PathBuf {
    args.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn print_checks(checks: &[CheckOutcome]) {
    for c in checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
}

fn exit_for(checks: &[CheckOutcome]) -> u8 {
    if checks.iter().all(|c| c.passed) {
        0
    } else {
        EXIT_CHECK_FAILED
    }
}

fn run_experiment_cmd(args: &CommonArgs) -> Result<u8, CliError> {
    let mut cfg: ExperimentConfig = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if args.unsafe_kappa {
        cfg.unsafe_kappa = true;
    }
    cfg.validate().map_err(config_err)?;
    if args.jobs == 0 {
        return Err(config_err(anyhow::anyhow!("--jobs must be >= 1")));
    }
    let out = run_experiment(&cfg, args.jobs).map_err(runtime_err)?;
    let dir = write_outputs(&out, &out_base(args)).map_err(runtime_err)?;
    print!("{}", summary_text(&out));
    let checks = if cfg.acceptance.enabled {
        evaluate_experiment(&out, &cfg.acceptance)
    } else {
        Vec::new()
    };
    if !checks.is_empty() {
        let rep = SuiteReport {
            checks: checks.clone(),
            artifacts: Vec::new(),
        };
        std::fs::write(dir.join("acceptance.csv"), rep.checks_csv()).map_err(runtime_err)?;
        print_checks(&checks);
    }
    for r in out.records.iter().filter(|r| r.error.is_some()) {
        eprintln!("run {} failed: {}", r.label(), r.error.as_deref().unwrap_or_default());
    }
    println!("wrote {}", dir.display());
    Ok(exit_for(&checks))
}

fn run_suite<C, F>(name: &str, args: &CommonArgs, set_seed: fn(&mut C, u64), validate: fn(&C) -> skipscale::Result<()>, run: F) -> Result<u8, CliError>
where
    C: DeserializeOwned + Serialize,
    F: FnOnce(&C) -> skipscale::Result<SuiteReport>,
{
    let mut cfg: C = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        set_seed(&mut cfg, s);
    }
    validate(&cfg).map_err(config_err)?;
    let rep = run(&cfg).map_err(runtime_err)?;
    let dir = write_suite_outputs(name, &cfg, &rep, &out_base(args)).map_err(runtime_err)?;
    print_checks(&rep.checks);
    println!("wrote {}", dir.display());
    Ok(exit_for(&rep.checks))
}

fn inspect(path: &Path) -> Result<u8, CliError> {
    let model = load_checkpoint(path).map_err(|e| runtime_err(anyhow::anyhow!("{}: {e}", path.display())))?;
    println!(
        "m={} l={} N={} activation={:?} policy={}",
        model.m,
        model.l,
        model.n,
        model.activation,
        model.policy.descriptor()
    );
    if let Some(k) = model.policy.fixed_coefficients(model.n) {
        println!("coefficients {k:?}");
    }
    let names = model.param_names();
    println!("{} tensors, {} matrices", names.len(), model.matrix_count());
    for (name, p) in names.iter().zip(model.params()) {
        let norm = p.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "  {name:<24} {:?} frob={norm:.6e}{}",
            p.shape(),
            if p.requires_grad { "" } else { " frozen" }
        );
    }
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<u8, CliError> {
    match &cli.command {
        Command::Experiment(a) => run_experiment_cmd(a),
        Command::TheoryCheck(a) => run_suite("theory-check", a, |c: &mut TheoryCheckConfig, s| c.seed = s, TheoryCheckConfig::validate, run_theory_checks),
        Command::MathCheck(a) => run_suite("math-check", a, |c: &mut MathCheckConfig, s| c.seed = s, MathCheckConfig::validate, run_math_checks),
        Command::Inspect { checkpoint } => inspect(checkpoint),
        Command::Plot { run_dir } => {
            let files = plot_run_dir(run_dir).map_err(runtime_err)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let (CliError::Config(inner) | CliError::Runtime(inner)) = &e;
            eprintln!("error: {inner:#}");
            ExitCode::from(e.code())
        }
    }
}
