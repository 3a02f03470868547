//! Argument parsing and command dispatch.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use raycast_evidence::density as suite;
use raycast_evidence::laplace::HessianChoice;
use raycast_evidence::pipeline::{self, EvidenceResult, PipelineConfig, Preset};

use crate::bench::{self, BenchPlan, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Sets the worker-pool size for parallel likelihood batches.
pub const THREADS_ENV: &str = "RAYCAST_EVIDENCE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "raycast-evidence",
    version,
    about = "Bayesian evidence by Laplace approximation at ray-discovered modes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Fast,
    Slow,
    Conservative,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Fast => Preset::Fast,
            PresetArg::Slow => Preset::Slow,
            PresetArg::Conservative => Preset::Conservative,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HessianArg {
    Auto,
    Diagonal,
    Full,
}

impl From<HessianArg> for HessianChoice {
    fn from(h: HessianArg) -> Self {
        match h {
            HessianArg::Auto => HessianChoice::Auto,
            HessianArg::Diagonal => HessianChoice::Diagonal,
            HessianArg::Full => HessianChoice::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SuiteArg {
    Gaussian,
    Multifunction,
    Mixture,
    Failure,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Gaussian => Suite::Gaussian,
            SuiteArg::Multifunction => Suite::Multifunction,
            SuiteArg::Mixture => Suite::Mixture,
            SuiteArg::Failure => Suite::Failure,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline on one registered test function.
    Run(RunArgs),
    /// Repeat runs over a suite of test functions and dimensions.
    Bench(BenchArgs),
    /// List registered test functions and benchmark suites.
    List,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub problem: String,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, value_enum, default_value = "conservative")]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write the full result as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Append the eigen-reduction report for the dominant mode.
    #[arg(long)]
    pub reduce: bool,
    #[arg(long, value_enum, default_value = "auto")]
    pub hessian: HessianArg,
    /// Flat dimensions contribute log(Δ/2) instead of log Δ.
    #[arg(long)]
    pub half_width_flat: bool,
    /// Record per-stage wall time in the result.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, clap::Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub suite: SuiteArg,
    /// Comma-separated dimensions, e.g. 2,4,8.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, value_enum, default_value = "fast")]
    pub preset: PresetArg,
    /// Seed of the first run; run r uses seed + r.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write rows and the summary as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Run dimensions above the desk-scale caps.
    #[arg(long)]
    pub no_caps: bool,
}

fn usage(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    EXIT_USAGE
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads() {
        return usage(e);
    }
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::List => cmd_list(),
    }
}

pub fn run_summary(result: &EvidenceResult, analytic: f64) -> String {
    let c = &result.eval_counts;
    let mut s = format!(
        "{} d={} (active {}) preset={} seed={}\n",
        result.problem,
        result.dim,
        result.active_dim,
        result.config_echo.preset.map_or("custom", |p| p.as_str()),
        result.seed
    );
    s += &format!("log Z           {:.12}\n", result.log_z);
    s += &format!("log Z vs prior  {:.12}\n", result.log_z_vs_prior);
    s += &format!("analytic log Z  {analytic:.12}\n");
    s += &format!(
        "relative error  {:.3e}\n",
        bench::rel_error(result.log_z, analytic)
    );
    s += &format!("modes           {}\n", result.modes.len());
    s += &format!(
        "evaluations     {} (precheck {}, discovery {}, refinement {}, evidence {}, diagnostics {}, reduction {})\n",
        c.total, c.precheck, c.discovery, c.refinement, c.evidence, c.diagnostics, c.reduction
    );
    if let Some(r) = &result.reduction {
        s += &format!("effective dim   {}\n", r.d_eff);
    }
    if result.unreliable {
        s += "result flagged unreliable\n";
    }
    for w in &result.warnings {
        s += &format!("warning: {w}\n");
    }
    s
}

pub fn cmd_run(a: &RunArgs) -> i32 {
    let (problem, target) = match suite::by_name(&a.problem, a.dim) {
        Ok(x) => x,
        Err(e) => return usage(e),
    };
    let mut config = PipelineConfig::preset(a.preset.into(), a.seed);
    config.reduce = a.reduce;
    config.hessian = a.hessian.into();
    config.half_width_flat = a.half_width_flat;
    config.timing = a.timing;
    let result = match pipeline::run(&problem, &config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_PIPELINE;
        }
    };
    print!("{}", run_summary(&result, target.true_log_integral));
    if let Some(path) = &a.out {
        if let Err(e) = std::fs::write(path, result.to_json()) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return EXIT_IO;
        }
    }
    EXIT_OK
}

pub fn cmd_bench(a: &BenchArgs) -> i32 {
    if a.dims.contains(&0) {
        return usage("dimensions must be positive");
    }
    if a.runs == 0 {
        return usage("--runs must be at least 1");
    }
    let plan = BenchPlan {
        suite: a.suite.into(),
        dims: a.dims.clone(),
        runs: a.runs,
        preset: a.preset.into(),
        base_seed: a.seed,
        ignore_caps: a.no_caps,
    };
    let (cases, skipped) = plan.cases();
    for s in &skipped {
        eprintln!("skipping {} d={}: {}", s.function, s.dim, s.reason);
    }
    if cases.is_empty() {
        return usage("no runnable (function, dimension) pairs");
    }
    let rows = bench::run_plan(&plan, |r| {
        if r.ok() {
            eprintln!(
                "{} d={} run {}: rel error {:.3e}, {} evals, {} ms",
                r.function, r.dim, r.run, r.rel_error, r.evals, r.wall_ms
            );
        } else {
            eprintln!("{} d={} run {}: {}", r.function, r.dim, r.run, r.error);
        }
    });
    let summary = bench::summarize(&rows);
    println!("{summary}");
    if let Some(path) = &a.csv {
        let written = File::create(path)
            .map_err(|e| e.to_string())
            .and_then(|f| bench::write_csv(BufWriter::new(f), &rows).map_err(|e| e.to_string()));
        if let Err(e) = written {
            eprintln!("error: cannot write {}: {e}", path.display());
            return EXIT_IO;
        }
    }
    if let Some(path) = &a.json {
        let doc = serde_json::json!({ "rows": rows, "summary": summary });
        let text = serde_json::to_string_pretty(&doc).expect("bench rows serialize");
        if let Err(e) = std::fs::write(path, text) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return EXIT_IO;
        }
    }
    if summary.failures == summary.runs {
        EXIT_PIPELINE
    } else {
        EXIT_OK
    }
}

pub fn cmd_list() -> i32 {
    println!("problems:");
    for name in suite::PROBLEM_NAMES {
        let dims = match *name {
            "eggbox" => "d = 2",
            "gaussian" | "cigar" | "correlated" | "rotated-cigar" | "mixture4" => "d >= 1",
            _ => "d >= 2",
        };
        println!("  {name:<16} {dims}");
    }
    println!("suites:");
    for s in Suite::ALL {
        println!("  {:<16} {}", s.as_str(), s.functions().join(", "));
    }
    EXIT_OK
}
