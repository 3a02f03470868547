//! Benchmark harness: repeated pipeline runs over registered test functions,
//! one CSV row per run plus an aggregate summary.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use raycast_evidence::density as suite;
use raycast_evidence::pipeline::{self, PipelineConfig, Preset};
use serde::{Deserialize, Serialize};

/// Bumped whenever the CSV columns change.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 12] = [
    "function",
    "dim",
    "config",
    "run",
    "seed",
    "log_z_true",
    "log_z_est",
    "rel_error",
    "wall_ms",
    "evals",
    "modes",
    "error",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gaussian,
    Multifunction,
    Mixture,
    Failure,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Gaussian,
        Suite::Multifunction,
        Suite::Mixture,
        Suite::Failure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Gaussian => "gaussian",
            Suite::Multifunction => "multifunction",
            Suite::Mixture => "mixture",
            Suite::Failure => "failure",
        }
    }

    pub fn functions(self) -> &'static [&'static str] {
        match self {
            Suite::Gaussian => &["gaussian"],
            Suite::Multifunction => &[
                "gaussian",
                "cigar",
                "correlated",
                "rotated-cigar",
                "mixture4",
            ],
            Suite::Mixture => &["mixture4"],
            Suite::Failure => &[
                "bimodal-asym",
                "student-t-3",
                "cauchy",
                "skew-normal-5",
                "exp-power-0.5",
                "exp-power-1",
                "banana-0.1",
                "banana-0.5",
                "twisted",
                "eggbox",
                "funnel-3",
                "ring",
            ],
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown suite `{s}` (expected gaussian, multifunction, mixture or failure)"
                )
            })
    }
}

/// Default upper dimension per function at desk scale.
pub fn dim_cap(function: &str) -> usize {
    match function {
        "gaussian" => 128,
        "cigar" | "correlated" | "rotated-cigar" | "mixture4" => 32,
        _ => 16,
    }
}

/// Whether `function` is defined at `dim` at all.
fn supports(function: &str, dim: usize) -> bool {
    match function {
        "eggbox" => dim == 2,
        "gaussian" | "cigar" | "correlated" | "rotated-cigar" | "mixture4" => dim >= 1,
        _ => dim >= 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub function: String,
    pub dim: usize,
    pub config: String,
    pub run: usize,
    pub seed: u64,
    pub log_z_true: f64,
    pub log_z_est: f64,
    /// `|exp(log_z_est - log_z_true) - 1|`; NaN for failed runs.
    pub rel_error: f64,
    pub wall_ms: u64,
    pub evals: u64,
    pub modes: usize,
    /// Error class of a failed run, empty on success.
    pub error: String,
}

impl BenchRow {
    pub fn ok(&self) -> bool {
        self.error.is_empty()
    }
}

pub fn rel_error(log_z_est: f64, log_z_true: f64) -> f64 {
    (log_z_est - log_z_true).exp_m1().abs()
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub suite: Suite,
    pub dims: Vec<usize>,
    pub runs: usize,
    pub preset: Preset,
    pub base_seed: u64,
    pub ignore_caps: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub function: String,
    pub dim: usize,
    pub reason: String,
}

impl BenchPlan {
    /// `(function, dim)` pairs to run, in order, and those left out.
    pub fn cases(&self) -> (Vec<(&'static str, usize)>, Vec<Skipped>) {
        let mut cases = vec![];
        let mut skipped = vec![];
        for &f in self.suite.functions() {
            for &d in &self.dims {
                let reason = if !supports(f, d) {
                    Some("not defined at this dimension".to_string())
                } else if !self.ignore_caps && d > dim_cap(f) {
                    Some(format!("above desk-scale cap {}", dim_cap(f)))
                } else {
                    None
                };
                match reason {
                    Some(reason) => skipped.push(Skipped {
                        function: f.to_string(),
                        dim: d,
                        reason,
                    }),
                    None => cases.push((f, d)),
                }
            }
        }
        (cases, skipped)
    }
}

/// Runs one pipeline and turns the outcome into a row.
pub fn run_case(function: &str, dim: usize, preset: Preset, run: usize, seed: u64) -> BenchRow {
    let mut row = BenchRow {
        function: function.to_string(),
        dim,
        config: preset.as_str().to_string(),
        run,
        seed,
        log_z_true: f64::NAN,
        log_z_est: f64::NAN,
        rel_error: f64::NAN,
        wall_ms: 0,
        evals: 0,
        modes: 0,
        error: String::new(),
    };
    let (problem, target) = match suite::by_name(function, dim) {
        Ok(x) => x,
        Err(e) => {
            row.error = e.class().to_string();
            return row;
        }
    };
    row.log_z_true = target.true_log_integral;
    let config = PipelineConfig::preset(preset, seed);
    let start = Instant::now();
    let outcome = pipeline::run(&problem, &config);
    row.wall_ms = start.elapsed().as_millis() as u64;
    row.evals = problem.eval_count();
    match outcome {
        Ok(result) => {
            row.log_z_est = result.log_z;
            row.rel_error = rel_error(result.log_z, target.true_log_integral);
            row.modes = result.modes.len();
            row.evals = result.eval_counts.total;
        }
        Err(e) => row.error = e.class().to_string(),
    }
    row
}

/// Executes every case sequentially; `progress` sees each row as it lands.
pub fn run_plan(plan: &BenchPlan, mut progress: impl FnMut(&BenchRow)) -> Vec<BenchRow> {
    let (cases, _) = plan.cases();
    let mut rows = vec![];
    for (f, d) in cases {
        for r in 0..plan.runs {
            let row = run_case(f, d, plan.preset, r, plan.base_seed.wrapping_add(r as u64));
            progress(&row);
            rows.push(row);
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub function: String,
    pub dim: usize,
    pub runs: usize,
    pub failures: usize,
    /// Over successful runs; NaN when none succeeded.
    pub max_rel_error: f64,
    pub avg_rel_error: f64,
    pub avg_wall_ms: f64,
    pub avg_evals: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub groups: Vec<GroupSummary>,
    pub runs: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub avg_rel_error: f64,
}

fn max_avg(errors: &[f64]) -> (f64, f64) {
    if errors.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let avg = errors.iter().sum::<f64>() / errors.len() as f64;
    (max, avg)
}

/// Per `(function, dim)` group in first-seen order, plus totals.
pub fn summarize(rows: &[BenchRow]) -> Summary {
    let mut keys: Vec<(String, usize)> = vec![];
    for r in rows {
        let k = (r.function.clone(), r.dim);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let groups = keys
        .into_iter()
        .map(|(function, dim)| {
            let g: Vec<&BenchRow> = rows
                .iter()
                .filter(|r| r.function == function && r.dim == dim)
                .collect();
            let errs: Vec<f64> = g.iter().filter(|r| r.ok()).map(|r| r.rel_error).collect();
            let (max_rel_error, avg_rel_error) = max_avg(&errs);
            let n = g.len() as f64;
            GroupSummary {
                runs: g.len(),
                failures: g.iter().filter(|r| !r.ok()).count(),
                max_rel_error,
                avg_rel_error,
                avg_wall_ms: g.iter().map(|r| r.wall_ms as f64).sum::<f64>() / n,
                avg_evals: g.iter().map(|r| r.evals as f64).sum::<f64>() / n,
                function,
                dim,
            }
        })
        .collect();
    let errs: Vec<f64> = rows
        .iter()
        .filter(|r| r.ok())
        .map(|r| r.rel_error)
        .collect();
    let (max_rel_error, avg_rel_error) = max_avg(&errs);
    Summary {
        schema_version: CSV_SCHEMA_VERSION,
        groups,
        runs: rows.len(),
        failures: rows.iter().filter(|r| !r.ok()).count(),
        max_rel_error,
        avg_rel_error,
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>5} {:>5} {:>6} {:>12} {:>12} {:>10} {:>10}",
            "function", "dim", "runs", "failed", "max_err", "avg_err", "avg_ms", "avg_evals"
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<16} {:>5} {:>5} {:>6} {:>12.3e} {:>12.3e} {:>10.1} {:>10.0}",
                g.function,
                g.dim,
                g.runs,
                g.failures,
                g.max_rel_error,
                g.avg_rel_error,
                g.avg_wall_ms,
                g.avg_evals
            )?;
        }
        write!(
            f,
            "total: {} runs, {} failed, max rel error {:.3e}, avg rel error {:.3e}",
            self.runs, self.failures, self.max_rel_error, self.avg_rel_error
        )
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[BenchRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> csv::Result<Vec<BenchRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
