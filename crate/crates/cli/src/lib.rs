//! Experiment runner behind the `auv-mppi` binary.

pub mod experiment;
pub mod output;
pub mod plots;

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use auv_mppi::config::{load_scenario, ConfigError, ResolvedScenario, SweepSection};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use experiment::{ExperimentKind, MetricsRow, RunSpec, TimingRow, METRICS_COLUMNS};
use experiment::{plan, run_one, time_control_steps, RunError};
use output::{write_atomic, write_csv, write_json};

pub const VERSION: &str = env!("AUV_MPPI_VERSION");
pub const WORKERS_ENV: &str = "AUV_MPPI_WORKERS";

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENARIO_FILE: &str = "scenario.toml";
pub const VEHICLE_FILE: &str = "vehicle.toml";

pub const SUMMARY_COLUMNS: [&str; 18] = [
    "rank",
    "label",
    "param",
    "controller",
    "variant",
    "runs",
    "median_ss_x",
    "median_ss_y",
    "median_ss_z",
    "median_ss_yaw",
    "median_ss_position",
    "median_settling_time",
    "settled_runs",
    "median_overshoot_pct",
    "max_collisions",
    "goal_reached_runs",
    "diverged_runs",
    "stopped_runs",
];

pub const TIMING_COLUMNS: [&str; 8] = [
    "num_samples",
    "horizon",
    "steps",
    "workers",
    "mean_ms",
    "median_ms",
    "p95_ms",
    "max_ms",
];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("invalid experiment: {0}")]
    Plan(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{failed} of {total} runs diverged or failed; see {manifest}")]
    Diverged {
        failed: usize,
        total: usize,
        manifest: PathBuf,
    },
    #[error(transparent)]
    Plot(#[from] plots::PlotError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged { .. } => 2,
            _ => 1,
        }
    }
}

/// What to run and where to put it.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub scenario: PathBuf,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    /// Replaces the scenario's `mppi.seed` when set.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Everything needed to repeat an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub experiment: ExperimentKind,
    pub scenario_source: PathBuf,
    pub overrides: Vec<String>,
    pub seed: u64,
    /// Standalone copies of the resolved inputs, relative to the output dir.
    pub scenario_file: String,
    pub vehicle_file: String,
    pub vehicle_fingerprint: String,
    pub workers: usize,
    pub sweep: SweepSection,
    pub runs_planned: usize,
    pub runs_finished: usize,
    pub status: RunStatus,
    pub failures: Vec<RunFailure>,
    /// Command line that repeats the experiment from the output directory.
    pub reproduce: String,
}

/// One row of the ranked summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub rank: usize,
    pub label: String,
    pub param: f64,
    pub controller: String,
    pub variant: String,
    pub runs: usize,
    pub median_ss_x: f64,
    pub median_ss_y: f64,
    pub median_ss_z: f64,
    pub median_ss_yaw: f64,
    pub median_ss_position: f64,
    pub median_settling_time: Option<f64>,
    pub settled_runs: usize,
    pub median_overshoot_pct: f64,
    pub max_collisions: usize,
    pub goal_reached_runs: usize,
    pub diverged_runs: usize,
    pub stopped_runs: usize,
}

/// Median of a non-empty slice; NaN for an empty one.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Groups rows by configuration and ranks the groups by median steady-state
/// position error, then median settling time (unsettled groups last).
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<Vec<&MetricsRow>> = Vec::new();
    for r in rows {
        let key = |m: &MetricsRow| (m.label.clone(), m.controller.clone(), m.variant.clone());
        match groups.iter_mut().find(|g| key(g[0]) == key(r)) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|g| {
            let col = |f: fn(&MetricsRow) -> f64| median(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let settled: Vec<f64> = g.iter().filter_map(|r| r.settling_time).collect();
            SummaryRow {
                rank: 0,
                label: g[0].label.clone(),
                param: g[0].param,
                controller: g[0].controller.clone(),
                variant: g[0].variant.clone(),
                runs: g.len(),
                median_ss_x: col(|r| r.ss_x),
                median_ss_y: col(|r| r.ss_y),
                median_ss_z: col(|r| r.ss_z),
                median_ss_yaw: col(|r| r.ss_yaw),
                median_ss_position: col(|r| (r.ss_x.powi(2) + r.ss_y.powi(2) + r.ss_z.powi(2)).sqrt()),
                // a group only gets a settling time when most of its runs settle
                median_settling_time: (2 * settled.len() > g.len()).then(|| median(&settled)),
                settled_runs: settled.len(),
                median_overshoot_pct: col(|r| r.overshoot_pct),
                max_collisions: g.iter().map(|r| r.collision_count).max().unwrap_or(0),
                goal_reached_runs: g.iter().filter(|r| r.goal_reached).count(),
                diverged_runs: g.iter().filter(|r| r.diverged).count(),
                stopped_runs: g.iter().filter(|r| r.stopped).count(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.median_ss_position
            .total_cmp(&b.median_ss_position)
            .then_with(|| {
                let s = |r: &SummaryRow| r.median_settling_time.unwrap_or(f64::INFINITY);
                s(a).total_cmp(&s(b))
            })
    });
    for (i, r) in out.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    out
}

fn reproduce_command(spec: &ExperimentSpec, seed: u64) -> String {
    format!(
        "auv-mppi run --experiment {} --scenario {SCENARIO_FILE} --seed {seed} --out <dir>",
        spec.kind
    )
}

/// Runs an experiment on the current rayon pool and writes its artifacts.
/// Metrics and the manifest are rewritten after every finished run, so an
/// interrupted experiment leaves consistent partial results.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Outcome, CliError> {
    let resolved = load_scenario(&spec.scenario, &spec.overrides)?;
    let seed = spec.seed.unwrap_or(resolved.mppi.seed);
    let runs = match spec.kind {
        ExperimentKind::Timing => Vec::new(),
        kind => plan(kind, &resolved, seed).map_err(CliError::Plan)?,
    };
    let out = spec.out.as_path();
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join(SCENARIO_FILE), resolved.standalone_toml(VEHICLE_FILE).as_bytes())?;
    write_atomic(&out.join(VEHICLE_FILE), resolved.vehicle_toml.as_bytes())?;

    let planned = if spec.kind == ExperimentKind::Timing {
        resolved.file.sweep.k_values.len()
    } else {
        runs.len()
    };
    let manifest = Manifest {
        tool: "auv-mppi".into(),
        version: VERSION.into(),
        experiment: spec.kind,
        scenario_source: spec.scenario.clone(),
        overrides: spec.overrides.clone(),
        seed,
        scenario_file: SCENARIO_FILE.into(),
        vehicle_file: VEHICLE_FILE.into(),
        vehicle_fingerprint: format!("{:016x}", resolved.model.fingerprint()),
        workers: rayon::current_num_threads(),
        sweep: resolved.file.sweep.clone(),
        runs_planned: planned,
        runs_finished: 0,
        status: RunStatus::Running,
        failures: Vec::new(),
        reproduce: reproduce_command(spec, seed),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;

    if spec.kind == ExperimentKind::Timing {
        return run_timing(&resolved, seed, out, manifest);
    }

    let progress = Mutex::new(Progress {
        manifest,
        rows: Vec::new(),
    });
    runs.par_iter().try_for_each(|run| -> Result<(), CliError> {
        let result = run_one(spec.kind, run, &resolved, out);
        let mut p = progress.lock().expect("no panics while holding the lock");
        match result {
            Ok(row) => {
                if row.diverged {
                    p.manifest.failures.push(RunFailure {
                        run: run.slug(),
                        error: "plant state became non-finite".into(),
                    });
                }
                p.rows.push(row);
            }
            Err(RunError::Io(e)) => return Err(e.into()),
            Err(e) => p.manifest.failures.push(RunFailure {
                run: run.slug(),
                error: e.to_string(),
            }),
        }
        p.manifest.runs_finished += 1;
        p.write(out)
    })?;

    let mut p = progress.into_inner().expect("no panics while holding the lock");
    p.rows.sort_by_key(|r| order_key(&runs, r));
    p.manifest.failures.sort_by(|a, b| a.run.cmp(&b.run));
    p.manifest.status = if p.manifest.failures.is_empty() {
        RunStatus::Complete
    } else {
        RunStatus::Failed
    };
    p.write(out)?;
    finish(
        Outcome {
            summary: summarize(&p.rows),
            manifest: p.manifest,
            timing: Vec::new(),
        },
        out,
    )
}

fn order_key(runs: &[RunSpec], row: &MetricsRow) -> usize {
    runs.iter()
        .position(|r| row.trajectory.ends_with(&format!("{}.csv", r.slug())))
        .unwrap_or(usize::MAX)
}

struct Progress {
    manifest: Manifest,
    rows: Vec<MetricsRow>,
}

impl Progress {
    fn write(&self, out: &Path) -> Result<(), CliError> {
        write_csv(&out.join(METRICS_FILE), &self.rows, &METRICS_COLUMNS)?;
        write_csv(&out.join(SUMMARY_FILE), &summarize(&self.rows), &SUMMARY_COLUMNS)?;
        write_json(&out.join(MANIFEST_FILE), &self.manifest)?;
        Ok(())
    }
}

/// What a finished experiment produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: Manifest,
    pub summary: Vec<SummaryRow>,
    pub timing: Vec<TimingRow>,
}

impl Outcome {
    /// Plain-text table of the summary or timing rows.
    pub fn table(&self) -> String {
        let mut s = String::new();
        if !self.timing.is_empty() {
            s.push_str(&format!(
                "{:>8} {:>5} {:>9} {:>9} {:>9} {:>9}\n",
                "K", "tau", "mean_ms", "median_ms", "p95_ms", "max_ms"
            ));
            for t in &self.timing {
                s.push_str(&format!(
                    "{:>8} {:>5} {:>9.2} {:>9.2} {:>9.2} {:>9.2}\n",
                    t.num_samples, t.horizon, t.mean_ms, t.median_ms, t.p95_ms, t.max_ms
                ));
            }
            return s;
        }
        s.push_str(&format!(
            "{:>4} {:<16} {:<12} {:<9} {:>4} {:>8} {:>8} {:>8} {:>8} {:>9} {:>5}\n",
            "rank", "config", "controller", "variant", "runs", "ss_x", "ss_y", "ss_z", "ss_yaw", "settle_s", "coll"
        ));
        for r in &self.summary {
            let settle = r
                .median_settling_time
                .map(|t| format!("{t:.1}"))
                .unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "{:>4} {:<16} {:<12} {:<9} {:>4} {:>8.3} {:>8.3} {:>8.3} {:>8.4} {:>9} {:>5}\n",
                r.rank,
                r.label,
                r.controller,
                r.variant,
                r.runs,
                r.median_ss_x,
                r.median_ss_y,
                r.median_ss_z,
                r.median_ss_yaw,
                settle,
                r.max_collisions
            ));
        }
        s
    }
}

fn finish(outcome: Outcome, out: &Path) -> Result<Outcome, CliError> {
    let m = &outcome.manifest;
    if m.failures.is_empty() {
        Ok(outcome)
    } else {
        Err(CliError::Diverged {
            failed: m.failures.len(),
            total: m.runs_planned,
            manifest: out.join(MANIFEST_FILE),
        })
    }
}

/// Timing runs one grid point at a time so each gets the whole pool.
fn run_timing(resolved: &ResolvedScenario, seed: u64, out: &Path, mut manifest: Manifest) -> Result<Outcome, CliError> {
    let mut rows: Vec<TimingRow> = Vec::new();
    for &k in &resolved.file.sweep.k_values {
        match time_control_steps(resolved, k, resolved.file.sweep.timing_steps, seed) {
            Ok(row) => rows.push(row),
            Err(RunError::Io(e)) => return Err(e.into()),
            Err(e) => manifest.failures.push(RunFailure {
                run: format!("K={k}"),
                error: e.to_string(),
            }),
        }
        manifest.runs_finished += 1;
        write_csv(&out.join(TIMING_FILE), &rows, &TIMING_COLUMNS)?;
        write_json(&out.join(MANIFEST_FILE), &manifest)?;
    }
    manifest.status = if manifest.failures.is_empty() {
        RunStatus::Complete
    } else {
        RunStatus::Failed
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    finish(
        Outcome {
            manifest,
            summary: Vec::new(),
            timing: rows,
        },
        out,
    )
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, plots::PlotError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|_| plots::PlotError::MissingData(path.clone()))?;
    serde_json::from_str(&text).map_err(|e| plots::PlotError::Malformed(path, e.to_string()))
}
