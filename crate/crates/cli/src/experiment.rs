//! Experiment plans: which episodes to run for each study, and how to run one.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use auv_mppi::baselines::PidController;
use auv_mppi::config::ResolvedScenario;
use auv_mppi::dynamics::VehicleModel;
use auv_mppi::mppi::{MppiConfig, MppiController};
use auv_mppi::sim::{apply_variant, compute_metrics, run_episode, BuoyancyVariant, Controller, Scenario, SimError};
use serde::{Deserialize, Serialize};

use crate::output::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SweepK,
    SweepHorizon,
    SweepSigma,
    FilterStudy,
    Timing,
    PidCompare,
    ObstacleCourse,
    SingleRun,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::SweepK,
        ExperimentKind::SweepHorizon,
        ExperimentKind::SweepSigma,
        ExperimentKind::FilterStudy,
        ExperimentKind::Timing,
        ExperimentKind::PidCompare,
        ExperimentKind::ObstacleCourse,
        ExperimentKind::SingleRun,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::SweepK => "sweep-K",
            ExperimentKind::SweepHorizon => "sweep-horizon",
            ExperimentKind::SweepSigma => "sweep-sigma",
            ExperimentKind::FilterStudy => "filter-study",
            ExperimentKind::Timing => "timing",
            ExperimentKind::PidCompare => "pid-compare",
            ExperimentKind::ObstacleCourse => "obstacle-course",
            ExperimentKind::SingleRun => "single-run",
        }
    }

    pub fn is_sweep(&self) -> bool {
        matches!(
            self,
            ExperimentKind::SweepK | ExperimentKind::SweepHorizon | ExperimentKind::SweepSigma
        )
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.as_str()).collect();
                format!("unknown experiment `{s}`; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Mppi,
    Pid,
    CascadePid,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Mppi => "mppi",
            ControllerKind::Pid => "pid",
            ControllerKind::CascadePid => "cascade_pid",
        }
    }
}

/// One episode of a plan.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub label: String,
    /// The swept value, or 0 when nothing is swept.
    pub param: f64,
    pub controller: ControllerKind,
    pub variant: BuoyancyVariant,
    pub seed: u64,
    pub mppi: MppiConfig,
    pub scenario: Scenario,
}

impl RunSpec {
    /// File stem of the trajectory log.
    pub fn slug(&self) -> String {
        format!(
            "{}_{}_{}_seed{}",
            self.label.replace(['=', '.', ' ', '%'], "_"),
            self.controller.as_str(),
            self.variant.as_str(),
            self.seed
        )
    }
}

/// Metrics of one episode, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub label: String,
    pub param: f64,
    pub controller: String,
    pub variant: String,
    pub seed: u64,
    pub num_samples: usize,
    pub horizon: usize,
    pub noise_std: f64,
    pub filtered: bool,
    pub ss_x: f64,
    pub ss_y: f64,
    pub ss_z: f64,
    pub ss_yaw: f64,
    pub max_x: f64,
    pub max_y: f64,
    pub max_z: f64,
    pub max_yaw: f64,
    pub overshoot_pct: f64,
    pub settling_time: Option<f64>,
    pub collision_count: usize,
    pub final_position_error: f64,
    pub goal_reached: bool,
    pub thrust_jitter: f64,
    pub mean_eta_over_k: Option<f64>,
    pub mean_wall_time_ms: Option<f64>,
    pub diverged: bool,
    /// Ended early because every sampled rollout was rejected.
    pub stopped: bool,
    pub goal_x: f64,
    pub goal_y: f64,
    pub goal_z: f64,
    pub goal_yaw: f64,
    /// Relative to the output directory.
    pub trajectory: String,
}

pub const METRICS_COLUMNS: [&str; 33] = [
    "experiment",
    "label",
    "param",
    "controller",
    "variant",
    "seed",
    "num_samples",
    "horizon",
    "noise_std",
    "filtered",
    "ss_x",
    "ss_y",
    "ss_z",
    "ss_yaw",
    "max_x",
    "max_y",
    "max_z",
    "max_yaw",
    "overshoot_pct",
    "settling_time",
    "collision_count",
    "final_position_error",
    "goal_reached",
    "thrust_jitter",
    "mean_eta_over_k",
    "mean_wall_time_ms",
    "diverged",
    "stopped",
    "goal_x",
    "goal_y",
    "goal_z",
    "goal_yaw",
    "trajectory",
];

fn seeds(base: u64, n: usize) -> impl Iterator<Item = u64> {
    (0..n as u64).map(move |i| base.wrapping_add(i))
}

/// Expands a resolved scenario into the episodes of `kind`. `base_seed`
/// replaces the scenario's MPPI seed; repetitions use consecutive seeds.
pub fn plan(kind: ExperimentKind, resolved: &ResolvedScenario, base_seed: u64) -> Result<Vec<RunSpec>, String> {
    let sweep = &resolved.file.sweep;
    let reps = if kind == ExperimentKind::SingleRun { 1 } else { sweep.repetitions };
    let base = &resolved.mppi;
    let scenario = &resolved.scenario;
    let model = &resolved.model;
    let mut runs = Vec::new();
    let mut push = |label: String, param: f64, controller, variant, cfg: MppiConfig| {
        for seed in seeds(base_seed, reps) {
            let mut mppi = cfg.clone();
            mppi.seed = seed;
            let mut sc = scenario.clone();
            sc.variant = variant;
            runs.push(RunSpec {
                label: label.clone(),
                param,
                controller,
                variant,
                seed,
                mppi,
                scenario: sc,
            });
        }
    };
    let check = |cfg: &MppiConfig| cfg.validate(model.num_inputs()).map_err(|e| e.to_string());
    match kind {
        ExperimentKind::SweepK => {
            for &k in &sweep.k_values {
                let cfg = MppiConfig { num_samples: k, ..base.clone() };
                check(&cfg)?;
                push(format!("K={k}"), k as f64, ControllerKind::Mppi, scenario.variant, cfg);
            }
        }
        ExperimentKind::SweepHorizon => {
            for &h in &sweep.horizon_values {
                let cfg = MppiConfig { horizon: h, ..base.clone() };
                check(&cfg)?;
                push(format!("tau={h}"), h as f64, ControllerKind::Mppi, scenario.variant, cfg);
            }
        }
        ExperimentKind::SweepSigma => {
            for &f in &sweep.sigma_fractions {
                let cfg = base.clone().with_noise_fraction(model, f);
                check(&cfg)?;
                push(
                    format!("sigma={}%", f * 100.0),
                    f,
                    ControllerKind::Mppi,
                    scenario.variant,
                    cfg,
                );
            }
        }
        ExperimentKind::FilterStudy => {
            let filter = base.filter.unwrap_or_default();
            let plain = MppiConfig { filter: None, ..base.clone() };
            let smoothed = MppiConfig { filter: Some(filter), ..base.clone() };
            check(&smoothed)?;
            push("unfiltered".into(), 0.0, ControllerKind::Mppi, scenario.variant, plain);
            push(
                format!("sg{}x{}", filter.window, filter.poly_order),
                1.0,
                ControllerKind::Mppi,
                scenario.variant,
                smoothed,
            );
        }
        ExperimentKind::PidCompare => {
            for c in [ControllerKind::Mppi, ControllerKind::Pid, ControllerKind::CascadePid] {
                push(c.as_str().into(), 0.0, c, scenario.variant, base.clone());
            }
        }
        ExperimentKind::ObstacleCourse => {
            if scenario.obstacles.is_empty() {
                return Err("obstacle-course needs a scenario with obstacles".into());
            }
            for v in BuoyancyVariant::ALL {
                push(v.as_str().into(), 0.0, ControllerKind::Mppi, v, base.clone());
            }
        }
        ExperimentKind::SingleRun => {
            push("single".into(), 0.0, ControllerKind::Mppi, scenario.variant, base.clone());
        }
        ExperimentKind::Timing => return Err("timing is not an episode plan".into()),
    }
    Ok(runs)
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// True when the failure is numerical divergence rather than plumbing.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            RunError::Sim(SimError::Mppi(auv_mppi::mppi::MppiError::NonFiniteState))
                | RunError::Sim(SimError::Model(auv_mppi::dynamics::ModelError::NonFiniteState))
        )
    }
}

fn controller_for(
    spec: &RunSpec,
    resolved: &ResolvedScenario,
    model: Arc<VehicleModel>,
) -> Result<Box<dyn Controller + Send>, SimError> {
    let sc = &spec.scenario;
    let pids = &resolved.file.pid;
    Ok(match spec.controller {
        ControllerKind::Mppi => {
            let mut cost = resolved.cost.clone();
            cost.goal = sc.goal;
            cost.obstacles = sc.obstacles.clone();
            cost.margin = sc.collision_margin;
            Box::new(MppiController::new(model, cost, spec.mppi.clone())?)
        }
        ControllerKind::Pid => Box::new(PidController::single(
            pids.single,
            sc.goal,
            model.thrusters().clone(),
            sc.control_dt,
        )),
        ControllerKind::CascadePid => Box::new(PidController::cascade(
            pids.cascade,
            sc.goal,
            model.thrusters().clone(),
            sc.control_dt,
        )),
    })
}

/// Runs one episode, writes its trajectory under `out/runs/`, and returns
/// the metrics row. The controller always plans with the unmodified model.
pub fn run_one(
    kind: ExperimentKind,
    spec: &RunSpec,
    resolved: &ResolvedScenario,
    out: &Path,
) -> Result<MetricsRow, RunError> {
    let model = Arc::new(resolved.model.clone());
    let plant = apply_variant(&model, spec.variant).map_err(SimError::from)?;
    let mut controller = controller_for(spec, resolved, model)?;
    let log = run_episode(controller.as_mut(), &spec.scenario, &plant)?;
    let metrics = compute_metrics(&log, &spec.scenario)?;

    let rel = format!("runs/{}.csv", spec.slug());
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    write_atomic(&out.join(&rel), &buf)?;

    let goal = &spec.scenario.goal.pose;
    let is_mppi = spec.controller == ControllerKind::Mppi;
    Ok(MetricsRow {
        experiment: kind.as_str().into(),
        label: spec.label.clone(),
        param: spec.param,
        controller: spec.controller.as_str().into(),
        variant: spec.variant.as_str().into(),
        seed: spec.seed,
        num_samples: if is_mppi { spec.mppi.num_samples } else { 0 },
        horizon: if is_mppi { spec.mppi.horizon } else { 0 },
        noise_std: if is_mppi { spec.mppi.noise_std[0] } else { 0.0 },
        filtered: is_mppi && spec.mppi.filter.is_some(),
        ss_x: metrics.steady_state_error[0],
        ss_y: metrics.steady_state_error[1],
        ss_z: metrics.steady_state_error[2],
        ss_yaw: metrics.steady_state_error[3],
        max_x: metrics.max_abs_error[0],
        max_y: metrics.max_abs_error[1],
        max_z: metrics.max_abs_error[2],
        max_yaw: metrics.max_abs_error[3],
        overshoot_pct: metrics.overshoot_pct,
        settling_time: metrics.settling_time,
        collision_count: metrics.collision_count,
        final_position_error: metrics.final_position_error,
        goal_reached: metrics.goal_reached,
        thrust_jitter: metrics.thrust_jitter,
        mean_eta_over_k: metrics.mean_eta_over_k,
        mean_wall_time_ms: metrics.mean_wall_time_ms,
        diverged: log.diverged(),
        stopped: log.stopped(),
        goal_x: goal.position.x,
        goal_y: goal.position.y,
        goal_z: goal.position.z,
        goal_yaw: goal.orientation.yaw(),
        trajectory: rel,
    })
}

/// Wall-clock statistics of `control_step` for one sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub num_samples: usize,
    pub horizon: usize,
    pub steps: usize,
    pub workers: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Times `steps` closed-loop control steps on the neutral plant.
pub fn time_control_steps(resolved: &ResolvedScenario, num_samples: usize, steps: usize, seed: u64) -> Result<TimingRow, RunError> {
    let model = Arc::new(resolved.model.clone());
    let cfg = MppiConfig {
        num_samples,
        seed,
        ..resolved.mppi.clone()
    };
    let mut controller = MppiController::new(model.clone(), resolved.cost.clone(), cfg.clone()).map_err(SimError::from)?;
    let sc = &resolved.scenario;
    let substeps = sc.substeps();
    let external = sc.disturbance.unwrap_or_default();
    let mut state = sc.initial;
    let mut times = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (u, diag) = controller.control_step(&state).map_err(SimError::from)?;
        times.push(diag.wall_time_ms);
        for _ in 0..substeps {
            state = model
                .step(&state, &u, &external, sc.plant_dt)
                .map_err(SimError::from)?
                .state;
        }
    }
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let pick = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    Ok(TimingRow {
        num_samples,
        horizon: cfg.horizon,
        steps,
        workers: rayon::current_num_threads(),
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        median_ms: pick(0.5),
        p95_ms: pick(0.95),
        max_ms: *sorted.last().expect("steps >= 1"),
    })
}
