//! Closed-loop episodes: a controller planning with its own model drives a
//! plant that may carry different parameters.

use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::PidController;
use crate::costs::{check_collision, CylinderObstacle, GoalSpec};
use crate::dynamics::{ModelError, VehicleModel, VehicleState, Wrench};
use crate::lie_se3::Pose;
use crate::mppi::{MppiController, MppiDiagnostics, MppiError};

/// Extra rigid-body mass of the negatively buoyant variant, kg.
pub const VIRTUAL_MASS: f64 = 100.0;
/// Net upward restoring force of the positively buoyant variant, N.
pub const POSITIVE_NET_BUOYANCY: f64 = 250.0;
/// Settling band as a fraction of the commanded step.
pub const SETTLING_FRACTION: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Mppi(#[from] MppiError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("trajectory log is empty")]
    EmptyLog,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuoyancyVariant {
    #[default]
    Neutral,
    /// Extra 100 kg of rigid-body mass.
    Negative,
    /// Buoyancy raised until the net restoring force is 250 N upward.
    Positive,
}

impl BuoyancyVariant {
    pub const ALL: [BuoyancyVariant; 3] = [
        BuoyancyVariant::Neutral,
        BuoyancyVariant::Positive,
        BuoyancyVariant::Negative,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BuoyancyVariant::Neutral => "neutral",
            BuoyancyVariant::Negative => "negative",
            BuoyancyVariant::Positive => "positive",
        }
    }
}

/// Plant parameters for a buoyancy variant of `model`.
pub fn apply_variant(model: &VehicleModel, variant: BuoyancyVariant) -> Result<VehicleModel, ModelError> {
    match variant {
        BuoyancyVariant::Neutral => Ok(model.clone()),
        BuoyancyVariant::Negative => {
            let mut rb = model.rigid_body().clone();
            rb.mass += VIRTUAL_MASS;
            model.with_params(rb, model.hydro().clone())
        }
        BuoyancyVariant::Positive => {
            let mut hydro = model.hydro().clone();
            hydro.buoyancy_force = model.weight() + POSITIVE_NET_BUOYANCY;
            model.with_params(model.rigid_body().clone(), hydro)
        }
    }
}

/// One closed-loop task.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub goal: GoalSpec,
    pub variant: BuoyancyVariant,
    pub obstacles: Vec<CylinderObstacle>,
    pub collision_margin: f64,
    /// s
    pub duration: f64,
    pub control_dt: f64,
    pub plant_dt: f64,
    /// Constant exterior wrench on the plant.
    pub disturbance: Option<Wrench>,
    pub initial: VehicleState,
    /// Final distance counted as reaching the goal, m.
    pub goal_tolerance: f64,
}

impl Scenario {
    /// Start at the origin at rest, hold the goal pose at rest.
    pub fn waypoint(goal: Vector3<f64>, duration: f64) -> Self {
        Self {
            goal: GoalSpec::at_rest(Pose::from_translation(goal)),
            variant: BuoyancyVariant::Neutral,
            obstacles: Vec::new(),
            collision_margin: crate::costs::CostFunction::DEFAULT_MARGIN,
            duration,
            control_dt: 0.1,
            plant_dt: 0.02,
            disturbance: None,
            initial: VehicleState::default(),
            goal_tolerance: 1.0,
        }
    }

    /// 10 m straight ahead along world x.
    pub fn forward_10m() -> Self {
        Self::waypoint(Vector3::new(10.0, 0.0, 0.0), 90.0)
    }

    /// Two vertical cylinders, one either side of the straight path to a goal
    /// 10 m ahead.
    pub fn obstacle_course() -> Self {
        let mut s = Self::waypoint(Vector3::new(10.0, 0.0, 0.0), 90.0);
        s.obstacles = vec![
            CylinderObstacle::new(Vector3::new(3.5, 2.7, 0.0), 1.5, 2.5),
            CylinderObstacle::new(Vector3::new(6.5, -2.7, 0.0), 1.5, 2.5),
        ];
        s
    }

    pub fn with_variant(mut self, variant: BuoyancyVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Control steps per episode.
    pub fn num_steps(&self) -> usize {
        (self.duration / self.control_dt).round() as usize
    }

    pub fn substeps(&self) -> usize {
        (self.control_dt / self.plant_dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Scenario(m.to_string()));
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad("duration must be positive");
        }
        if !(self.plant_dt > 0.0 && self.control_dt > 0.0) {
            return bad("time steps must be positive");
        }
        if self.plant_dt > self.control_dt {
            return bad("plant_dt must not exceed control_dt");
        }
        let ratio = self.control_dt / self.plant_dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return bad("control_dt must be an integer multiple of plant_dt");
        }
        if self.plant_dt > 0.2 {
            return bad("plant_dt must not exceed 0.2 s");
        }
        if !(self.collision_margin >= 0.0) {
            return bad("collision_margin must be non-negative");
        }
        if self.obstacles.iter().any(|o| !o.is_valid()) {
            return bad("obstacles need positive radius and half_height");
        }
        if !self.initial.is_finite() || !self.goal.pose.is_finite() {
            return bad("initial state and goal must be finite");
        }
        if let Some(d) = &self.disturbance {
            if !d.is_finite() {
                return bad("disturbance must be finite");
            }
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        (self.goal.pose.position - self.initial.pose.position).norm()
    }
}

/// Output of one controller call.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub thrusts: Vec<f64>,
    pub diagnostics: Option<MppiDiagnostics>,
}

pub trait Controller {
    fn name(&self) -> &str;
    fn command(&mut self, state: &VehicleState) -> Result<Command, SimError>;
}

impl Controller for MppiController {
    fn name(&self) -> &str {
        "mppi"
    }

    fn command(&mut self, state: &VehicleState) -> Result<Command, SimError> {
        let (thrusts, diag) = self.control_step(state)?;
        Ok(Command {
            thrusts,
            diagnostics: Some(diag),
        })
    }
}

impl Controller for PidController {
    fn name(&self) -> &str {
        PidController::name(self)
    }

    fn command(&mut self, state: &VehicleState) -> Result<Command, SimError> {
        Ok(Command {
            thrusts: self.commands(state),
            diagnostics: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub time: f64,
    pub state: VehicleState,
    pub thrusts: Vec<f64>,
    pub diagnostics: Option<MppiDiagnostics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    Completed,
    /// Plant state became non-finite at this time.
    PlantDiverged { time: f64 },
    /// Every sampled rollout was rejected at this time, so the controller
    /// had no command to give.
    NoAdmissibleSample { time: f64 },
}

/// One row per control step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub controller: String,
    pub num_inputs: usize,
    pub rows: Vec<LogRow>,
    pub termination: Termination,
}

pub const STATE_COLUMNS: [&str; 13] = [
    "x", "y", "z", "qw", "qx", "qy", "qz", "u", "v", "w", "p", "q", "r",
];

pub const DIAGNOSTIC_COLUMNS: [&str; 7] = [
    "wall_time_ms",
    "beta",
    "eta",
    "eta_over_k",
    "min_cost",
    "mean_cost",
    "rejected_fraction",
];

impl TrajectoryLog {
    pub fn diverged(&self) -> bool {
        matches!(self.termination, Termination::PlantDiverged { .. })
    }

    pub fn stopped(&self) -> bool {
        matches!(self.termination, Termination::NoAdmissibleSample { .. })
    }

    pub fn final_state(&self) -> Option<&VehicleState> {
        self.rows.last().map(|r| &r.state)
    }

    /// `time, x..r, thrust_0..thrust_{n-1}, wall_time_ms..rejected_fraction`
    pub fn header(num_inputs: usize) -> Vec<String> {
        std::iter::once("time".to_string())
            .chain(STATE_COLUMNS.iter().map(|s| s.to_string()))
            .chain((0..num_inputs).map(|i| format!("thrust_{i}")))
            .chain(DIAGNOSTIC_COLUMNS.iter().map(|s| s.to_string()))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header(self.num_inputs))?;
        for row in &self.rows {
            let mut rec: Vec<String> = Vec::with_capacity(1 + 13 + self.num_inputs + 7);
            rec.push(row.time.to_string());
            rec.extend(row.state.to_array().iter().map(f64::to_string));
            rec.extend(row.thrusts.iter().map(f64::to_string));
            match &row.diagnostics {
                Some(d) => rec.extend(
                    [
                        d.wall_time_ms,
                        d.beta,
                        d.eta,
                        d.eta_over_k,
                        d.min_cost,
                        d.mean_cost,
                        d.rejected_fraction,
                    ]
                    .iter()
                    .map(f64::to_string),
                ),
                None => rec.extend(std::iter::repeat_n(String::new(), 7)),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `controller` against `plant` (already carrying the scenario's
/// variant). Commands are held for one control period while the plant is
/// sub-stepped at `plant_dt`. A step where every rollout is rejected ends
/// the episode and is recorded in the log's termination.
pub fn run_episode(
    controller: &mut dyn Controller,
    scenario: &Scenario,
    plant: &VehicleModel,
) -> Result<TrajectoryLog, SimError> {
    scenario.validate()?;
    let external = scenario.disturbance.unwrap_or_default();
    let substeps = scenario.substeps();
    let mut state = scenario.initial;
    let mut rows = Vec::with_capacity(scenario.num_steps());
    let mut termination = Termination::Completed;
    for i in 0..scenario.num_steps() {
        let time = i as f64 * scenario.control_dt;
        let cmd = match controller.command(&state) {
            Ok(cmd) => cmd,
            Err(SimError::Mppi(MppiError::AllSamplesRejected)) => {
                termination = Termination::NoAdmissibleSample { time };
                break;
            }
            Err(e) => return Err(e),
        };
        rows.push(LogRow {
            time,
            state,
            thrusts: cmd.thrusts.clone(),
            diagnostics: cmd.diagnostics,
        });
        let mut diverged = false;
        for _ in 0..substeps {
            match plant.step(&state, &cmd.thrusts, &external, scenario.plant_dt) {
                Ok(out) => state = out.state,
                Err(ModelError::NonFiniteState) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if diverged {
            termination = Termination::PlantDiverged {
                time: time + scenario.control_dt,
            };
            break;
        }
    }
    Ok(TrajectoryLog {
        controller: controller.name().to_string(),
        num_inputs: plant.num_inputs(),
        rows,
        termination,
    })
}

/// Summary of one episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Mean |error| over the final 10 % of rows: x, y, z (m) and yaw (rad).
    pub steady_state_error: [f64; 4],
    /// Largest |error| over the whole episode, same axes.
    pub max_abs_error: [f64; 4],
    /// Excursion beyond the goal along the approach axis, % of the step.
    pub overshoot_pct: f64,
    /// First time after which the position error stays inside the band.
    pub settling_time: Option<f64>,
    pub collision_count: usize,
    pub final_position_error: f64,
    pub goal_reached: bool,
    /// Mean absolute first difference of the thruster commands, N.
    pub thrust_jitter: f64,
    pub mean_eta_over_k: Option<f64>,
    pub mean_wall_time_ms: Option<f64>,
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r + two_pi
    } else {
        r
    }
}

fn axis_errors(state: &VehicleState, goal: &GoalSpec) -> [f64; 4] {
    let d = state.pose.position - goal.pose.position;
    let yaw = wrap_angle(state.pose.orientation.yaw() - goal.pose.orientation.yaw());
    [d.x, d.y, d.z, yaw]
}

pub fn compute_metrics(log: &TrajectoryLog, scenario: &Scenario) -> Result<Metrics, SimError> {
    if log.rows.is_empty() {
        return Err(SimError::EmptyLog);
    }
    let n = log.rows.len();
    let goal = &scenario.goal;
    let errors: Vec<[f64; 4]> = log.rows.iter().map(|r| axis_errors(&r.state, goal)).collect();

    let window = (n / 10).max(1);
    let mut steady = [0.0; 4];
    for e in &errors[n - window..] {
        for i in 0..4 {
            steady[i] += e[i].abs() / window as f64;
        }
    }
    let mut max_abs = [0.0f64; 4];
    for e in &errors {
        for i in 0..4 {
            max_abs[i] = max_abs[i].max(e[i].abs());
        }
    }

    let start = scenario.initial.pose.position;
    let step = scenario.step_size();
    let overshoot_pct = if step > 0.0 {
        let dir = (goal.pose.position - start) / step;
        let furthest = log
            .rows
            .iter()
            .map(|r| (r.state.pose.position - start).dot(&dir))
            .fold(f64::NEG_INFINITY, f64::max);
        ((furthest - step) / step * 100.0).max(0.0)
    } else {
        0.0
    };

    let band = if step > 0.0 {
        SETTLING_FRACTION * step
    } else {
        SETTLING_FRACTION
    };
    let dist: Vec<f64> = log
        .rows
        .iter()
        .map(|r| (r.state.pose.position - goal.pose.position).norm())
        .collect();
    let settling_time = match dist.iter().rposition(|d| *d >= band) {
        None => Some(log.rows[0].time),
        Some(last) if last + 1 < n => Some(log.rows[last + 1].time),
        Some(_) => None,
    };

    let collision_count = log
        .rows
        .iter()
        .filter(|r| check_collision(&r.state, &scenario.obstacles, scenario.collision_margin))
        .count();
    let final_position_error = dist[n - 1];

    let jitter_terms: Vec<f64> = log
        .rows
        .windows(2)
        .flat_map(|w| {
            w[1].thrusts
                .iter()
                .zip(&w[0].thrusts)
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .collect();
    let thrust_jitter = if jitter_terms.is_empty() {
        0.0
    } else {
        jitter_terms.iter().sum::<f64>() / jitter_terms.len() as f64
    };

    let diags: Vec<&MppiDiagnostics> = log.rows.iter().filter_map(|r| r.diagnostics.as_ref()).collect();
    let mean_of = |f: fn(&MppiDiagnostics) -> f64| {
        (!diags.is_empty()).then(|| diags.iter().map(|d| f(d)).sum::<f64>() / diags.len() as f64)
    };

    Ok(Metrics {
        steady_state_error: steady,
        max_abs_error: max_abs,
        overshoot_pct,
        settling_time,
        collision_count,
        final_position_error,
        goal_reached: collision_count == 0
            && log.termination == Termination::Completed
            && final_position_error <= scenario.goal_tolerance,
        thrust_jitter,
        mean_eta_over_k: mean_of(|d| d.eta_over_k),
        mean_wall_time_ms: mean_of(|d| d.wall_time_ms),
    })
}

/// Progress window, as fractions of the commanded step, counted as cruise.
pub const CRUISE_PHASE: (f64, f64) = (0.1, 0.9);

/// Fraction of cruise steps whose eta/K lies in `[lo, hi]`. Cruise steps are
/// those whose progress along the start-goal line falls inside
/// [`CRUISE_PHASE`]. `None` when no cruise step carries diagnostics.
pub fn cruise_health(log: &TrajectoryLog, scenario: &Scenario, lo: f64, hi: f64) -> Option<f64> {
    let step = scenario.step_size();
    if step <= 0.0 {
        return None;
    }
    let start = scenario.initial.pose.position;
    let dir = (scenario.goal.pose.position - start) / step;
    let ratios: Vec<f64> = log
        .rows
        .iter()
        .filter(|r| {
            let s = (r.state.pose.position - start).dot(&dir) / step;
            s > CRUISE_PHASE.0 && s < CRUISE_PHASE.1
        })
        .filter_map(|r| r.diagnostics.map(|d| d.eta_over_k))
        .collect();
    if ratios.is_empty() {
        return None;
    }
    let healthy = ratios.iter().filter(|e| (lo..=hi).contains(*e)).count();
    Some(healthy as f64 / ratios.len() as f64)
}
