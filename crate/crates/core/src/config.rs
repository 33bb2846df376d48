//! TOML vehicle and scenario files.
//!
//! Both files are parsed into a `toml::Value` tree first so that
//! `key.path=value` overrides can be applied before typed deserialization.
//! Errors carry the 1-based line of the offending entry when it is known.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector3, Vector6};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::baselines::{CascadeGains, PidGains};
use crate::costs::{CostFunction, CostWeights, CylinderObstacle, GoalSpec, NormForm};
use crate::dynamics::{
    HydroParams, RigidBodyParams, ThrusterAllocation, VehicleModel, VehicleState, Wrench, GRAVITY,
};
use crate::lie_se3::{Pose, Twist, UnitQuat};
use crate::mppi::{ControlCostForm, FilterSettings, MppiConfig, ShiftInit};
use crate::sim::{BuoyancyVariant, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn new(message: impl Into<String>) -> Self {
        Self {
            path: None,
            line: None,
            message: message.into(),
        }
    }

    fn at(mut self, line: Option<usize>) -> Self {
        self.line = self.line.or(line);
        self
    }

    fn in_file(mut self, path: &Path) -> Self {
        self.path.get_or_insert_with(|| path.to_path_buf());
        self
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.path, self.line) {
            (Some(p), Some(l)) => write!(f, "{}:{}: {}", p.display(), l, self.message),
            (Some(p), None) => write!(f, "{}: {}", p.display(), self.message),
            (None, Some(l)) => write!(f, "line {}: {}", l, self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_value(text: &str) -> Result<toml::Value, ConfigError> {
    text.parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| ConfigError::new(e.message().to_string()).at(e.span().map(|s| line_of(text, s.start))))
}

/// Typed view of `value`. When `text` is the unmodified source, positions in
/// error messages refer to it.
fn typed<T: DeserializeOwned>(value: toml::Value, text: Option<&str>) -> Result<T, ConfigError> {
    match text {
        Some(src) => toml::from_str(src).map_err(|e| {
            ConfigError::new(e.message().to_string()).at(e.span().map(|s| line_of(src, s.start)))
        }),
        None => value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::new(e.message().to_string())),
    }
}

/// Parses `value` as TOML, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to the tree, creating intermediate tables.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::new(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::new(format!("override key `{key}` is malformed")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::new(format!("override `{key}`: `{part}` is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| ConfigError::new(format!("override `{key}` does not address a table entry")))?;
    table.insert(parts[parts.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThrustLimit {
    Uniform(f64),
    PerThruster(Vec<f64>),
}

/// On-disk vehicle description.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleFile {
    pub mass: Spanned<f64>,
    pub inertia: Spanned<[[f64; 3]; 3]>,
    #[serde(default)]
    pub cog: Option<Spanned<[f64; 3]>>,
    pub cob: Spanned<[f64; 3]>,
    pub added_mass: Spanned<[[f64; 6]; 6]>,
    pub linear_damping: Spanned<[[f64; 6]; 6]>,
    pub quadratic_damping: Spanned<[f64; 6]>,
    /// N; defaults to the weight (neutral buoyancy).
    #[serde(default)]
    pub buoyancy_force: Option<Spanned<f64>>,
    #[serde(default)]
    pub gravity: Option<Spanned<f64>>,
    /// 6 rows, one column per thruster.
    pub tam: Spanned<Vec<Vec<f64>>>,
    pub max_thrust: Spanned<ThrustLimit>,
}

fn mat6(rows: &[[f64; 6]; 6]) -> Matrix6<f64> {
    Matrix6::from_fn(|i, j| rows[i][j])
}

impl VehicleFile {
    /// Builds and validates the model; `text` maps spans back to lines.
    pub fn build(&self, text: Option<&str>) -> Result<VehicleModel, ConfigError> {
        let line = |start: usize| text.map(|t| line_of(t, start));
        let err = |span: std::ops::Range<usize>, e: crate::dynamics::ModelError| {
            ConfigError::new(e.to_string()).at(line(span.start))
        };
        let rb = RigidBodyParams {
            mass: *self.mass.get_ref(),
            inertia: Matrix3::from_fn(|i, j| self.inertia.get_ref()[i][j]),
            cog: self.cog.as_ref().map_or_else(Vector3::zeros, |c| Vector3::from(*c.get_ref())),
        };
        if let Err(e) = rb.validate() {
            let span = match &e {
                crate::dynamics::ModelError::InvalidParameter { field: "mass", .. } => self.mass.span(),
                crate::dynamics::ModelError::InvalidParameter { field: "cog", .. } => {
                    self.cog.as_ref().map_or(self.mass.span(), |c| c.span())
                }
                _ => self.inertia.span(),
            };
            return Err(err(span, e));
        }
        let gravity = self.gravity.as_ref().map_or(GRAVITY, |g| *g.get_ref());
        if !(gravity.is_finite() && gravity > 0.0) {
            let span = self.gravity.as_ref().map(|g| g.span()).unwrap_or(0..0);
            return Err(ConfigError::new("gravity must be positive").at(line(span.start)));
        }
        let hydro = HydroParams {
            added_mass: mat6(self.added_mass.get_ref()),
            linear_damping: mat6(self.linear_damping.get_ref()),
            quadratic_damping: Vector6::from_column_slice(self.quadratic_damping.get_ref()),
            buoyancy_force: self
                .buoyancy_force
                .as_ref()
                .map_or(rb.mass * gravity, |b| *b.get_ref()),
            cob: Vector3::from(*self.cob.get_ref()),
        };
        if let Err(e) = hydro.validate() {
            let span = match &e {
                crate::dynamics::ModelError::InvalidParameter { field, .. } => match *field {
                    "added_mass" => self.added_mass.span(),
                    "quadratic_damping" => self.quadratic_damping.span(),
                    "buoyancy_force" => self
                        .buoyancy_force
                        .as_ref()
                        .map_or(self.mass.span(), |b| b.span()),
                    _ => self.linear_damping.span(),
                },
                _ => self.added_mass.span(),
            };
            return Err(err(span, e));
        }
        let rows = self.tam.get_ref();
        if rows.len() != 6 {
            return Err(ConfigError::new(format!("tam needs 6 rows, found {}", rows.len()))
                .at(line(self.tam.span().start)));
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(ConfigError::new("tam rows must have equal length").at(line(self.tam.span().start)));
        }
        let tam = DMatrix::from_fn(6, n, |i, j| rows[i][j]);
        let limits = match self.max_thrust.get_ref() {
            ThrustLimit::Uniform(v) => vec![*v; n],
            ThrustLimit::PerThruster(v) => v.clone(),
        };
        let thrusters = ThrusterAllocation::with_limits(tam, limits).map_err(|e| {
            let span = match &e {
                crate::dynamics::ModelError::InvalidParameter { field: "max_thrust", .. } => {
                    self.max_thrust.span()
                }
                crate::dynamics::ModelError::DimensionMismatch { .. } => self.max_thrust.span(),
                _ => self.tam.span(),
            };
            err(span, e)
        })?;
        VehicleModel::new(rb, hydro, thrusters, gravity).map_err(|e| err(self.added_mass.span(), e))
    }
}

pub fn parse_vehicle(text: &str) -> Result<VehicleModel, ConfigError> {
    let file: VehicleFile = toml::from_str(text).map_err(|e| {
        ConfigError::new(e.message().to_string()).at(e.span().map(|s| line_of(text, s.start)))
    })?;
    file.build(Some(text))
}

pub fn load_vehicle(path: &Path) -> Result<VehicleModel, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(format!("cannot read vehicle file: {e}")).in_file(path))?;
    parse_vehicle(&text).map_err(|e| e.in_file(path))
}

/// TOML text equivalent to [`VehicleModel::default_rexrov`].
pub fn vehicle_to_toml(model: &VehicleModel) -> String {
    let rb = model.rigid_body();
    let h = model.hydro();
    let rows3 = |m: &Matrix3<f64>| (0..3).map(|i| (0..3).map(|j| m[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>();
    let rows6 = |m: &Matrix6<f64>| (0..6).map(|i| (0..6).map(|j| m[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>();
    let tam = model.thrusters().matrix();
    let mut t = toml::Table::new();
    t.insert("mass".into(), value(&rb.mass));
    t.insert("inertia".into(), value(&rows3(&rb.inertia)));
    t.insert("cog".into(), value(&rb.cog.as_slice().to_vec()));
    t.insert("cob".into(), value(&h.cob.as_slice().to_vec()));
    t.insert("added_mass".into(), value(&rows6(&h.added_mass)));
    t.insert("linear_damping".into(), value(&rows6(&h.linear_damping)));
    t.insert("quadratic_damping".into(), value(&h.quadratic_damping.as_slice().to_vec()));
    t.insert("buoyancy_force".into(), value(&h.buoyancy_force));
    t.insert("gravity".into(), value(&model.gravity()));
    t.insert(
        "tam".into(),
        value(&(0..6).map(|i| (0..tam.ncols()).map(|j| tam[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>()),
    );
    t.insert("max_thrust".into(), value(&model.thrust_limits().to_vec()));
    toml::to_string(&t).expect("plain numeric table serializes")
}

fn value<T: Serialize>(x: &T) -> toml::Value {
    toml::Value::try_from(x).expect("numeric data serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub position: [f64; 3],
    /// rad
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub velocity: Option<[f64; 6]>,
}

impl PoseSpec {
    fn pose(&self) -> Pose {
        Pose::new(
            Vector3::from(self.position),
            UnitQuat::from_euler(0.0, 0.0, self.yaw),
        )
    }

    fn twist(&self) -> Twist {
        self.velocity.map_or_else(Twist::zero, |v| Twist::from_slice(&v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub half_height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrenchSpec {
    #[serde(default)]
    pub force: [f64; 3],
    #[serde(default)]
    pub torque: [f64; 3],
}

/// `[mppi]` table. Noise defaults to `noise_fraction` of each thruster limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MppiSection {
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub noise_fraction: Option<f64>,
    #[serde(default)]
    pub noise_std: Option<Vec<f64>>,
    #[serde(default)]
    pub filter: Option<FilterSettings>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub control_cost: ControlCostForm,
    #[serde(default = "default_control_cost_weight")]
    pub control_cost_weight: f64,
    #[serde(default)]
    pub shift_init: ShiftInit,
    #[serde(default)]
    pub dt: Option<f64>,
}

fn default_samples() -> usize {
    MppiConfig::DEFAULT_SAMPLES
}
fn default_horizon() -> usize {
    MppiConfig::DEFAULT_HORIZON
}
fn default_lambda() -> f64 {
    MppiConfig::DEFAULT_LAMBDA
}
fn default_control_cost_weight() -> f64 {
    MppiConfig::DEFAULT_CONTROL_COST_WEIGHT
}

impl Default for MppiSection {
    fn default() -> Self {
        toml::Value::Table(Default::default())
            .try_into()
            .expect("all fields have defaults")
    }
}

impl MppiSection {
    pub fn to_config(&self, model: &VehicleModel, control_dt: f64) -> Result<MppiConfig, ConfigError> {
        if self.noise_fraction.is_some() && self.noise_std.is_some() {
            return Err(ConfigError::new("mppi: give either noise_fraction or noise_std, not both"));
        }
        let mut cfg = MppiConfig::defaults_for(model);
        if let Some(f) = self.noise_fraction {
            cfg = cfg.with_noise_fraction(model, f);
        }
        if let Some(std) = &self.noise_std {
            cfg.noise_std = std.clone();
        }
        cfg.num_samples = self.num_samples;
        cfg.horizon = self.horizon;
        cfg.lambda = self.lambda;
        cfg.filter = self.filter;
        cfg.seed = self.seed;
        cfg.control_cost = self.control_cost;
        cfg.control_cost_weight = self.control_cost_weight;
        cfg.shift_init = self.shift_init;
        cfg.dt = self.dt.unwrap_or(control_dt);
        cfg.validate(model.num_inputs())
            .map_err(|e| ConfigError::new(format!("mppi: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default)]
    pub form: NormForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidSection {
    #[serde(default)]
    pub single: PidGains,
    #[serde(default)]
    pub cascade: CascadeGains,
}

/// Grids and repetition counts for the experiment runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    #[serde(default = "default_horizon_values")]
    pub horizon_values: Vec<usize>,
    /// Noise std as fractions of each thruster limit.
    #[serde(default = "default_sigma_fractions")]
    pub sigma_fractions: Vec<f64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Control steps timed per grid point by the timing experiment.
    #[serde(default = "default_timing_steps")]
    pub timing_steps: usize,
}

fn default_k_values() -> Vec<usize> {
    vec![250, 500, 1000, 2000, 3000]
}
fn default_horizon_values() -> Vec<usize> {
    vec![10, 15, 25, 35, 50]
}
fn default_sigma_fractions() -> Vec<f64> {
    vec![0.0025, 0.005, 0.01, 0.02, 0.05]
}
fn default_repetitions() -> usize {
    5
}
fn default_timing_steps() -> usize {
    50
}

impl Default for SweepSection {
    fn default() -> Self {
        toml::Value::Table(Default::default())
            .try_into()
            .expect("all fields have defaults")
    }
}

impl SweepSection {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.repetitions == 0 {
            return Err(ConfigError::new("sweep.repetitions must be at least 1"));
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(ConfigError::new("sweep.k_values must be non-empty and positive"));
        }
        if self.horizon_values.is_empty() || self.horizon_values.contains(&0) {
            return Err(ConfigError::new("sweep.horizon_values must be non-empty and positive"));
        }
        if self.sigma_fractions.is_empty() || self.sigma_fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(ConfigError::new("sweep.sigma_fractions must be non-empty and positive"));
        }
        if self.timing_steps == 0 {
            return Err(ConfigError::new("sweep.timing_steps must be at least 1"));
        }
        Ok(())
    }
}

fn default_duration() -> f64 {
    90.0
}
fn default_control_dt() -> f64 {
    0.1
}
fn default_plant_dt() -> f64 {
    0.02
}
fn default_margin() -> f64 {
    CostFunction::DEFAULT_MARGIN
}
fn default_tolerance() -> f64 {
    1.0
}
fn origin() -> PoseSpec {
    PoseSpec {
        position: [0.0; 3],
        yaw: 0.0,
        velocity: None,
    }
}

/// On-disk scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    /// Vehicle file, relative to the scenario file. The built-in vehicle is
    /// used when absent.
    #[serde(default)]
    pub vehicle: Option<PathBuf>,
    pub goal: PoseSpec,
    #[serde(default = "origin")]
    pub initial: PoseSpec,
    #[serde(default)]
    pub variant: BuoyancyVariant,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_control_dt")]
    pub control_dt: f64,
    #[serde(default = "default_plant_dt")]
    pub plant_dt: f64,
    #[serde(default = "default_margin")]
    pub collision_margin: f64,
    #[serde(default = "default_tolerance")]
    pub goal_tolerance: f64,
    #[serde(default)]
    pub disturbance: Option<WrenchSpec>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    #[serde(default)]
    pub mppi: MppiSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub pid: PidSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

/// Everything an experiment needs, fully resolved.
#[derive(Debug, Clone)]
pub struct ResolvedScenario {
    pub file: ScenarioFile,
    /// The scenario tree after overrides, as TOML text.
    pub resolved_toml: String,
    pub vehicle_toml: String,
    pub model: VehicleModel,
    pub scenario: Scenario,
    pub mppi: MppiConfig,
    pub cost: CostFunction,
}

impl ResolvedScenario {
    /// The resolved scenario with its vehicle pointing at `vehicle_file`,
    /// which should hold `vehicle_toml`.
    pub fn standalone_toml(&self, vehicle_file: &str) -> String {
        let mut tree = parse_value(&self.resolved_toml).expect("resolved TOML parses");
        if let toml::Value::Table(t) = &mut tree {
            t.insert("vehicle".into(), toml::Value::String(vehicle_file.into()));
        }
        toml::to_string(&tree).expect("parsed TOML re-serializes")
    }
}

impl ScenarioFile {
    pub fn scenario(&self) -> Scenario {
        Scenario {
            goal: GoalSpec {
                pose: self.goal.pose(),
                velocity: self.goal.twist(),
            },
            variant: self.variant,
            obstacles: self
                .obstacles
                .iter()
                .map(|o| CylinderObstacle::new(Vector3::from(o.center), o.radius, o.half_height))
                .collect(),
            collision_margin: self.collision_margin,
            duration: self.duration,
            control_dt: self.control_dt,
            plant_dt: self.plant_dt,
            disturbance: self
                .disturbance
                .map(|d| Wrench::new(Vector3::from(d.force), Vector3::from(d.torque))),
            initial: VehicleState::new(self.initial.pose(), self.initial.twist()),
            goal_tolerance: self.goal_tolerance,
        }
    }

    pub fn cost_function(&self, scenario: &Scenario) -> CostFunction {
        CostFunction {
            goal: scenario.goal,
            weights: self.cost.weights,
            form: self.cost.form,
            obstacles: scenario.obstacles.clone(),
            margin: scenario.collision_margin,
        }
    }
}

/// Reads a scenario, applies overrides, and resolves the vehicle. `base_dir`
/// anchors a relative `vehicle` path.
pub fn resolve_scenario_text(
    text: &str,
    overrides: &[String],
    base_dir: &Path,
) -> Result<ResolvedScenario, ConfigError> {
    let mut tree = parse_value(text)?;
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let source = overrides.is_empty().then_some(text);
    let file: ScenarioFile = typed(tree.clone(), source)?;
    let (model, vehicle_toml) = match &file.vehicle {
        Some(p) => {
            let path = base_dir.join(p);
            let vt = std::fs::read_to_string(&path)
                .map_err(|e| ConfigError::new(format!("cannot read vehicle file: {e}")).in_file(&path))?;
            (parse_vehicle(&vt).map_err(|e| e.in_file(&path))?, vt)
        }
        None => {
            let m = VehicleModel::default_rexrov();
            let vt = vehicle_to_toml(&m);
            (m, vt)
        }
    };
    if file.cost.weights.0.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(ConfigError::new("cost.weights must be finite and non-negative"));
    }
    for (name, g) in [
        ("pid.single", &file.pid.single),
        ("pid.cascade.position", &file.pid.cascade.position),
        ("pid.cascade.velocity", &file.pid.cascade.velocity),
    ] {
        g.validate().map_err(|e| ConfigError::new(format!("{name}: {e}")))?;
    }
    file.sweep.validate()?;
    let scenario = file.scenario();
    scenario
        .validate()
        .map_err(|e| ConfigError::new(e.to_string()))?;
    let mppi = file.mppi.to_config(&model, scenario.control_dt)?;
    let cost = file.cost_function(&scenario);
    Ok(ResolvedScenario {
        resolved_toml: toml::to_string(&tree).expect("parsed TOML re-serializes"),
        vehicle_toml,
        file,
        model,
        scenario,
        mppi,
        cost,
    })
}

pub fn load_scenario(path: &Path, overrides: &[String]) -> Result<ResolvedScenario, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(format!("cannot read scenario file: {e}")).in_file(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    resolve_scenario_text(&text, overrides, base).map_err(|e| e.in_file(path))
}
