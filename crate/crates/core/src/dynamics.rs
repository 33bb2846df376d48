//! 6-DOF Fossen-style vehicle dynamics.
//!
//! The body velocity evolves as
//! `M_tot * dnu/dt = tau_C + tau_N - C(nu) nu - D(nu) nu - g(m)`
//! and the pose follows by right-composition with the body twist. One
//! discrete step holds the control wrench constant and integrates both with
//! the explicit midpoint rule.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::lie_se3::{skew, Pose, Twist};

/// Standard gravity [m/s^2].
pub const GRAVITY: f64 = 9.81;

/// Largest accepted condition number of the total mass matrix.
pub const MAX_MASS_CONDITION: f64 = 1e8;

/// Rating of each horizontal thruster of the built-in vehicle, N.
pub const HORIZONTAL_THRUST: f64 = 700.0;
/// Rating of each vertical thruster of the built-in vehicle, N.
pub const VERTICAL_THRUST: f64 = 8000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("total mass matrix is singular or ill-conditioned (condition number {condition:e})")]
    SingularMass { condition: f64 },
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("thruster allocation matrix has rank {rank}, the vehicle needs rank 6")]
    RankDeficient { rank: usize },
    #[error("dynamics produced a non-finite state")]
    NonFiniteState,
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ModelError {
    ModelError::InvalidParameter {
        field,
        reason: reason.into(),
    }
}

/// Pose plus body-frame velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    pub pose: Pose,
    pub velocity: Twist,
}

impl VehicleState {
    pub fn new(pose: Pose, velocity: Twist) -> Self {
        Self { pose, velocity }
    }

    pub fn at_rest(pose: Pose) -> Self {
        Self::new(pose, Twist::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.pose.is_finite() && self.velocity.is_finite()
    }

    /// `[x, y, z, qw, qx, qy, qz, u, v, w, p, q, r]`
    pub fn to_array(&self) -> [f64; 13] {
        let p = self.pose.position;
        let q = self.pose.orientation.coords();
        let v = self.velocity.to_vector();
        [
            p.x, p.y, p.z, q[0], q[1], q[2], q[3], v[0], v[1], v[2], v[3], v[4], v[5],
        ]
    }
}

/// Body-frame force and torque.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Self { force, torque }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            force: v.fixed_rows::<3>(0).into_owned(),
            torque: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidBodyParams {
    /// kg
    pub mass: f64,
    /// kg m^2, about the body origin
    pub inertia: Matrix3<f64>,
    /// Center of gravity in the body frame, m.
    pub cog: Vector3<f64>,
}

impl RigidBodyParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(invalid("mass", format!("must be positive, got {}", self.mass)));
        }
        if !self.inertia.iter().all(|v| v.is_finite()) {
            return Err(invalid("inertia", "entries must be finite"));
        }
        if (self.inertia - self.inertia.transpose()).amax() > 1e-9 * self.inertia.amax().max(1.0) {
            return Err(invalid("inertia", "must be symmetric"));
        }
        if self.inertia.cholesky().is_none() {
            return Err(invalid("inertia", "must be positive definite"));
        }
        if !self.cog.iter().all(|v| v.is_finite()) {
            return Err(invalid("cog", "entries must be finite"));
        }
        Ok(())
    }

    /// Rigid-body mass matrix `[m I, -m S(r_g); m S(r_g), I_o]`.
    pub fn mass_matrix(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        let s = skew(&self.cog) * self.mass;
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(Matrix3::identity() * self.mass));
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-s));
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&s);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.inertia);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HydroParams {
    pub added_mass: Matrix6<f64>,
    pub linear_damping: Matrix6<f64>,
    /// Diagonal quadratic damping coefficients.
    pub quadratic_damping: Vector6<f64>,
    /// Buoyancy force magnitude, N.
    pub buoyancy_force: f64,
    /// Center of buoyancy in the body frame, m.
    pub cob: Vector3<f64>,
}

impl HydroParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all_finite = self
            .added_mass
            .iter()
            .chain(self.linear_damping.iter())
            .chain(self.quadratic_damping.iter())
            .chain(self.cob.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(invalid("hydrodynamics", "entries must be finite"));
        }
        let ma = &self.added_mass;
        if (ma - ma.transpose()).amax() > 1e-9 * ma.amax().max(1.0) {
            return Err(invalid("added_mass", "must be symmetric"));
        }
        let min_eig = ma.symmetric_eigenvalues().min();
        if min_eig < -1e-9 * ma.amax().max(1.0) {
            return Err(invalid(
                "added_mass",
                format!("must be positive semidefinite, smallest eigenvalue {min_eig}"),
            ));
        }
        if self.quadratic_damping.iter().any(|&d| d < 0.0) {
            return Err(invalid("quadratic_damping", "coefficients must be non-negative"));
        }
        if !(self.buoyancy_force.is_finite() && self.buoyancy_force >= 0.0) {
            return Err(invalid("buoyancy_force", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Linear map from individual thruster forces to the body wrench.
#[derive(Debug, Clone, PartialEq)]
pub struct ThrusterAllocation {
    tam: DMatrix<f64>,
    columns: Vec<Vector6<f64>>,
    pinv: DMatrix<f64>,
    limits: Vec<f64>,
}

impl ThrusterAllocation {
    /// Same saturation limit for every thruster.
    pub fn new(tam: DMatrix<f64>, max_thrust: f64) -> Result<Self, ModelError> {
        let n = tam.ncols();
        Self::with_limits(tam, vec![max_thrust; n])
    }

    /// One saturation limit per thruster, N.
    pub fn with_limits(tam: DMatrix<f64>, limits: Vec<f64>) -> Result<Self, ModelError> {
        if tam.nrows() != 6 {
            return Err(ModelError::DimensionMismatch {
                expected: 6,
                found: tam.nrows(),
            });
        }
        if tam.ncols() < 6 {
            return Err(invalid("tam", format!("needs at least 6 thrusters, got {}", tam.ncols())));
        }
        if !tam.iter().all(|v| v.is_finite()) {
            return Err(invalid("tam", "entries must be finite"));
        }
        if limits.len() != tam.ncols() {
            return Err(ModelError::DimensionMismatch {
                expected: tam.ncols(),
                found: limits.len(),
            });
        }
        if let Some(bad) = limits.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(invalid("max_thrust", format!("must be positive, got {bad}")));
        }
        let rank = tam.rank(1e-9 * tam.amax().max(1.0));
        if rank < 6 {
            return Err(ModelError::RankDeficient { rank });
        }
        let gram = &tam * tam.transpose();
        let gram_inv = gram
            .try_inverse()
            .ok_or(ModelError::RankDeficient { rank })?;
        let pinv = tam.transpose() * gram_inv;
        let columns = (0..tam.ncols())
            .map(|j| Vector6::from_iterator(tam.column(j).iter().copied()))
            .collect();
        Ok(Self {
            tam,
            columns,
            pinv,
            limits,
        })
    }

    /// Direct 6-DOF wrench commands (`tam = I`).
    pub fn pass_through(max_thrust: f64) -> Result<Self, ModelError> {
        Self::new(DMatrix::identity(6, 6), max_thrust)
    }

    pub fn num_thrusters(&self) -> usize {
        self.columns.len()
    }

    /// Per-thruster saturation limits, N.
    pub fn limits(&self) -> &[f64] {
        &self.limits
    }

    /// Largest single-thruster limit.
    pub fn max_thrust(&self) -> f64 {
        self.limits.iter().copied().fold(0.0, f64::max)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.tam
    }

    /// Minimum-norm inverse `tam^T (tam tam^T)^-1`.
    pub fn pseudo_inverse(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    pub fn clamp_command(&self, thruster: usize, c: f64) -> f64 {
        let l = self.limits[thruster];
        c.clamp(-l, l)
    }

    pub fn clamp_all(&self, commands: &mut [f64]) {
        for (c, l) in commands.iter_mut().zip(&self.limits) {
            *c = c.clamp(-l, *l);
        }
    }

    /// Wrench produced by the saturated commands.
    pub fn allocate(&self, commands: &[f64]) -> Result<Wrench, ModelError> {
        if commands.len() != self.num_thrusters() {
            return Err(ModelError::DimensionMismatch {
                expected: self.num_thrusters(),
                found: commands.len(),
            });
        }
        Ok(Wrench::from_vector(&self.allocate_vector(commands)))
    }

    /// Caller guarantees `commands.len() == num_thrusters()`.
    pub(crate) fn allocate_vector(&self, commands: &[f64]) -> Vector6<f64> {
        let mut w = Vector6::zeros();
        for ((col, &c), &l) in self.columns.iter().zip(commands).zip(&self.limits) {
            w += col * c.clamp(-l, l);
        }
        w
    }

    /// Thruster commands realizing `wrench` in the least-norm sense, saturated.
    pub fn commands_for(&self, wrench: &Wrench) -> Vec<f64> {
        let w = wrench.to_vector();
        (0..self.num_thrusters())
            .map(|i| {
                let c: f64 = (0..6).map(|j| self.pinv[(i, j)] * w[j]).sum();
                self.clamp_command(i, c)
            })
            .collect()
    }
}

/// Result of one discrete step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: VehicleState,
    /// Some command exceeded its thruster limit and was saturated.
    pub clamped: bool,
}

/// Complete parameter set with the cached total mass matrix and its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleModel {
    rigid_body: RigidBodyParams,
    hydro: HydroParams,
    thrusters: ThrusterAllocation,
    gravity: f64,
    mass_total: Matrix6<f64>,
    mass_inv: Matrix6<f64>,
}

impl VehicleModel {
    pub fn new(
        rigid_body: RigidBodyParams,
        hydro: HydroParams,
        thrusters: ThrusterAllocation,
        gravity: f64,
    ) -> Result<Self, ModelError> {
        rigid_body.validate()?;
        hydro.validate()?;
        if !(gravity.is_finite() && gravity >= 0.0) {
            return Err(invalid("gravity", "must be finite and non-negative"));
        }
        let mass_total = rigid_body.mass_matrix() + hydro.added_mass;
        let sym = (mass_total + mass_total.transpose()) * 0.5;
        let eig = sym.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition < MAX_MASS_CONDITION) {
            return Err(ModelError::SingularMass { condition });
        }
        let mass_inv = mass_total
            .try_inverse()
            .ok_or(ModelError::SingularMass { condition })?;
        Ok(Self {
            rigid_body,
            hydro,
            thrusters,
            gravity,
            mass_total,
            mass_inv,
        })
    }

    /// Heavy work-class ROV (about 1860 kg) with eight vectored thrusters,
    /// neutrally buoyant, CoB 0.3 m above CoG.
    pub fn default_rexrov() -> Self {
        let mass = 1862.87;
        let rigid_body = RigidBodyParams {
            mass,
            inertia: Matrix3::from_diagonal(&Vector3::new(525.39, 794.2, 691.23)),
            cog: Vector3::zeros(),
        };
        let hydro = HydroParams {
            added_mass: Matrix6::from_diagonal(&Vector6::new(
                779.79, 1222.0, 3659.9, 534.9, 842.69, 224.32,
            )),
            linear_damping: Matrix6::from_diagonal(&Vector6::new(
                74.82, 69.48, 728.4, 268.8, 309.77, 105.0,
            )),
            quadratic_damping: Vector6::new(748.22, 992.53, 1821.01, 672.0, 774.44, 523.27),
            buoyancy_force: mass * GRAVITY,
            cob: Vector3::new(0.0, 0.0, 0.3),
        };
        Self::new(rigid_body, hydro, default_eight_thrusters(), GRAVITY)
            .expect("built-in vehicle parameters are valid")
    }

    pub fn rigid_body(&self) -> &RigidBodyParams {
        &self.rigid_body
    }

    pub fn hydro(&self) -> &HydroParams {
        &self.hydro
    }

    pub fn thrusters(&self) -> &ThrusterAllocation {
        &self.thrusters
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    pub fn num_inputs(&self) -> usize {
        self.thrusters.num_thrusters()
    }

    pub fn thrust_limits(&self) -> &[f64] {
        self.thrusters.limits()
    }

    /// Weight `m g`, N.
    pub fn weight(&self) -> f64 {
        self.rigid_body.mass * self.gravity
    }

    /// `M_RB + M_A`
    pub fn total_mass(&self) -> &Matrix6<f64> {
        &self.mass_total
    }

    pub fn total_mass_inverse(&self) -> &Matrix6<f64> {
        &self.mass_inv
    }

    /// Rebuilds with modified parameters, re-validating everything.
    pub fn with_params(
        &self,
        rigid_body: RigidBodyParams,
        hydro: HydroParams,
    ) -> Result<Self, ModelError> {
        Self::new(rigid_body, hydro, self.thrusters.clone(), self.gravity)
    }

    pub fn with_thrusters(&self, thrusters: ThrusterAllocation) -> Result<Self, ModelError> {
        Self::new(
            self.rigid_body.clone(),
            self.hydro.clone(),
            thrusters,
            self.gravity,
        )
    }

    /// Combined rigid-body and added-mass Coriolis matrix, skew-symmetric
    /// parameterization built from `M_tot nu`.
    pub fn coriolis(&self, nu: &Twist) -> Matrix6<f64> {
        let (a1, a2) = self.momentum(nu);
        let s1 = skew(&a1);
        let s2 = skew(&a2);
        let mut c = Matrix6::zeros();
        c.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-s1));
        c.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-s1));
        c.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-s2));
        c
    }

    fn momentum(&self, nu: &Twist) -> (Vector3<f64>, Vector3<f64>) {
        let p = self.mass_total * nu.to_vector();
        (
            p.fixed_rows::<3>(0).into_owned(),
            p.fixed_rows::<3>(3).into_owned(),
        )
    }

    /// `C(nu) nu` without forming the matrix.
    pub fn coriolis_force(&self, nu: &Twist) -> Vector6<f64> {
        let (a1, a2) = self.momentum(nu);
        let f = -a1.cross(&nu.angular);
        let t = -a1.cross(&nu.linear) - a2.cross(&nu.angular);
        Vector6::new(f.x, f.y, f.z, t.x, t.y, t.z)
    }

    /// `D_lin + diag(d_quad_i |nu_i|)`
    pub fn damping(&self, nu: &Twist) -> Matrix6<f64> {
        let v = nu.to_vector();
        let mut d = self.hydro.linear_damping;
        for i in 0..6 {
            d[(i, i)] += self.hydro.quadratic_damping[i] * v[i].abs();
        }
        d
    }

    /// `D(nu) nu` without forming the matrix.
    pub fn damping_force(&self, nu: &Twist) -> Vector6<f64> {
        let v = nu.to_vector();
        let mut f = self.hydro.linear_damping * v;
        for i in 0..6 {
            f[i] += self.hydro.quadratic_damping[i] * v[i].abs() * v[i];
        }
        f
    }

    /// Restoring term `g(m)` as it appears on the left-hand side of the
    /// equations of motion. The physical gravity/buoyancy wrench acting on
    /// the body is `-g(m)`. World z points up.
    pub fn restoring(&self, pose: &Pose) -> Vector6<f64> {
        let q = &pose.orientation;
        let w = self.weight();
        let b = self.hydro.buoyancy_force;
        let down_body = q.inverse_rotate(&Vector3::new(0.0, 0.0, -1.0));
        let f_weight = down_body * w;
        let f_buoy = down_body * (-b);
        let force = down_body * (w - b);
        let torque = self.rigid_body.cog.cross(&f_weight) + self.hydro.cob.cross(&f_buoy);
        -Vector6::new(force.x, force.y, force.z, torque.x, torque.y, torque.z)
    }

    /// Body acceleration for total wrench `tau_C + tau_N`.
    pub fn acceleration(
        &self,
        state: &VehicleState,
        control: &Wrench,
        external: &Wrench,
    ) -> Vector6<f64> {
        self.acceleration_vec(state, &(control.to_vector() + external.to_vector()))
    }

    fn acceleration_vec(&self, state: &VehicleState, tau: &Vector6<f64>) -> Vector6<f64> {
        let nu = &state.velocity;
        let rhs = tau
            - self.coriolis_force(nu)
            - self.damping_force(nu)
            - self.restoring(&state.pose);
        self.mass_inv * rhs
    }

    /// One midpoint step with the total wrench held constant.
    pub fn step_wrench(&self, state: &VehicleState, tau: &Vector6<f64>, dt: f64) -> VehicleState {
        let nu = state.velocity.to_vector();
        let k1 = self.acceleration_vec(state, tau);
        let half = 0.5 * dt;
        let nu_mid = Twist::from_vector(&(nu + k1 * half));
        let mid = VehicleState::new(state.pose.oplus(&state.velocity, half), nu_mid);
        let k2 = self.acceleration_vec(&mid, tau);
        VehicleState::new(
            state.pose.oplus(&nu_mid, dt),
            Twist::from_vector(&(nu + k2 * dt)),
        )
    }

    /// Advances `state` by `dt` under saturated thruster `commands` and a
    /// constant exterior wrench.
    pub fn step(
        &self,
        state: &VehicleState,
        commands: &[f64],
        external: &Wrench,
        dt: f64,
    ) -> Result<StepOutcome, ModelError> {
        if commands.len() != self.num_inputs() {
            return Err(ModelError::DimensionMismatch {
                expected: self.num_inputs(),
                found: commands.len(),
            });
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        let clamped = commands
            .iter()
            .zip(self.thrust_limits())
            .any(|(c, l)| c.abs() > *l);
        let tau = self.thrusters.allocate_vector(commands) + external.to_vector();
        let next = self.step_wrench(state, &tau, dt);
        if !next.is_finite() {
            return Err(ModelError::NonFiniteState);
        }
        Ok(StepOutcome {
            state: next,
            clamped,
        })
    }

    /// Kinetic energy `1/2 nu^T M_tot nu`.
    pub fn kinetic_energy(&self, nu: &Twist) -> f64 {
        let v = nu.to_vector();
        0.5 * v.dot(&(self.mass_total * v))
    }

    /// Order-sensitive hash of every parameter bit, for detecting mutation.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: f64| {
            // -0.0 and 0.0 describe the same vehicle
            let x = if x == 0.0 { 0.0 } else { x };
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        feed(self.rigid_body.mass);
        self.rigid_body.inertia.iter().for_each(|&x| feed(x));
        self.rigid_body.cog.iter().for_each(|&x| feed(x));
        self.hydro.added_mass.iter().for_each(|&x| feed(x));
        self.hydro.linear_damping.iter().for_each(|&x| feed(x));
        self.hydro.quadratic_damping.iter().for_each(|&x| feed(x));
        feed(self.hydro.buoyancy_force);
        self.hydro.cob.iter().for_each(|&x| feed(x));
        self.thrusters.tam.iter().for_each(|&x| feed(x));
        self.thrusters.limits.iter().for_each(|&x| feed(x));
        feed(self.gravity);
        h
    }
}

/// Four horizontal thrusters at 45 degrees in the corners, rated
/// [`HORIZONTAL_THRUST`], plus four vertical thrusters rated [`VERTICAL_THRUST`].
pub fn default_eight_thrusters() -> ThrusterAllocation {
    let c = std::f64::consts::FRAC_1_SQRT_2;
    let layout: [([f64; 3], [f64; 3]); 8] = [
        ([1.2, 0.8, 0.0], [c, -c, 0.0]),
        ([1.2, -0.8, 0.0], [c, c, 0.0]),
        ([-1.2, 0.8, 0.0], [c, c, 0.0]),
        ([-1.2, -0.8, 0.0], [c, -c, 0.0]),
        ([0.9, 0.7, 0.0], [0.0, 0.0, 1.0]),
        ([0.9, -0.7, 0.0], [0.0, 0.0, 1.0]),
        ([-0.9, 0.7, 0.0], [0.0, 0.0, 1.0]),
        ([-0.9, -0.7, 0.0], [0.0, 0.0, 1.0]),
    ];
    let mut tam = DMatrix::zeros(6, layout.len());
    for (j, (pos, dir)) in layout.iter().enumerate() {
        let p = Vector3::from(*pos);
        let d = Vector3::from(*dir);
        let m = p.cross(&d);
        for i in 0..3 {
            tam[(i, j)] = d[i];
            tam[(i + 3, j)] = m[i];
        }
    }
    let limits = (0..layout.len())
        .map(|j| if j < 4 { HORIZONTAL_THRUST } else { VERTICAL_THRUST })
        .collect();
    ThrusterAllocation::with_limits(tam, limits).expect("built-in layout is fully actuated")
}
