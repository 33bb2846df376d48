//! Independent reference implementations used as test oracles. Poses are
//! carried as rotation matrices and the mass matrix is solved, never
//! inverted, so no arithmetic is shared with the library's quaternion path.

#![allow(dead_code)]

use auv_mppi::costs::CostFunction;
use auv_mppi::dynamics::{VehicleModel, VehicleState};
use auv_mppi::lie_se3::{Pose, Twist, UnitQuat};
use auv_mppi::mppi::{ControlCostForm, MppiConfig};
use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};
use rand::Rng;

fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[derive(Debug, Clone, Copy)]
pub struct RefState {
    pub p: Vector3<f64>,
    pub r: Matrix3<f64>,
    pub nu: Vector6<f64>,
}

impl RefState {
    pub fn from_state(x: &VehicleState) -> Self {
        Self {
            p: x.pose.position,
            r: x.pose.orientation.rotation_matrix(),
            nu: x.velocity.to_vector(),
        }
    }
}

/// Left-invariant exponential `[R | V v]` by power series, exact to
/// double precision for the small rotations of one integration step.
pub fn exp_se3(v: &Vector3<f64>, w: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let rot = Rotation3::new(*w).into_inner();
    let wh = hat(w);
    let theta = w.norm();
    let mut vmat = Matrix3::identity();
    if theta < 0.5 {
        // V = sum_k W^k / (k+1)!
        let mut term = Matrix3::identity();
        let mut fact = 1.0;
        for k in 1..30 {
            term *= wh;
            fact *= (k + 1) as f64;
            vmat += term / fact;
        }
    } else {
        let t2 = theta * theta;
        vmat += wh * ((1.0 - theta.cos()) / t2) + wh * wh * ((theta - theta.sin()) / (t2 * theta));
    }
    (vmat * v, rot)
}

pub struct RefModel {
    pub m: Matrix6<f64>,
    pub d_lin: Matrix6<f64>,
    pub d_quad: Vector6<f64>,
    pub weight: f64,
    pub buoyancy: f64,
    pub cog: Vector3<f64>,
    pub cob: Vector3<f64>,
    pub tam: Vec<[f64; 6]>,
    pub limits: Vec<f64>,
}

impl RefModel {
    pub fn from_model(model: &VehicleModel) -> Self {
        let rb = model.rigid_body();
        let h = model.hydro();
        let mass = rb.mass;
        let mut m = Matrix6::zeros();
        for i in 0..3 {
            m[(i, i)] = mass;
        }
        let sg = hat(&rb.cog) * mass;
        for i in 0..3 {
            for j in 0..3 {
                m[(i, 3 + j)] = -sg[(i, j)];
                m[(3 + i, j)] = sg[(i, j)];
                m[(3 + i, 3 + j)] = rb.inertia[(i, j)];
            }
        }
        m += h.added_mass;
        let tam = model.thrusters().matrix();
        Self {
            m,
            d_lin: h.linear_damping,
            d_quad: h.quadratic_damping,
            weight: mass * model.gravity(),
            buoyancy: h.buoyancy_force,
            cog: rb.cog,
            cob: h.cob,
            tam: (0..tam.ncols())
                .map(|j| std::array::from_fn(|i| tam[(i, j)]))
                .collect(),
            limits: model.thrust_limits().to_vec(),
        }
    }

    pub fn wrench(&self, commands: &[f64]) -> Vector6<f64> {
        let mut tau = Vector6::zeros();
        for (j, c) in commands.iter().enumerate() {
            let c = c.max(-self.limits[j]).min(self.limits[j]);
            for i in 0..6 {
                tau[i] += self.tam[j][i] * c;
            }
        }
        tau
    }

    /// `M nu_dot = tau - C(nu) nu - D(nu) nu + gravity and buoyancy`.
    pub fn accel(&self, x: &RefState, tau: &Vector6<f64>) -> Vector6<f64> {
        let h = self.m * x.nu;
        let v = x.nu.fixed_rows::<3>(0).into_owned();
        let w = x.nu.fixed_rows::<3>(3).into_owned();
        let hl = h.fixed_rows::<3>(0).into_owned();
        let ha = h.fixed_rows::<3>(3).into_owned();
        let cf = w.cross(&hl);
        let ct = v.cross(&hl) + w.cross(&ha);
        let mut rhs = *tau;
        for i in 0..3 {
            rhs[i] -= cf[i];
            rhs[3 + i] -= ct[i];
        }
        rhs -= self.d_lin * x.nu;
        for i in 0..6 {
            rhs[i] -= self.d_quad[i] * x.nu[i].abs() * x.nu[i];
        }
        let up_body = x.r.transpose() * Vector3::z();
        let fw = -up_body * self.weight;
        let fb = up_body * self.buoyancy;
        let f = fw + fb;
        let t = self.cog.cross(&fw) + self.cob.cross(&fb);
        for i in 0..3 {
            rhs[i] += f[i];
            rhs[3 + i] += t[i];
        }
        self.m.lu().solve(&rhs).expect("mass matrix is invertible")
    }

    fn advance(x: &RefState, nu: &Vector6<f64>, dt: f64) -> (Vector3<f64>, Matrix3<f64>) {
        let v = nu.fixed_rows::<3>(0) * dt;
        let w = nu.fixed_rows::<3>(3) * dt;
        let (t, r) = exp_se3(&v.into_owned(), &w.into_owned());
        (x.p + x.r * t, x.r * r)
    }

    /// Explicit midpoint step.
    pub fn rk2(&self, x: &RefState, tau: &Vector6<f64>, dt: f64) -> RefState {
        let k1 = self.accel(x, tau);
        let (pm, rm) = Self::advance(x, &x.nu, 0.5 * dt);
        let mid = RefState {
            p: pm,
            r: rm,
            nu: x.nu + k1 * (0.5 * dt),
        };
        let k2 = self.accel(&mid, tau);
        let (p, r) = Self::advance(x, &mid.nu, dt);
        RefState {
            p,
            r,
            nu: x.nu + k2 * dt,
        }
    }

    /// Forward Euler, for convergence-order comparisons.
    pub fn euler(&self, x: &RefState, tau: &Vector6<f64>, dt: f64) -> RefState {
        let k1 = self.accel(x, tau);
        let (p, r) = Self::advance(x, &x.nu, dt);
        RefState {
            p,
            r,
            nu: x.nu + k1 * dt,
        }
    }

    pub fn kinetic_energy(&self, nu: &Vector6<f64>) -> f64 {
        0.5 * nu.dot(&(self.m * nu))
    }
}

/// Rotation angle of `R^T R_des` via atan2, accurate near zero.
pub fn rotation_angle_between(r: &Matrix3<f64>, r_des: &Matrix3<f64>) -> f64 {
    let rel = r.transpose() * r_des;
    let s = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]).norm() / 2.0;
    let c = (rel.trace() - 1.0) / 2.0;
    s.atan2(c)
}

pub fn ref_step_cost(x: &RefState, cost: &CostFunction) -> f64 {
    let g = &cost.goal;
    let dp = x.p - g.pose.position;
    let ang = rotation_angle_between(&x.r, &g.pose.orientation.rotation_matrix());
    let dv = x.nu - g.velocity.to_vector();
    let e = [dp.x, dp.y, dp.z, ang, dv[0], dv[1], dv[2], dv[3], dv[4], dv[5]];
    let q = &cost.weights.0;
    let s: f64 = (0..10).map(|i| q[i] * e[i] * e[i]).sum();
    match cost.form {
        auv_mppi::costs::NormForm::Norm => s.sqrt(),
        auv_mppi::costs::NormForm::Squared => s,
    }
}

pub fn ref_collides(p: &Vector3<f64>, cost: &CostFunction) -> bool {
    cost.obstacles.iter().any(|o| {
        let c = Vector3::from(o.center);
        let horiz = ((p.x - c.x).powi(2) + (p.y - c.y).powi(2)).sqrt();
        horiz <= o.radius + cost.margin && (p.z - c.z).abs() <= o.half_height + cost.margin
    })
}

/// Straight-line rollout cost; `None` when the rollout collides.
pub fn ref_rollout_cost(
    model: &VehicleModel,
    x0: &VehicleState,
    u: &[Vec<f64>],
    eps: &[Vec<f64>],
    cost: &CostFunction,
    cfg: &MppiConfig,
) -> Option<f64> {
    let rm = RefModel::from_model(model);
    let mut x = RefState::from_state(x0);
    let mut total = 0.0;
    for t in 0..u.len() {
        let mut v = vec![0.0; u[t].len()];
        let mut ctrl = 0.0;
        for i in 0..v.len() {
            v[i] = (u[t][i] + eps[t][i]).clamp(-rm.limits[i], rm.limits[i]);
            let e = v[i] - u[t][i];
            let s = cfg.noise_std[i];
            let a = match cfg.control_cost {
                ControlCostForm::InverseCovariance => 1.0 / (s * s),
                ControlCostForm::Literal => s,
            };
            ctrl += cfg.lambda * cfg.control_cost_weight * u[t][i] * a * e;
        }
        let tau = rm.wrench(&v);
        x = rm.rk2(&x, &tau, cfg.dt);
        if ref_collides(&x.p, cost) {
            return None;
        }
        total += ref_step_cost(&x, cost) + ctrl;
    }
    Some(total + ref_step_cost(&x, cost))
}

pub fn random_unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_pose(rng: &mut impl Rng, max_angle: f64, max_offset: f64) -> Pose {
    let axis = random_unit_vector(rng);
    let q = UnitQuat::from_axis_angle(&axis, rng.gen_range(0.0..max_angle));
    let p = Vector3::new(
        rng.gen_range(-max_offset..max_offset),
        rng.gen_range(-max_offset..max_offset),
        rng.gen_range(-max_offset..max_offset),
    );
    Pose::new(p, q)
}

pub fn random_twist(rng: &mut impl Rng, lin: f64, ang: f64) -> Twist {
    Twist::new(
        Vector3::new(rng.gen_range(-lin..lin), rng.gen_range(-lin..lin), rng.gen_range(-lin..lin)),
        Vector3::new(rng.gen_range(-ang..ang), rng.gen_range(-ang..ang), rng.gen_range(-ang..ang)),
    )
}

/// The built-in vehicle with damping, restoring and thrust removed.
pub fn conservative_model() -> VehicleModel {
    let m = VehicleModel::default_rexrov();
    let mut h = m.hydro().clone();
    h.linear_damping = Matrix6::zeros();
    h.quadratic_damping = Vector6::zeros();
    h.buoyancy_force = m.weight();
    h.cob = m.rigid_body().cog;
    m.with_params(m.rigid_body().clone(), h).expect("valid parameters")
}
