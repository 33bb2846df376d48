//! PID and cascade-PID baselines.
//!
//! Both act on a body-frame error: the position error is rotated into the
//! body frame and the orientation error is the rotation vector of
//! `q^-1 q_des`. Their wrench output is mapped to thrusters through the
//! pseudo-inverse of the allocation matrix.

use nalgebra::Vector6;
use serde::{Deserialize, Serialize};

use crate::costs::GoalSpec;
use crate::dynamics::{ThrusterAllocation, VehicleState, Wrench};

/// Diagonal PID gains with an anti-windup clamp on the integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: [f64; 6],
    pub ki: [f64; 6],
    pub kd: [f64; 6],
    #[serde(default = "PidGains::default_limit")]
    pub integral_limit: [f64; 6],
}

impl PidGains {
    pub const DEFAULT_INTEGRAL_LIMIT: f64 = 500.0;

    fn default_limit() -> [f64; 6] {
        [Self::DEFAULT_INTEGRAL_LIMIT; 6]
    }

    pub fn new(kp: [f64; 6], ki: [f64; 6], kd: [f64; 6]) -> Self {
        Self {
            kp,
            ki,
            kd,
            integral_limit: Self::default_limit(),
        }
    }

    /// Single-loop gains used in the comparison runs.
    pub fn single_loop() -> Self {
        Self::new(
            [250.0, 250.0, 250.0, 800.0, 800.0, 800.0],
            [100.0, 100.0, 100.0, 300.0, 300.0, 300.0],
            [1950.0, 1950.0, 1950.0, 1000.0, 1000.0, 1000.0],
        )
    }

    pub fn validate(&self) -> Result<(), String> {
        let gains_ok = self
            .kp
            .iter()
            .chain(&self.ki)
            .chain(&self.kd)
            .all(|g| g.is_finite() && *g >= 0.0);
        if !gains_ok {
            return Err("PID gains must be finite and non-negative".into());
        }
        if !self.integral_limit.iter().all(|l| l.is_finite() && *l > 0.0) {
            return Err("integral_limit entries must be positive".into());
        }
        Ok(())
    }
}

impl Default for PidGains {
    fn default() -> Self {
        Self::single_loop()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeGains {
    pub position: PidGains,
    pub velocity: PidGains,
}

impl Default for CascadeGains {
    fn default() -> Self {
        Self {
            position: PidGains::new(
                [10.0, 10.0, 10.0, 35.0, 35.0, 35.0],
                [1.5, 1.5, 1.5, 10.0, 10.0, 10.0],
                [35.0, 35.0, 35.0, 25.0, 25.0, 25.0],
            ),
            velocity: PidGains::new(
                [30.0, 30.0, 30.0, 50.0, 50.0, 50.0],
                [15.0, 15.0, 15.0, 40.0, 40.0, 40.0],
                [25.0, 25.0, 25.0, 30.0, 30.0, 30.0],
            ),
        }
    }
}

/// Body-frame `(R^T (p_des - p), log(q^-1 q_des))`.
pub fn pose_error(x: &VehicleState, goal: &GoalSpec) -> Vector6<f64> {
    let q = &x.pose.orientation;
    let dp = q.inverse_rotate(&(goal.pose.position - x.pose.position));
    let dr = (q.inverse() * goal.pose.orientation).rotation_vector();
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// One diagonal PID loop with clamped integrator and first-difference
/// derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct Pid {
    gains: PidGains,
    integral: Vector6<f64>,
    prev_error: Option<Vector6<f64>>,
}

impl Pid {
    pub fn new(gains: PidGains) -> Self {
        Self {
            gains,
            integral: Vector6::zeros(),
            prev_error: None,
        }
    }

    pub fn gains(&self) -> &PidGains {
        &self.gains
    }

    pub fn integral(&self) -> &Vector6<f64> {
        &self.integral
    }

    pub fn reset(&mut self) {
        self.integral = Vector6::zeros();
        self.prev_error = None;
    }

    /// `kp e + ki clamp(int e) + kd (e - e_prev) / dt`. The derivative is zero
    /// on the first call.
    pub fn step(&mut self, error: &Vector6<f64>, dt: f64) -> Vector6<f64> {
        let g = &self.gains;
        let derivative = self
            .prev_error
            .map_or_else(Vector6::zeros, |prev| (error - prev) / dt);
        let mut out = Vector6::zeros();
        for i in 0..6 {
            let lim = g.integral_limit[i];
            self.integral[i] = (self.integral[i] + error[i] * dt).clamp(-lim, lim);
            out[i] = g.kp[i] * error[i] + g.ki[i] * self.integral[i] + g.kd[i] * derivative[i];
        }
        self.prev_error = Some(*error);
        out
    }
}

/// Single PID acting on the pose error.
pub fn pid_step(pid: &mut Pid, error: &Vector6<f64>, dt: f64) -> Wrench {
    Wrench::from_vector(&pid.step(error, dt))
}

/// Outer position loop producing a body velocity reference, inner velocity
/// loop producing the wrench.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadePid {
    pub outer: Pid,
    pub inner: Pid,
}

impl CascadePid {
    pub fn new(gains: CascadeGains) -> Self {
        Self {
            outer: Pid::new(gains.position),
            inner: Pid::new(gains.velocity),
        }
    }

    pub fn reset(&mut self) {
        self.outer.reset();
        self.inner.reset();
    }
}

pub fn cascade_step(c: &mut CascadePid, x: &VehicleState, goal: &GoalSpec, dt: f64) -> Wrench {
    let v_ref = c.outer.step(&pose_error(x, goal), dt);
    let v_err = v_ref - x.velocity.to_vector();
    Wrench::from_vector(&c.inner.step(&v_err, dt))
}

/// Which PID structure a [`PidController`] runs.
#[derive(Debug, Clone, PartialEq)]
pub enum PidLaw {
    Single(Pid),
    Cascade(CascadePid),
}

/// Closed-loop wrapper: pose error in, saturated thruster commands out.
#[derive(Debug, Clone)]
pub struct PidController {
    law: PidLaw,
    goal: GoalSpec,
    allocation: ThrusterAllocation,
    dt: f64,
}

impl PidController {
    pub fn single(gains: PidGains, goal: GoalSpec, allocation: ThrusterAllocation, dt: f64) -> Self {
        Self {
            law: PidLaw::Single(Pid::new(gains)),
            goal,
            allocation,
            dt,
        }
    }

    pub fn cascade(
        gains: CascadeGains,
        goal: GoalSpec,
        allocation: ThrusterAllocation,
        dt: f64,
    ) -> Self {
        Self {
            law: PidLaw::Cascade(CascadePid::new(gains)),
            goal,
            allocation,
            dt,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.law {
            PidLaw::Single(_) => "pid",
            PidLaw::Cascade(_) => "cascade_pid",
        }
    }

    pub fn wrench(&mut self, x: &VehicleState) -> Wrench {
        match &mut self.law {
            PidLaw::Single(pid) => pid_step(pid, &pose_error(x, &self.goal), self.dt),
            PidLaw::Cascade(c) => cascade_step(c, x, &self.goal, self.dt),
        }
    }

    pub fn commands(&mut self, x: &VehicleState) -> Vec<f64> {
        let w = self.wrench(x);
        self.allocation.commands_for(&w)
    }
}
