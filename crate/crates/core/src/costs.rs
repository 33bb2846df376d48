//! Waypoint tracking cost and cylinder obstacles.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::lie_se3::{quat_angle_error, Pose, Twist};

/// Desired pose and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GoalSpec {
    pub pose: Pose,
    pub velocity: Twist,
}

impl GoalSpec {
    pub fn at_rest(pose: Pose) -> Self {
        Self {
            pose,
            velocity: Twist::zero(),
        }
    }
}

/// Diagonal weights over `(x, y, z, angle, u, v, w, p, q, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostWeights(pub [f64; 10]);

impl CostWeights {
    /// `diag(10, 10, 10, 100, 10, 10, 10, 10, 10, 10)`
    pub const WAYPOINT: CostWeights =
        CostWeights([10.0, 10.0, 10.0, 100.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0]);

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|w| w.is_finite() && *w >= 0.0)
    }

    pub fn scaled(&self, c: f64) -> Self {
        CostWeights(self.0.map(|w| w * c))
    }
}

impl Default for CostWeights {
    fn default() -> Self {
        Self::WAYPOINT
    }
}

/// How the weighted error is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormForm {
    /// `sqrt(e^T Q e)`
    #[default]
    Norm,
    /// `e^T Q e`
    Squared,
}

/// Error vector `(p - p_des, angle(q^-1 q_des), nu - nu_des)`.
pub fn tracking_error(x: &VehicleState, goal: &GoalSpec) -> [f64; 10] {
    let dp = x.pose.position - goal.pose.position;
    let angle = quat_angle_error(&x.pose.orientation, &goal.pose.orientation);
    let dv = x.velocity.to_vector() - goal.velocity.to_vector();
    [
        dp.x, dp.y, dp.z, angle, dv[0], dv[1], dv[2], dv[3], dv[4], dv[5],
    ]
}

fn weighted(x: &VehicleState, goal: &GoalSpec, q: &CostWeights, form: NormForm) -> f64 {
    let e = tracking_error(x, goal);
    let sq: f64 = e.iter().zip(q.0.iter()).map(|(e, w)| w * e * e).sum();
    match form {
        NormForm::Norm => sq.sqrt(),
        NormForm::Squared => sq,
    }
}

/// Scaled L2 step cost `||x - x_des||_Q`.
pub fn step_cost(x: &VehicleState, goal: &GoalSpec, q: &CostWeights) -> f64 {
    weighted(x, goal, q, NormForm::Norm)
}

/// Terminal cost; the same function as the step cost.
pub fn terminal_cost(x: &VehicleState, goal: &GoalSpec, q: &CostWeights) -> f64 {
    step_cost(x, goal, q)
}

/// Vertical cylinder, axis along world z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylinderObstacle {
    pub center: [f64; 3],
    pub radius: f64,
    pub half_height: f64,
}

impl CylinderObstacle {
    pub fn new(center: Vector3<f64>, radius: f64, half_height: f64) -> Self {
        Self {
            center: center.into(),
            radius,
            half_height,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.radius > 0.0
            && self.half_height > 0.0
            && self.center.iter().all(|c| c.is_finite())
    }

    /// Point-with-margin containment test.
    pub fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        let dx = p.x - self.center[0];
        let dy = p.y - self.center[1];
        let r = self.radius + margin;
        dx * dx + dy * dy <= r * r && (p.z - self.center[2]).abs() <= self.half_height + margin
    }
}

/// True iff the vehicle reference point lies inside any inflated cylinder.
pub fn check_collision(x: &VehicleState, obstacles: &[CylinderObstacle], margin: f64) -> bool {
    obstacles
        .iter()
        .any(|o| o.contains(&x.pose.position, margin))
}

/// Everything a rollout needs to score states.
#[derive(Debug, Clone, PartialEq)]
pub struct CostFunction {
    pub goal: GoalSpec,
    pub weights: CostWeights,
    pub form: NormForm,
    pub obstacles: Vec<CylinderObstacle>,
    pub margin: f64,
}

impl CostFunction {
    pub const DEFAULT_MARGIN: f64 = 1.0;

    pub fn waypoint(goal: GoalSpec) -> Self {
        Self {
            goal,
            weights: CostWeights::WAYPOINT,
            form: NormForm::Norm,
            obstacles: Vec::new(),
            margin: Self::DEFAULT_MARGIN,
        }
    }

    pub fn with_obstacles(mut self, obstacles: Vec<CylinderObstacle>, margin: f64) -> Self {
        self.obstacles = obstacles;
        self.margin = margin;
        self
    }

    pub fn step(&self, x: &VehicleState) -> f64 {
        weighted(x, &self.goal, &self.weights, self.form)
    }

    pub fn terminal(&self, x: &VehicleState) -> f64 {
        self.step(x)
    }

    pub fn collides(&self, x: &VehicleState) -> bool {
        check_collision(x, &self.obstacles, self.margin)
    }
}
