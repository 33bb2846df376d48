//! Model Predictive Path Integral control.
//!
//! Each control step perturbs the current action sequence with `K` Gaussian
//! noise sequences, rolls every perturbed sequence through the internal
//! model, scores it, and moves the sequence towards the exponentially
//! weighted average of the perturbations. The first action is emitted and
//! the sequence is shifted one step for warm-starting the next call.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costs::CostFunction;
use crate::dynamics::{VehicleModel, VehicleState};
use crate::savgol::{self, FilterError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MppiError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("every sampled rollout was rejected")]
    AllSamplesRejected,
    #[error("rollout produced a non-finite state; check the vehicle parameters")]
    NonFiniteState,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Form of the per-step control cost `lambda * u^T A eps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCostForm {
    /// `A = Sigma^-1`, with `Sigma = diag(std^2)`.
    #[default]
    InverseCovariance,
    /// `A = diag(std)`, the expression exactly as it is usually printed in
    /// pseudocode listings.
    Literal,
}

/// How the freed last slot is filled after shifting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftInit {
    #[default]
    CopyLast,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSettings {
    pub window: usize,
    pub poly_order: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            window: 5,
            poly_order: 2,
        }
    }
}

fn noise_from_limits(model: &VehicleModel, fraction: f64) -> Vec<f64> {
    model.thrust_limits().iter().map(|l| fraction * l).collect()
}

/// Controller hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MppiConfig {
    /// K
    pub num_samples: usize,
    /// Prediction steps.
    pub horizon: usize,
    /// Per-input noise standard deviation, N.
    pub noise_std: Vec<f64>,
    /// Inverse temperature.
    pub lambda: f64,
    #[serde(default)]
    pub filter: Option<FilterSettings>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub control_cost: ControlCostForm,
    /// Multiplier on the control-cost term; 1 is the plain
    /// importance-sampling correction.
    #[serde(default = "MppiConfig::default_control_cost_weight")]
    pub control_cost_weight: f64,
    #[serde(default)]
    pub shift_init: ShiftInit,
    /// Model step used inside rollouts, s.
    #[serde(default = "MppiConfig::default_dt")]
    pub dt: f64,
}

impl MppiConfig {
    pub const DEFAULT_SAMPLES: usize = 2000;
    pub const DEFAULT_HORIZON: usize = 25;
    pub const DEFAULT_NOISE_FRACTION: f64 = 0.01;
    pub const DEFAULT_LAMBDA: f64 = 0.06;
    pub const DEFAULT_CONTROL_COST_WEIGHT: f64 = 0.01;

    fn default_control_cost_weight() -> f64 {
        Self::DEFAULT_CONTROL_COST_WEIGHT
    }

    fn default_dt() -> f64 {
        0.1
    }

    /// K = 2000, horizon 25, noise 1 % of max thrust, lambda = 0.06.
    pub fn defaults_for(model: &VehicleModel) -> Self {
        Self {
            num_samples: Self::DEFAULT_SAMPLES,
            horizon: Self::DEFAULT_HORIZON,
            noise_std: noise_from_limits(model, Self::DEFAULT_NOISE_FRACTION),
            lambda: Self::DEFAULT_LAMBDA,
            filter: None,
            seed: 0,
            control_cost: ControlCostForm::InverseCovariance,
            control_cost_weight: Self::DEFAULT_CONTROL_COST_WEIGHT,
            shift_init: ShiftInit::CopyLast,
            dt: Self::default_dt(),
        }
    }

    /// Sets each noise entry to `fraction` of that thruster's limit.
    pub fn with_noise_fraction(mut self, model: &VehicleModel, fraction: f64) -> Self {
        self.noise_std = noise_from_limits(model, fraction);
        self
    }

    pub fn validate(&self, num_inputs: usize) -> Result<(), MppiError> {
        let fail = |m: String| Err(MppiError::Config(m));
        if self.num_samples == 0 {
            return fail("num_samples must be at least 1".into());
        }
        if self.horizon == 0 {
            return fail("horizon must be at least 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return fail(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.noise_std.len() != num_inputs {
            return Err(MppiError::DimensionMismatch {
                expected: num_inputs,
                found: self.noise_std.len(),
            });
        }
        if self.noise_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return fail("every noise_std entry must be positive".into());
        }
        if !(self.control_cost_weight.is_finite() && self.control_cost_weight >= 0.0) {
            return fail("control_cost_weight must be non-negative".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0 && self.dt <= 0.2) {
            return fail(format!("dt must lie in (0, 0.2], got {}", self.dt));
        }
        if let Some(f) = self.filter {
            savgol::validate(f.window, f.poly_order)?;
            if f.window > self.horizon {
                return Err(FilterError::WindowTooLong {
                    window: f.window,
                    len: self.horizon,
                }
                .into());
            }
        }
        Ok(())
    }

    fn control_factors(&self) -> Vec<f64> {
        let scale = self.lambda * self.control_cost_weight;
        self.noise_std
            .iter()
            .map(|s| match self.control_cost {
                ControlCostForm::InverseCovariance => scale / (s * s),
                ControlCostForm::Literal => scale * s,
            })
            .collect()
    }
}

/// Horizon-by-input matrix of thruster commands, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence {
    horizon: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ActionSequence {
    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self {
            horizon,
            dim,
            data: vec![0.0; horizon * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MppiError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(MppiError::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        Ok(Self {
            horizon: rows.len(),
            dim,
            data: rows.concat(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.horizon).map(|t| self.data[t * self.dim + i]).collect()
    }

    /// Saturates column `i` to `±limits[i]`.
    pub fn clamp(&mut self, limits: &[f64]) {
        for row in self.data.chunks_mut(self.dim) {
            for (u, l) in row.iter_mut().zip(limits) {
                *u = u.clamp(-l, *l);
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, u| m.max(u.abs()))
    }
}

/// K x horizon x n perturbations, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    num_samples: usize,
    horizon: usize,
    dim: usize,
    data: Vec<f64>,
}

impl NoiseBatch {
    pub fn zeros(num_samples: usize, horizon: usize, dim: usize) -> Self {
        Self {
            num_samples,
            horizon,
            dim,
            data: vec![0.0; num_samples * horizon * dim],
        }
    }

    pub fn from_samples(samples: &[Vec<f64>], horizon: usize, dim: usize) -> Result<Self, MppiError> {
        let stride = horizon * dim;
        if let Some(bad) = samples.iter().find(|s| s.len() != stride) {
            return Err(MppiError::DimensionMismatch {
                expected: stride,
                found: bad.len(),
            });
        }
        Ok(Self {
            num_samples: samples.len(),
            horizon,
            dim,
            data: samples.concat(),
        })
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Whole sequence of sample `k`, `horizon * dim` values.
    pub fn sample(&self, k: usize) -> &[f64] {
        let stride = self.horizon * self.dim;
        &self.data[k * stride..(k + 1) * stride]
    }

    pub fn at(&self, k: usize, t: usize) -> &[f64] {
        let start = (k * self.horizon + t) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Random stream for one sample of one control step. Keyed by
/// `(seed, step, sample)` so any worker can regenerate it independently.
pub fn sample_rng(seed: u64, step: u64, sample: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&sample.to_le_bytes());
    key[24..].copy_from_slice(b"mppinois");
    ChaCha8Rng::from_seed(key)
}

fn fill_noise(rng: &mut ChaCha8Rng, std: &[f64], out: &mut [f64]) {
    let dim = std.len();
    for (j, slot) in out.iter_mut().enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        *slot = z * std[j % dim];
    }
}

/// Draws the full perturbation batch for control step `step`.
pub fn sample_noise(config: &MppiConfig, step: u64) -> NoiseBatch {
    let dim = config.noise_std.len();
    let mut batch = NoiseBatch::zeros(config.num_samples, config.horizon, dim);
    let stride = config.horizon * dim;
    batch
        .data
        .par_chunks_mut(stride.max(1))
        .enumerate()
        .for_each(|(k, chunk)| {
            let mut rng = sample_rng(config.seed, step, k as u64);
            fill_noise(&mut rng, &config.noise_std, chunk);
        });
    batch
}

/// Accumulated cost of one rollout, or the collision flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleCost {
    Finite(f64),
    Rejected,
}

impl SampleCost {
    pub fn value(&self) -> Option<f64> {
        match self {
            SampleCost::Finite(c) => Some(*c),
            SampleCost::Rejected => None,
        }
    }
}

fn rollout_with_factors(
    model: &VehicleModel,
    x0: &VehicleState,
    sequence: &ActionSequence,
    eps: &[f64],
    cost: &CostFunction,
    factors: &[f64],
    dt: f64,
) -> Result<SampleCost, MppiError> {
    let dim = sequence.dim();
    let thrusters = model.thrusters();
    let mut perturbed = vec![0.0; dim];
    let mut x = *x0;
    let mut total = 0.0;
    for t in 0..sequence.horizon() {
        let u = sequence.row(t);
        let e = &eps[t * dim..(t + 1) * dim];
        let mut control = 0.0;
        for i in 0..dim {
            let v = thrusters.clamp_command(i, u[i] + e[i]);
            perturbed[i] = v;
            control += u[i] * factors[i] * (v - u[i]);
        }
        let tau = thrusters.allocate_vector(&perturbed);
        x = model.step_wrench(&x, &tau, dt);
        if !x.is_finite() {
            return Err(MppiError::NonFiniteState);
        }
        if cost.collides(&x) {
            return Ok(SampleCost::Rejected);
        }
        total += cost.step(&x) + control;
    }
    total += cost.terminal(&x);
    Ok(SampleCost::Finite(total))
}

/// `S = sum_t [q(x_t) + lambda u_{t-1}^T A eps'_{t-1}] + phi(x_T)` where
/// `eps'` is the perturbation left after saturating `u + eps`.
pub fn rollout_cost(
    model: &VehicleModel,
    x0: &VehicleState,
    sequence: &ActionSequence,
    eps: &[f64],
    cost: &CostFunction,
    config: &MppiConfig,
) -> Result<SampleCost, MppiError> {
    let expected = sequence.horizon() * sequence.dim();
    if eps.len() != expected {
        return Err(MppiError::DimensionMismatch {
            expected,
            found: eps.len(),
        });
    }
    if sequence.dim() != model.num_inputs() || config.noise_std.len() != sequence.dim() {
        return Err(MppiError::DimensionMismatch {
            expected: model.num_inputs(),
            found: sequence.dim(),
        });
    }
    rollout_with_factors(
        model,
        x0,
        sequence,
        eps,
        cost,
        &config.control_factors(),
        config.dt,
    )
}

/// Normalized sample weights with the shift and normalizer that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub weights: Vec<f64>,
    /// Minimum finite cost.
    pub beta: f64,
    /// Sum of unnormalized weights; at least 1.
    pub eta: f64,
}

/// `w_k = exp(-(S_k - beta) / lambda) / eta`; rejected samples get zero.
pub fn compute_weights(costs: &[SampleCost], lambda: f64) -> Result<Weights, MppiError> {
    let beta = costs
        .iter()
        .filter_map(SampleCost::value)
        .fold(f64::INFINITY, f64::min);
    if !beta.is_finite() {
        return Err(MppiError::AllSamplesRejected);
    }
    let inv_lambda = 1.0 / lambda;
    let mut weights: Vec<f64> = costs
        .iter()
        .map(|c| match c {
            SampleCost::Finite(s) => (-(s - beta) * inv_lambda).exp(),
            SampleCost::Rejected => 0.0,
        })
        .collect();
    let eta = neumaier_sum(&weights);
    weights.iter_mut().for_each(|w| *w /= eta);
    Ok(Weights {
        weights,
        beta,
        eta,
    })
}

fn neumaier_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `U'_t = U_t + sum_k w_k eps_t^k`, saturated. The fold runs over samples
/// in index order, so the result does not depend on scheduling.
pub fn update_sequence(
    sequence: &ActionSequence,
    weights: &[f64],
    noise: &NoiseBatch,
    limits: &[f64],
) -> ActionSequence {
    let mut next = sequence.clone();
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (u, e) in next.data.iter_mut().zip(noise.sample(k)) {
            *u += w * e;
        }
    }
    next.clamp(limits);
    next
}

/// Drops the first row and refills the last one.
pub fn shift_sequence(sequence: &ActionSequence, init: ShiftInit) -> ActionSequence {
    let mut next = sequence.clone();
    let dim = sequence.dim;
    let h = sequence.horizon;
    if h == 0 {
        return next;
    }
    next.data.copy_within(dim.., 0);
    let last = next.row_mut(h - 1);
    match init {
        ShiftInit::CopyLast => last.copy_from_slice(sequence.row(h - 1)),
        ShiftInit::Zero => last.iter_mut().for_each(|u| *u = 0.0),
    }
    next
}

/// Savitzky-Golay smoothing of every input channel along the horizon.
pub fn sg_smooth(
    sequence: &ActionSequence,
    window: usize,
    poly_order: usize,
) -> Result<ActionSequence, MppiError> {
    let coeffs = savgol::coefficients(window, poly_order)?;
    smooth_sequence(sequence, &coeffs)
}

fn smooth_sequence(sequence: &ActionSequence, coeffs: &[f64]) -> Result<ActionSequence, MppiError> {
    let mut out = sequence.clone();
    for i in 0..sequence.dim {
        let smoothed = savgol::smooth_with(&sequence.column(i), coeffs)?;
        for (t, v) in smoothed.into_iter().enumerate() {
            out.data[t * sequence.dim + i] = v;
        }
    }
    Ok(out)
}

/// Per-step controller health record.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MppiDiagnostics {
    pub step: u64,
    pub wall_time_ms: f64,
    pub beta: f64,
    pub eta: f64,
    pub eta_over_k: f64,
    pub min_cost: f64,
    pub mean_cost: f64,
    pub rejected_fraction: f64,
}

/// Stateful receding-horizon controller. Plans with its own model, which
/// is never shared mutably with anything else.
#[derive(Debug, Clone)]
pub struct MppiController {
    config: MppiConfig,
    model: Arc<VehicleModel>,
    cost: CostFunction,
    sequence: ActionSequence,
    step: u64,
    factors: Vec<f64>,
    filter: Option<Vec<f64>>,
}

impl MppiController {
    pub fn new(
        model: Arc<VehicleModel>,
        cost: CostFunction,
        config: MppiConfig,
    ) -> Result<Self, MppiError> {
        config.validate(model.num_inputs())?;
        let filter = config
            .filter
            .map(|f| savgol::coefficients(f.window, f.poly_order))
            .transpose()?;
        Ok(Self {
            sequence: ActionSequence::zeros(config.horizon, model.num_inputs()),
            factors: config.control_factors(),
            filter,
            config,
            model,
            cost,
            step: 0,
        })
    }

    pub fn config(&self) -> &MppiConfig {
        &self.config
    }

    pub fn model(&self) -> &VehicleModel {
        &self.model
    }

    pub fn cost(&self) -> &CostFunction {
        &self.cost
    }

    pub fn cost_mut(&mut self) -> &mut CostFunction {
        &mut self.cost
    }

    pub fn sequence(&self) -> &ActionSequence {
        &self.sequence
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Zero sequence, step counter back to 0.
    pub fn reset(&mut self) {
        self.sequence = ActionSequence::zeros(self.config.horizon, self.model.num_inputs());
        self.step = 0;
    }

    /// One full iteration: sample, roll out, weight, update, smooth, emit,
    /// shift.
    pub fn control_step(
        &mut self,
        x0: &VehicleState,
    ) -> Result<(Vec<f64>, MppiDiagnostics), MppiError> {
        let started = Instant::now();
        let cfg = &self.config;
        let dim = self.model.num_inputs();
        let stride = cfg.horizon * dim;
        let mut noise = NoiseBatch::zeros(cfg.num_samples, cfg.horizon, dim);
        let (model, cost, sequence, factors) = (&*self.model, &self.cost, &self.sequence, &self.factors);
        let step = self.step;
        let costs: Vec<SampleCost> = noise
            .data
            .par_chunks_mut(stride)
            .enumerate()
            .map(|(k, eps)| {
                let mut rng = sample_rng(cfg.seed, step, k as u64);
                fill_noise(&mut rng, &cfg.noise_std, eps);
                rollout_with_factors(model, x0, sequence, eps, cost, factors, cfg.dt)
            })
            .collect::<Result<_, _>>()?;

        let weights = compute_weights(&costs, cfg.lambda)?;
        let mut updated = update_sequence(sequence, &weights.weights, &noise, model.thrust_limits());
        if let Some(coeffs) = &self.filter {
            updated = smooth_sequence(&updated, coeffs)?;
            updated.clamp(model.thrust_limits());
        }
        let command = updated.row(0).to_vec();
        self.sequence = shift_sequence(&updated, cfg.shift_init);
        self.step += 1;

        let finite: Vec<f64> = costs.iter().filter_map(SampleCost::value).collect();
        let k = costs.len() as f64;
        let diagnostics = MppiDiagnostics {
            step,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            beta: weights.beta,
            eta: weights.eta,
            eta_over_k: weights.eta / k,
            min_cost: weights.beta,
            mean_cost: finite.iter().sum::<f64>() / finite.len() as f64,
            rejected_fraction: (costs.len() - finite.len()) as f64 / k,
        };
        Ok((command, diagnostics))
    }
}
