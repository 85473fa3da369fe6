//! Parameterized CartPole and Pendulum with analytic dynamics, known reward
//! functions, and regime-based parameter grids.
//!
//! The physics is exposed as pure functions over observation vectors
//! ([`step_obs`], [`reward_fn`]) so the same code drives the real
//! environments, the planner's reward evaluation, and the oracle model used
//! by test suites. The hidden context is the parameter struct: two instances
//! with different parameters are different MDPs sharing one state space.
//!
//! Conventions: CartPole observes (x, x_dot, theta, theta_dot) with theta = 0
//! upright and discrete push actions {0, 1} mapping to force -f/+f; Pendulum
//! observes (cos theta, sin theta, theta_dot) with theta = 0 upright,
//! counter-clockwise positive, torque in [-2, 2]. Integration is semi-implicit
//! Euler (velocity first, then position with the new velocity).

use crate::error::{Error, Result};
use ndarray::Array1;
use rand::Rng;

/// Hard episode cap shared by both environments.
pub const EPISODE_CAP: usize = 200;

const GRAVITY_CARTPOLE: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const DT_CARTPOLE: f64 = 0.02;
/// 14 degrees in radians; the pole-angle failure bound.
const THETA_LIMIT: f64 = 2.0 * std::f64::consts::PI * 14.0 / 360.0;
const X_LIMIT: f64 = 2.4;

const GRAVITY_PENDULUM: f64 = 10.0;
const DT_PENDULUM: f64 = 0.05;
const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvId {
    Cartpole,
    Pendulum,
}

impl EnvId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(EnvId::Cartpole),
            "pendulum" => Ok(EnvId::Pendulum),
            other => Err(Error::config(format!(
                "unknown env '{other}' (expected 'cartpole' or 'pendulum')"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EnvId::Cartpole => "cartpole",
            EnvId::Pendulum => "pendulum",
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            EnvId::Cartpole => 4,
            EnvId::Pendulum => 3,
        }
    }

    pub fn action_dim(&self) -> usize {
        1
    }

    /// The two context-parameter axes, in (axis0, axis1) order.
    pub fn param_names(&self) -> [&'static str; 2] {
        match self {
            EnvId::Cartpole => ["force", "length"],
            EnvId::Pendulum => ["mass", "length"],
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            EnvId::Cartpole => ActionSpace::Discrete2,
            EnvId::Pendulum => ActionSpace::Box {
                lo: -MAX_TORQUE,
                hi: MAX_TORQUE,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionSpace {
    /// {0, 1}: push left / push right.
    Discrete2,
    /// Closed interval of torques.
    Box { lo: f64, hi: f64 },
}

impl ActionSpace {
    pub fn clip(&self, a: f64) -> f64 {
        match self {
            ActionSpace::Discrete2 => {
                if a >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            ActionSpace::Box { lo, hi } => a.clamp(*lo, *hi),
        }
    }
}

/// The hidden context: physical parameters that define the transition
/// dynamics of one environment instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvParams {
    Cartpole { force: f64, length: f64 },
    Pendulum { mass: f64, length: f64 },
}

impl EnvParams {
    pub fn env(&self) -> EnvId {
        match self {
            EnvParams::Cartpole { .. } => EnvId::Cartpole,
            EnvParams::Pendulum { .. } => EnvId::Pendulum,
        }
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        match (self, name) {
            (EnvParams::Cartpole { force, .. }, "force") => Ok(*force),
            (EnvParams::Cartpole { length, .. }, "length") => Ok(*length),
            (EnvParams::Pendulum { mass, .. }, "mass") => Ok(*mass),
            (EnvParams::Pendulum { length, .. }, "length") => Ok(*length),
            _ => Err(Error::config(format!(
                "env '{}' has no parameter '{name}'",
                self.env().as_str()
            ))),
        }
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if value <= 0.0 || !value.is_finite() {
            return Err(Error::config(format!(
                "parameter '{name}' must be finite and > 0, got {value}"
            )));
        }
        match (&mut *self, name) {
            (EnvParams::Cartpole { force, .. }, "force") => *force = value,
            (EnvParams::Cartpole { length, .. }, "length") => *length = value,
            (EnvParams::Pendulum { mass, .. }, "mass") => *mass = value,
            (EnvParams::Pendulum { length, .. }, "length") => *length = value,
            _ => {
                return Err(Error::config(format!(
                    "env '{}' has no parameter '{name}'",
                    self.env().as_str()
                )))
            }
        }
        Ok(())
    }

    /// Middle of the training grid on both axes; the fixed "other axis" value
    /// for single-parameter sweeps and traces.
    pub fn midpoint(env: EnvId) -> Self {
        match env {
            EnvId::Cartpole => EnvParams::Cartpole {
                force: 10.0,
                length: 0.50,
            },
            EnvId::Pendulum => EnvParams::Pendulum {
                mass: 1.0,
                length: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Train,
    Moderate,
    Extreme,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Regime::Train),
            "moderate" => Ok(Regime::Moderate),
            "extreme" => Ok(Regime::Extreme),
            other => Err(Error::config(format!(
                "unknown regime '{other}' (expected 'train', 'moderate' or 'extreme')"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Train => "train",
            Regime::Moderate => "moderate",
            Regime::Extreme => "extreme",
        }
    }
}

const CARTPOLE_TRAIN_F: &[f64] = &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0];
const CARTPOLE_TRAIN_L: &[f64] = &[0.40, 0.45, 0.50, 0.55, 0.60];
const CARTPOLE_MODERATE_F: &[f64] = &[3.0, 3.5, 16.5, 17.0];
const CARTPOLE_MODERATE_L: &[f64] = &[0.25, 0.30, 0.70, 0.75];
const CARTPOLE_EXTREME_F: &[f64] = &[2.0, 2.5, 17.5, 18.0];
const CARTPOLE_EXTREME_L: &[f64] = &[0.15, 0.20, 0.80, 0.85];

// Pendulum uses the same grid for mass and length.
const PENDULUM_TRAIN: &[f64] = &[0.75, 0.80, 0.85, 0.90, 0.95, 1.0, 1.05, 1.10, 1.15, 1.20, 1.25];
const PENDULUM_MODERATE: &[f64] = &[0.50, 0.70, 1.30, 1.50];
const PENDULUM_EXTREME: &[f64] = &[0.20, 0.40, 1.60, 1.80];

/// The discrete parameter grid for (env, regime) as (axis0 values, axis1
/// values), axes ordered as in [`EnvId::param_names`].
pub fn regime_grid(env: EnvId, regime: Regime) -> (&'static [f64], &'static [f64]) {
    match (env, regime) {
        (EnvId::Cartpole, Regime::Train) => (CARTPOLE_TRAIN_F, CARTPOLE_TRAIN_L),
        (EnvId::Cartpole, Regime::Moderate) => (CARTPOLE_MODERATE_F, CARTPOLE_MODERATE_L),
        (EnvId::Cartpole, Regime::Extreme) => (CARTPOLE_EXTREME_F, CARTPOLE_EXTREME_L),
        (EnvId::Pendulum, Regime::Train) => (PENDULUM_TRAIN, PENDULUM_TRAIN),
        (EnvId::Pendulum, Regime::Moderate) => (PENDULUM_MODERATE, PENDULUM_MODERATE),
        (EnvId::Pendulum, Regime::Extreme) => (PENDULUM_EXTREME, PENDULUM_EXTREME),
    }
}

/// Grid values for one named axis of (env, regime).
pub fn axis_grid(env: EnvId, regime: Regime, axis: &str) -> Result<&'static [f64]> {
    let names = env.param_names();
    let (a0, a1) = regime_grid(env, regime);
    if axis == names[0] {
        Ok(a0)
    } else if axis == names[1] {
        Ok(a1)
    } else {
        Err(Error::config(format!(
            "env '{}' has no parameter '{axis}'",
            env.as_str()
        )))
    }
}

/// Union of an axis across all three regimes, sorted ascending; the default
/// grid for prediction-error sweeps.
pub fn sweep_axis_grid(env: EnvId, axis: &str) -> Result<Vec<f64>> {
    let mut vals: Vec<f64> = [Regime::Train, Regime::Moderate, Regime::Extreme]
        .iter()
        .flat_map(|r| axis_grid(env, *r, axis).map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    // Validate the axis name once (the flat_map above swallows errors).
    axis_grid(env, Regime::Train, axis)?;
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals.dedup();
    Ok(vals)
}

/// Draw parameters uniformly and independently per axis from the regime grid.
pub fn sample_params(env: EnvId, regime: Regime, rng: &mut impl Rng) -> EnvParams {
    let (g0, g1) = regime_grid(env, regime);
    let v0 = g0[rng.random_range(0..g0.len())];
    let v1 = g1[rng.random_range(0..g1.len())];
    match env {
        EnvId::Cartpole => EnvParams::Cartpole {
            force: v0,
            length: v1,
        },
        EnvId::Pendulum => EnvParams::Pendulum {
            mass: v0,
            length: v1,
        },
    }
}

/// Known reward function, shared by the real environment and the planner.
/// CartPole scores the state the step lands in (in-bounds indicator);
/// Pendulum scores the state the action is taken from.
pub fn reward_fn(env: EnvId, obs: &[f64], action: f64, next_obs: &[f64]) -> f64 {
    match env {
        EnvId::Cartpole => {
            let (x, th) = (next_obs[0], next_obs[2]);
            if x.abs() < X_LIMIT && th.abs() < THETA_LIMIT {
                1.0
            } else {
                0.0
            }
        }
        EnvId::Pendulum => {
            let th = obs[1].atan2(obs[0]); // wrapped to [-pi, pi]
            let th_dot = obs[2];
            let a = action.clamp(-MAX_TORQUE, MAX_TORQUE);
            -(th * th + 0.1 * th_dot * th_dot + 0.001 * a * a)
        }
    }
}

/// One transition of the analytic dynamics in observation space. Pure; does
/// not know about episode caps or termination.
pub fn step_obs(params: &EnvParams, obs: &[f64], action: f64) -> Vec<f64> {
    match *params {
        EnvParams::Cartpole { force, length } => {
            let (x, x_dot, th, th_dot) = (obs[0], obs[1], obs[2], obs[3]);
            let f = if action >= 0.5 { force } else { -force };
            let (sin, cos) = th.sin_cos();
            let total_mass = CART_MASS + POLE_MASS;
            let half_len = length / 2.0;
            let polemass_len = POLE_MASS * half_len;
            let temp = (f + polemass_len * th_dot * th_dot * sin) / total_mass;
            let th_acc = (GRAVITY_CARTPOLE * sin - cos * temp)
                / (half_len * (4.0 / 3.0 - POLE_MASS * cos * cos / total_mass));
            let x_acc = temp - polemass_len * th_acc * cos / total_mass;
            let new_x_dot = x_dot + DT_CARTPOLE * x_acc;
            let new_x = x + DT_CARTPOLE * new_x_dot;
            let new_th_dot = th_dot + DT_CARTPOLE * th_acc;
            let new_th = th + DT_CARTPOLE * new_th_dot;
            vec![new_x, new_x_dot, new_th, new_th_dot]
        }
        EnvParams::Pendulum { mass, length } => {
            let th = obs[1].atan2(obs[0]);
            let th_dot = obs[2];
            let a = action.clamp(-MAX_TORQUE, MAX_TORQUE);
            let th_acc = 3.0 * GRAVITY_PENDULUM / (2.0 * length) * th.sin()
                + 3.0 / (mass * length * length) * a;
            let new_th_dot = (th_dot + DT_PENDULUM * th_acc).clamp(-MAX_SPEED, MAX_SPEED);
            let new_th = th + DT_PENDULUM * new_th_dot;
            vec![new_th.cos(), new_th.sin(), new_th_dot]
        }
    }
}

/// A live environment instance: parameters plus current observation and step
/// counter.
#[derive(Debug, Clone)]
pub struct Env {
    pub params: EnvParams,
    obs: Array1<f64>,
    t: usize,
    done: bool,
}

impl Env {
    /// Create an instance in need of a `reset` before stepping.
    pub fn new(params: EnvParams) -> Self {
        let dim = params.env().obs_dim();
        Env {
            params,
            obs: Array1::zeros(dim),
            t: 0,
            done: true,
        }
    }

    pub fn id(&self) -> EnvId {
        self.params.env()
    }

    pub fn obs(&self) -> &Array1<f64> {
        &self.obs
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Draw the initial state: CartPole all four entries U[-0.05, 0.05];
    /// Pendulum theta U[-pi, pi], theta_dot U[-1, 1].
    pub fn reset(&mut self, rng: &mut impl Rng) -> Array1<f64> {
        self.t = 0;
        self.done = false;
        match self.id() {
            EnvId::Cartpole => {
                self.obs = Array1::from_shape_fn(4, |_| rng.random_range(-0.05..0.05));
            }
            EnvId::Pendulum => {
                let th = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let th_dot = rng.random_range(-1.0..1.0);
                self.obs = Array1::from_vec(vec![th.cos(), th.sin(), th_dot]);
            }
        }
        self.obs.clone()
    }

    /// Advance one step. Returns (next observation, reward, done). CartPole
    /// terminates on the first zero reward or at the episode cap; Pendulum
    /// only at the cap.
    pub fn step(&mut self, action: f64) -> Result<(Array1<f64>, f64, bool)> {
        assert!(!self.done, "stepped a finished episode; call reset first");
        let action = self.id().action_space().clip(action);
        let next = step_obs(&self.params, self.obs.as_slice().unwrap(), action);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::EnvFault(format!(
                "non-finite state after step {} of {}",
                self.t,
                self.id().as_str()
            )));
        }
        let reward = reward_fn(self.id(), self.obs.as_slice().unwrap(), action, &next);
        self.obs = Array1::from_vec(next);
        self.t += 1;
        self.done = match self.id() {
            EnvId::Cartpole => reward == 0.0 || self.t >= EPISODE_CAP,
            EnvId::Pendulum => self.t >= EPISODE_CAP,
        };
        Ok((self.obs.clone(), reward, self.done))
    }
}
