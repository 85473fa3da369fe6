//! Sampling-based model-predictive control: every environment step, roll the
//! learned forward model over a short horizon for a population of candidate
//! action sequences, score them with the environment's reward function, and
//! execute only the first action of the winner. Two optimizers are provided:
//! plain random shooting and the cross-entropy method.
//!
//! The context vector (latent z or stacked window) is computed once from the
//! live history at the current step and held fixed for the whole horizon; the
//! backward model plays no part in planning.

use crate::envs::{reward_fn, ActionSpace, EnvId};
use crate::error::{Error, Result};
use crate::model::DynamicsModel;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Candidate count for random shooting when the config leaves it unset.
pub const DEFAULT_RS_CANDIDATES: usize = 1000;
/// Candidate count per CEM iteration when the config leaves it unset.
pub const DEFAULT_CEM_CANDIDATES: usize = 200;
/// Smallest standard deviation the CEM sampler is allowed to reach.
pub const CEM_STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanMethod {
    Rs,
    Cem,
}

impl PlanMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rs" => Ok(PlanMethod::Rs),
            "cem" => Ok(PlanMethod::Cem),
            other => Err(Error::config(format!(
                "unknown planning method '{other}' (expected 'rs' or 'cem')"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PlanMethod::Rs => "rs",
            PlanMethod::Cem => "cem",
        }
    }
}

/// Fully resolved planner settings.
#[derive(Debug, Clone, Copy)]
pub struct PlanConfig {
    pub method: PlanMethod,
    pub horizon: usize,
    pub n_candidates: usize,
    pub cem_iterations: usize,
    pub cem_elite_frac: f64,
    pub cem_alpha: f64,
}

impl PlanConfig {
    pub fn validate(&self, env: EnvId) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("planning horizon must be at least 1"));
        }
        if self.n_candidates == 0 {
            return Err(Error::config("candidate count must be at least 1"));
        }
        if self.method == PlanMethod::Cem {
            if env.action_space() == ActionSpace::Discrete2 {
                return Err(Error::config(
                    "cem plans over continuous actions; cartpole requires method 'rs'",
                ));
            }
            if !(self.cem_elite_frac > 0.0 && self.cem_elite_frac <= 1.0) {
                return Err(Error::config("cem elite fraction must lie in (0, 1]"));
            }
            if !(0.0..=1.0).contains(&self.cem_alpha) {
                return Err(Error::config("cem smoothing factor must lie in [0, 1]"));
            }
            if self.cem_iterations == 0 {
                return Err(Error::config("cem iteration count must be at least 1"));
            }
        }
        Ok(())
    }
}

/// What a single planning call decided.
#[derive(Debug, Clone, Copy)]
pub struct PlanDecision {
    /// First action of the winning sequence (or of the final CEM mean).
    pub action: f64,
    /// Model-predicted return of that sequence / mean sequence.
    pub expected_return: f64,
}

/// Score one candidate set: chain the model over the horizon from a shared
/// start state and sum rewards. Candidates whose predicted state goes
/// non-finite are finished with return negative infinity; their rows are
/// zeroed afterwards so later steps stay numerically tame. `actions` is
/// candidates x horizon.
pub fn rollout_returns(
    model: &DynamicsModel,
    obs: &ArrayView1<f64>,
    context: &ArrayView1<f64>,
    actions: &Array2<f64>,
    reward: &dyn Fn(&[f64], f64, &[f64]) -> f64,
) -> Result<Vec<f64>> {
    let n = actions.nrows();
    let h = actions.ncols();
    let ds = obs.len();
    let mut states = Array2::<f64>::zeros((n, ds));
    for mut row in states.rows_mut() {
        row.assign(obs);
    }
    let mut returns = vec![0.0f64; n];
    let mut alive = vec![true; n];
    for t in 0..h {
        let a_col = actions.column(t).to_owned().insert_axis(Axis(1));
        let next = model.predict_batch(&states.view(), &a_col.view(), context)?;
        let mut next = next;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            let row = next.row(i);
            if row.iter().any(|v| !v.is_finite()) {
                alive[i] = false;
                returns[i] = f64::NEG_INFINITY;
                next.row_mut(i).fill(0.0);
                continue;
            }
            returns[i] += reward(
                states.row(i).as_slice().unwrap(),
                actions[[i, t]],
                row.as_slice().unwrap(),
            );
        }
        states = next;
    }
    Ok(returns)
}

/// Random shooting: sample `n_candidates` independent action sequences
/// uniformly from the action space, score them all, and pick the argmax.
/// Ties keep the lowest candidate index.
pub fn plan_rs(
    model: &DynamicsModel,
    cfg: &PlanConfig,
    obs: &ArrayView1<f64>,
    context: &ArrayView1<f64>,
    reward: &dyn Fn(&[f64], f64, &[f64]) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<PlanDecision> {
    cfg.validate(model.env())?;
    let n = cfg.n_candidates;
    let h = cfg.horizon;
    let space = model.env().action_space();
    let mut actions = Array2::<f64>::zeros((n, h));
    for i in 0..n {
        for t in 0..h {
            actions[[i, t]] = match space {
                ActionSpace::Discrete2 => {
                    if rng.random_range(0..2u8) == 1 {
                        1.0
                    } else {
                        0.0
                    }
                }
                ActionSpace::Box { lo, hi } => rng.random_range(lo..=hi),
            };
        }
    }
    let returns = rollout_returns(model, obs, context, &actions, reward)?;
    let mut best = 0usize;
    for (i, r) in returns.iter().enumerate() {
        if *r > returns[best] {
            best = i;
        }
    }
    Ok(PlanDecision {
        action: actions[[best, 0]],
        expected_return: returns[best],
    })
}

/// Cross-entropy method over a diagonal Gaussian on action sequences. The
/// mean starts at zero and the per-step std at half the action range; each
/// iteration refits both to the elite set with exponential smoothing
/// (`new = alpha * old + (1 - alpha) * elite`) and a floor on the std.
/// The decision is the first entry of the final mean.
pub fn plan_cem(
    model: &DynamicsModel,
    cfg: &PlanConfig,
    obs: &ArrayView1<f64>,
    context: &ArrayView1<f64>,
    reward: &dyn Fn(&[f64], f64, &[f64]) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<PlanDecision> {
    cfg.validate(model.env())?;
    let (lo, hi) = match model.env().action_space() {
        ActionSpace::Box { lo, hi } => (lo, hi),
        ActionSpace::Discrete2 => unreachable!("validate rejects cem on discrete actions"),
    };
    let n = cfg.n_candidates;
    let h = cfg.horizon;
    let n_elite = ((n as f64 * cfg.cem_elite_frac).round() as usize).clamp(1, n);
    let mut mean = Array1::<f64>::zeros(h);
    let mut std = Array1::<f64>::from_elem(h, 0.5 * (hi - lo));
    let unit = Normal::new(0.0, 1.0).expect("unit normal is well-formed");
    for _ in 0..cfg.cem_iterations {
        let mut actions = Array2::<f64>::zeros((n, h));
        for i in 0..n {
            for t in 0..h {
                let a = mean[t] + std[t] * unit.sample(rng);
                actions[[i, t]] = a.clamp(lo, hi);
            }
        }
        let returns = rollout_returns(model, obs, context, &actions, reward)?;
        // Rank candidates best-first; equal scores keep sample order.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            returns[b]
                .partial_cmp(&returns[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let elite: Vec<usize> = order
            .into_iter()
            .filter(|&i| returns[i].is_finite())
            .take(n_elite)
            .collect();
        if elite.is_empty() {
            // Every candidate blew up; leave the distribution untouched.
            continue;
        }
        for t in 0..h {
            let e_mean = elite.iter().map(|&i| actions[[i, t]]).sum::<f64>() / elite.len() as f64;
            let e_var = elite
                .iter()
                .map(|&i| (actions[[i, t]] - e_mean).powi(2))
                .sum::<f64>()
                / elite.len() as f64;
            let e_std = e_var.sqrt();
            mean[t] = cfg.cem_alpha * mean[t] + (1.0 - cfg.cem_alpha) * e_mean;
            std[t] = (cfg.cem_alpha * std[t] + (1.0 - cfg.cem_alpha) * e_std).max(CEM_STD_FLOOR);
        }
    }
    let mean_actions = mean.clone().insert_axis(Axis(0));
    let mean_return = rollout_returns(model, obs, context, &mean_actions, reward)?[0];
    Ok(PlanDecision {
        action: mean[0].clamp(lo, hi),
        expected_return: mean_return,
    })
}

/// Plan one action at step `t` of a live episode: build the model's context
/// from the history so far, then run the configured optimizer with the env's
/// own reward function.
pub fn plan_action(
    model: &DynamicsModel,
    cfg: &PlanConfig,
    states: &[Array1<f64>],
    actions_so_far: &[f64],
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PlanDecision> {
    let context = model.context_at(states, actions_so_far, t)?;
    let env = model.env();
    let reward = move |s: &[f64], a: f64, sn: &[f64]| reward_fn(env, s, a, sn);
    let obs = states[t].view();
    match cfg.method {
        PlanMethod::Rs => plan_rs(model, cfg, &obs, &context.view(), &reward, rng),
        PlanMethod::Cem => plan_cem(model, cfg, &obs, &context.view(), &reward, rng),
    }
}
