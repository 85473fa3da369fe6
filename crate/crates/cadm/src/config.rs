//! Run configuration: a flat TOML key-value document covering the training
//! schedule, model architecture, and planner settings. Unknown keys are
//! rejected so typos fail loudly, and every default is written down here.

use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::planner::{PlanConfig, PlanMethod, DEFAULT_CEM_CANDIDATES, DEFAULT_RS_CANDIDATES};
use serde::Deserialize;
use std::path::Path;

fn d_iterations() -> usize {
    20
}
fn d_trajectories() -> usize {
    10
}
fn d_epochs() -> usize {
    5
}
fn d_batch() -> usize {
    128
}
fn d_lr() -> f64 {
    0.001
}
fn d_k() -> usize {
    10
}
fn d_m() -> usize {
    10
}
fn d_beta() -> f64 {
    0.5
}
fn d_latent() -> usize {
    10
}
fn d_encoder_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}
fn d_dynamics_hidden() -> Vec<usize> {
    vec![200, 200, 200, 200]
}
fn d_method() -> String {
    "rs".to_owned()
}
fn d_horizon() -> usize {
    30
}
fn d_cem_iterations() -> usize {
    5
}
fn d_cem_elite_frac() -> f64 {
    0.1
}
fn d_cem_alpha() -> f64 {
    0.1
}

/// Everything a training run needs, minus the seed (a command-line flag).
/// Field defaults are the full-scale desk settings; CI-scale runs override
/// the iteration counts and network widths.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// "cartpole" or "pendulum". The only key without a default.
    pub env: String,
    #[serde(default = "d_iterations")]
    pub n_iterations: usize,
    #[serde(default = "d_trajectories")]
    pub trajectories_per_iteration: usize,
    #[serde(default = "d_epochs")]
    pub epochs_per_iteration: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    /// History length K fed to the context encoder.
    #[serde(default = "d_k")]
    pub k_history: usize,
    /// Future steps M averaged by the prediction loss.
    #[serde(default = "d_m")]
    pub m_future: usize,
    /// Weight of the backward-model term.
    #[serde(default = "d_beta")]
    pub beta: f64,
    /// Iterations at the start that act uniformly at random instead of
    /// planning. 0 means the untrained model plans from iteration 1.
    #[serde(default)]
    pub random_warmup_iterations: usize,
    #[serde(default = "d_latent")]
    pub latent_dim: usize,
    #[serde(default = "d_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "d_dynamics_hidden")]
    pub dynamics_hidden: Vec<usize>,
    /// "rs" or "cem".
    #[serde(default = "d_method")]
    pub plan_method: String,
    #[serde(default = "d_horizon")]
    pub horizon: usize,
    /// Candidate count; when absent, rs uses 1000 and cem uses 200.
    #[serde(default)]
    pub n_candidates: Option<usize>,
    #[serde(default = "d_cem_iterations")]
    pub cem_iterations: usize,
    #[serde(default = "d_cem_elite_frac")]
    pub cem_elite_frac: f64,
    #[serde(default = "d_cem_alpha")]
    pub cem_alpha: f64,
    /// Output directory; the --out flag overrides it.
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn env_id(&self) -> Result<EnvId> {
        EnvId::parse(&self.env)
    }

    pub fn plan_method(&self) -> Result<PlanMethod> {
        PlanMethod::parse(&self.plan_method)
    }

    /// Resolve the planner settings, filling the per-method candidate-count
    /// default, and check them against the environment's action space.
    pub fn plan_config(&self) -> Result<PlanConfig> {
        let method = self.plan_method()?;
        let n_candidates = self.n_candidates.unwrap_or(match method {
            PlanMethod::Rs => DEFAULT_RS_CANDIDATES,
            PlanMethod::Cem => DEFAULT_CEM_CANDIDATES,
        });
        let cfg = PlanConfig {
            method,
            horizon: self.horizon,
            n_candidates,
            cem_iterations: self.cem_iterations,
            cem_elite_frac: self.cem_elite_frac,
            cem_alpha: self.cem_alpha,
        };
        cfg.validate(self.env_id()?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env_id()?;
        let positive = [
            (self.n_iterations, "n_iterations"),
            (self.trajectories_per_iteration, "trajectories_per_iteration"),
            (self.epochs_per_iteration, "epochs_per_iteration"),
            (self.batch_size, "batch_size"),
            (self.k_history, "k_history"),
            (self.m_future, "m_future"),
            (self.latent_dim, "latent_dim"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config("beta must be finite and non-negative"));
        }
        for (hidden, name) in [
            (&self.encoder_hidden, "encoder_hidden"),
            (&self.dynamics_hidden, "dynamics_hidden"),
        ] {
            if hidden.is_empty() || hidden.iter().any(|&w| w == 0) {
                return Err(Error::config(format!(
                    "{name} must list at least one positive layer width"
                )));
            }
        }
        self.plan_config()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_documented_defaults() {
        let cfg = RunConfig::from_toml("env = \"cartpole\"").unwrap();
        assert_eq!(cfg.n_iterations, 20);
        assert_eq!(cfg.trajectories_per_iteration, 10);
        assert_eq!(cfg.epochs_per_iteration, 5);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.k_history, 10);
        assert_eq!(cfg.m_future, 10);
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.random_warmup_iterations, 0);
        assert_eq!(cfg.latent_dim, 10);
        assert_eq!(cfg.encoder_hidden, vec![64, 64, 64]);
        assert_eq!(cfg.dynamics_hidden, vec![200; 4]);
        assert_eq!(cfg.plan_method, "rs");
        assert_eq!(cfg.horizon, 30);
        assert_eq!(cfg.n_candidates, None);
        let plan = cfg.plan_config().unwrap();
        assert_eq!(plan.n_candidates, 1000);
        assert!(cfg.out_dir.is_none());
    }

    #[test]
    fn cem_candidate_default_is_200() {
        let cfg =
            RunConfig::from_toml("env = \"pendulum\"\nplan_method = \"cem\"").unwrap();
        assert_eq!(cfg.plan_config().unwrap().n_candidates, 200);
    }

    #[test]
    fn unknown_key_rejected_with_exit_2() {
        let err = RunConfig::from_toml("env = \"cartpole\"\nhorizonn = 30").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("horizonn"), "message: {err}");
    }

    #[test]
    fn missing_env_rejected() {
        let err = RunConfig::from_toml("horizon = 30").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_env_rejected() {
        let err = RunConfig::from_toml("env = \"acrobot\"").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn cem_on_cartpole_rejected() {
        let err =
            RunConfig::from_toml("env = \"cartpole\"\nplan_method = \"cem\"").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("rs"));
    }

    #[test]
    fn zero_valued_knobs_rejected() {
        for bad in [
            "env = \"cartpole\"\nn_iterations = 0",
            "env = \"cartpole\"\nbatch_size = 0",
            "env = \"cartpole\"\nhorizon = 0",
            "env = \"cartpole\"\nk_history = 0",
            "env = \"cartpole\"\nm_future = 0",
            "env = \"cartpole\"\ndynamics_hidden = []",
            "env = \"cartpole\"\nencoder_hidden = [64, 0]",
            "env = \"cartpole\"\nlearning_rate = -1.0",
            "env = \"cartpole\"\nbeta = nan",
        ] {
            let err = RunConfig::from_toml(bad).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let err = RunConfig::from_path(Path::new("/nonexistent/cadm.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn full_document_round_trips() {
        let text = r#"
env = "pendulum"
n_iterations = 3
trajectories_per_iteration = 2
epochs_per_iteration = 1
batch_size = 32
learning_rate = 0.01
k_history = 5
m_future = 4
beta = 0.25
random_warmup_iterations = 1
latent_dim = 10
encoder_hidden = [32, 32]
dynamics_hidden = [64, 64]
plan_method = "cem"
horizon = 12
n_candidates = 50
cem_iterations = 3
cem_elite_frac = 0.2
cem_alpha = 0.05
out_dir = "runs/test"
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.env_id().unwrap(), EnvId::Pendulum);
        assert_eq!(cfg.n_candidates, Some(50));
        let plan = cfg.plan_config().unwrap();
        assert_eq!(plan.n_candidates, 50);
        assert_eq!(plan.horizon, 12);
        assert_eq!(cfg.out_dir.as_deref(), Some("runs/test"));
    }
}
