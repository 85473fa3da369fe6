//! The improvement loop: alternate between collecting trajectories with the
//! planner in environments sampled from the training grid, and supervised
//! updates of the model on segments drawn from everything collected so far.
//! The dataset only grows — nothing is evicted — and normalizer statistics
//! are refit on the full dataset before each round of updates.

use crate::checkpoint::{self, TrainMeta};
use crate::config::RunConfig;
use crate::envs::{sample_params, Env, EnvId, EnvParams, Regime};
use crate::error::{Error, Result};
use crate::model::{
    baseline_loss, cadm_loss, delta_history_window, raw_history_window, BaselineBatch,
    BaselineKind, BaselineModel, CadmModel, DynamicsModel, LossBatch, Normalizer, K_STACK,
};
use crate::nn::AdamState;
use crate::planner::{plan_action, PlanConfig};
use crate::rng::{self, tag};
use ndarray::{Array1, Array2};
use rand::Rng;
use std::io::Write;
use std::path::Path;

/// One complete trajectory with everything needed to rebuild histories and
/// segments.
#[derive(Debug, Clone)]
pub struct Episode {
    pub params: EnvParams,
    /// s_0 .. s_T (one more entry than actions).
    pub states: Vec<Array1<f64>>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl Episode {
    /// Number of transitions T.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// The growing replay store. Segment heads are listed per (episode, t) and
/// never cross episode boundaries.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn n_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    /// All (episode index, t) pairs with M ground-truth future steps inside
    /// the episode: t in 0 ..= T - M.
    pub fn segment_heads(&self, m: usize) -> Vec<(usize, usize)> {
        let mut heads = Vec::new();
        for (i, ep) in self.episodes.iter().enumerate() {
            if ep.len() >= m {
                for t in 0..=(ep.len() - m) {
                    heads.push((i, t));
                }
            }
        }
        heads
    }

    /// Refit normalizer statistics over every state, action, and forward
    /// difference in the dataset.
    pub fn fit_normalizer(&self, obs_dim: usize) -> Result<Normalizer> {
        let n = self.n_transitions();
        if n == 0 {
            return Err(Error::Data("cannot fit a normalizer on an empty dataset".into()));
        }
        let mut states = Array2::<f64>::zeros((n, obs_dim));
        let mut actions = Array2::<f64>::zeros((n, 1));
        let mut deltas = Array2::<f64>::zeros((n, obs_dim));
        let mut row = 0;
        for ep in &self.episodes {
            for t in 0..ep.len() {
                for d in 0..obs_dim {
                    states[[row, d]] = ep.states[t][d];
                    deltas[[row, d]] = ep.states[t + 1][d] - ep.states[t][d];
                }
                actions[[row, 0]] = ep.actions[t];
                row += 1;
            }
        }
        Normalizer::fit(&states.view(), &actions.view(), &deltas.view())
    }
}

/// Which model family a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Cadm,
    Baseline(BaselineKind),
}

/// Assemble the joint-loss batch for the given segment heads.
pub fn assemble_batch(ds: &Dataset, heads: &[(usize, usize)], k: usize, m: usize) -> LossBatch {
    let b = heads.len();
    let obs_dim = ds.episodes[heads[0].0].states[0].len();
    let mut history = Array2::<f64>::zeros((b, k * (obs_dim + 1)));
    let mut states = Array2::<f64>::zeros((b * (m + 1), obs_dim));
    let mut actions = Array2::<f64>::zeros((b * m, 1));
    for (seg, &(ei, t)) in heads.iter().enumerate() {
        let ep = &ds.episodes[ei];
        history
            .row_mut(seg)
            .assign(&delta_history_window(&ep.states, &ep.actions, t, k));
        for i in 0..=m {
            for d in 0..obs_dim {
                states[[seg * (m + 1) + i, d]] = ep.states[t + i][d];
            }
        }
        for i in 0..m {
            actions[[seg * m + i, 0]] = ep.actions[t + i];
        }
    }
    LossBatch {
        history,
        states,
        actions,
        m,
    }
}

/// Assemble the one-step batch (with raw windows when stacked) for heads
/// listed with M = 1.
pub fn assemble_baseline_batch(
    ds: &Dataset,
    heads: &[(usize, usize)],
    kind: BaselineKind,
) -> BaselineBatch {
    let b = heads.len();
    let obs_dim = ds.episodes[heads[0].0].states[0].len();
    let win = match kind {
        BaselineKind::Vanilla => 0,
        BaselineKind::Stacked => K_STACK * (obs_dim + 1),
    };
    let mut states = Array2::<f64>::zeros((b, obs_dim));
    let mut actions = Array2::<f64>::zeros((b, 1));
    let mut next_states = Array2::<f64>::zeros((b, obs_dim));
    let mut windows = Array2::<f64>::zeros((b, win));
    for (row, &(ei, t)) in heads.iter().enumerate() {
        let ep = &ds.episodes[ei];
        for d in 0..obs_dim {
            states[[row, d]] = ep.states[t][d];
            next_states[[row, d]] = ep.states[t + 1][d];
        }
        actions[[row, 0]] = ep.actions[t];
        if win > 0 {
            windows
                .row_mut(row)
                .assign(&raw_history_window(&ep.states, &ep.actions, t, K_STACK));
        }
    }
    BaselineBatch {
        states,
        actions,
        next_states,
        windows,
    }
}

/// In-place Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Run one full episode under the given parameters: plan (or act uniformly
/// at random during warmup) at every step until the environment terminates.
pub fn collect_episode(
    model: &DynamicsModel,
    plan: &PlanConfig,
    params: EnvParams,
    random_actions: bool,
    reset_rng: &mut rand_chacha::ChaCha8Rng,
    plan_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Episode> {
    let mut env = Env::new(params);
    let obs0 = env.reset(reset_rng);
    let space = params.env().action_space();
    let mut ep = Episode {
        params,
        states: vec![obs0],
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    loop {
        let t = ep.actions.len();
        let action = if random_actions {
            match space {
                crate::envs::ActionSpace::Discrete2 => {
                    if plan_rng.random_range(0..2u8) == 1 {
                        1.0
                    } else {
                        0.0
                    }
                }
                crate::envs::ActionSpace::Box { lo, hi } => plan_rng.random_range(lo..=hi),
            }
        } else {
            plan_action(model, plan, &ep.states, &ep.actions, t, plan_rng)?.action
        };
        let (next, reward, done) = env.step(action)?;
        ep.states.push(next);
        ep.actions.push(action);
        ep.rewards.push(reward);
        if done {
            return Ok(ep);
        }
    }
}

/// Collect `n_traj` episodes with parameters sampled from the training grid.
/// An environment fault aborts only the offending trajectory; everything
/// else is kept.
pub fn collect_iteration(
    model: &DynamicsModel,
    plan: &PlanConfig,
    env: EnvId,
    n_traj: usize,
    iteration: usize,
    random_actions: bool,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut episodes = Vec::with_capacity(n_traj);
    for j in 0..n_traj {
        let it = iteration as u64;
        let mut param_rng = rng::stream(seed, &[tag("collect-params"), it, j as u64]);
        let params = sample_params(env, Regime::Train, &mut param_rng);
        let mut reset_rng = rng::stream(seed, &[tag("collect-reset"), it, j as u64]);
        let mut plan_rng = rng::stream(seed, &[tag("collect-plan"), it, j as u64]);
        match collect_episode(model, plan, params, random_actions, &mut reset_rng, &mut plan_rng)
        {
            Ok(ep) => episodes.push(ep),
            Err(Error::EnvFault(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(episodes)
}

/// The model being trained together with its optimizer state.
pub enum TrainState {
    Cadm {
        model: CadmModel,
        adam_encoder: AdamState,
        adam_forward: AdamState,
        adam_backward: AdamState,
    },
    Baseline {
        model: BaselineModel,
        adam: AdamState,
    },
}

impl TrainState {
    pub fn new(cfg: &RunConfig, target: TrainTarget, seed: u64) -> Result<Self> {
        let env = cfg.env_id()?;
        let init_seed = rng::derive(seed, &[tag("model-init")]);
        match target {
            TrainTarget::Cadm => {
                let model = CadmModel::new(
                    env,
                    cfg.k_history,
                    cfg.m_future,
                    cfg.beta,
                    cfg.latent_dim,
                    &cfg.encoder_hidden,
                    &cfg.dynamics_hidden,
                    init_seed,
                )?;
                Ok(TrainState::Cadm {
                    adam_encoder: AdamState::new(&model.encoder),
                    adam_forward: AdamState::new(&model.forward_net),
                    adam_backward: AdamState::new(&model.backward_net),
                    model,
                })
            }
            TrainTarget::Baseline(kind) => {
                let model = BaselineModel::new(env, kind, &cfg.dynamics_hidden, init_seed)?;
                Ok(TrainState::Baseline {
                    adam: AdamState::new(&model.forward_net),
                    model,
                })
            }
        }
    }

    /// Loss horizon M: the configured value for the joint loss, 1 for the
    /// one-step baselines.
    pub fn m(&self) -> usize {
        match self {
            TrainState::Cadm { model, .. } => model.m,
            TrainState::Baseline { .. } => 1,
        }
    }

    pub fn set_normalizer(&mut self, norm: Normalizer) {
        match self {
            TrainState::Cadm { model, .. } => model.norm = norm,
            TrainState::Baseline { model, .. } => model.norm = norm,
        }
    }

    /// Immutable snapshot for planning and checkpointing.
    pub fn snapshot(&self) -> DynamicsModel {
        match self {
            TrainState::Cadm { model, .. } => DynamicsModel::Cadm(model.clone()),
            TrainState::Baseline { model, .. } => DynamicsModel::Baseline(model.clone()),
        }
    }

    /// One minibatch update; returns the batch loss.
    fn step(&mut self, ds: &Dataset, heads: &[(usize, usize)], lr: f64) -> Result<f64> {
        match self {
            TrainState::Cadm {
                model,
                adam_encoder,
                adam_forward,
                adam_backward,
            } => {
                let batch = assemble_batch(ds, heads, model.k, model.m);
                let (loss, grads) = cadm_loss(model, &batch)?;
                adam_encoder.step(&mut model.encoder, &grads.encoder, lr)?;
                adam_forward.step(&mut model.forward_net, &grads.forward_net, lr)?;
                adam_backward.step(&mut model.backward_net, &grads.backward_net, lr)?;
                Ok(loss)
            }
            TrainState::Baseline { model, adam } => {
                let batch = assemble_baseline_batch(ds, heads, model.kind);
                let (loss, grads) = baseline_loss(model, &batch)?;
                adam.step(&mut model.forward_net, &grads, lr)?;
                Ok(loss)
            }
        }
    }
}

/// Run `epochs` passes over the dataset: each epoch visits every segment
/// head exactly once in a freshly shuffled order, in minibatches of
/// `batch_size` (the final batch may be smaller). Returns per-epoch mean
/// losses.
pub fn train_epochs(
    state: &mut TrainState,
    ds: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    iteration: usize,
) -> Result<Vec<f64>> {
    let mut heads = ds.segment_heads(state.m());
    if heads.len() < batch_size {
        return Err(Error::Train(format!(
            "need at least {batch_size} segment heads to train, dataset has {}",
            heads.len()
        )));
    }
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut shuffle_rng =
            rng::stream(seed, &[tag("epoch-shuffle"), iteration as u64, epoch as u64]);
        shuffle(&mut heads, &mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in heads.chunks(batch_size) {
            total += state.step(ds, chunk, lr)?;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(epoch_losses)
}

/// One metrics-log row, mirrored into `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub dataset_size: usize,
    pub mean_loss: f64,
    pub mean_return: f64,
}

pub const METRICS_HEADER: &str = "iteration,dataset_size,mean_loss,mean_return";

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_model: DynamicsModel,
    pub best_model: DynamicsModel,
    pub best_return: f64,
    pub metrics: Vec<MetricsRow>,
}

/// The full training loop. When `out_dir` is given, `metrics.csv` is
/// appended and flushed after every iteration and `best.ckpt`/`final.ckpt`
/// are kept current, so an aborted run leaves usable artifacts behind.
pub fn run_training(
    cfg: &RunConfig,
    target: TrainTarget,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let env = cfg.env_id()?;
    let plan = cfg.plan_config()?;
    let mut state = TrainState::new(cfg, target, seed)?;
    let mut dataset = Dataset::default();
    let mut metrics = Vec::with_capacity(cfg.n_iterations);
    let mut best_return = f64::NEG_INFINITY;
    let mut best_model = state.snapshot();

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    for iteration in 0..cfg.n_iterations {
        let random_actions = iteration < cfg.random_warmup_iterations;
        let planner_model = state.snapshot();
        let episodes = collect_iteration(
            &planner_model,
            &plan,
            env,
            cfg.trajectories_per_iteration,
            iteration,
            random_actions,
            seed,
        )?;
        if episodes.is_empty() {
            return Err(Error::Train(format!(
                "iteration {}: every trajectory aborted",
                iteration + 1
            )));
        }
        let mean_return =
            episodes.iter().map(Episode::ret).sum::<f64>() / episodes.len() as f64;
        // The model that earned this return is the pre-update snapshot.
        if mean_return > best_return {
            best_return = mean_return;
            best_model = planner_model;
        }
        dataset.episodes.extend(episodes);

        state.set_normalizer(dataset.fit_normalizer(env.obs_dim())?);
        // A dataset can legitimately be smaller than one batch in the first
        // iterations (short early CartPole episodes); collection continues
        // and training resumes once enough segments exist.
        let mean_loss = match train_epochs(
            &mut state,
            &dataset,
            cfg.epochs_per_iteration,
            cfg.batch_size,
            cfg.learning_rate,
            seed,
            iteration,
        ) {
            Ok(losses) => losses.iter().sum::<f64>() / losses.len() as f64,
            Err(Error::Train(_)) => f64::NAN,
            Err(e) => return Err(e),
        };

        let row = MetricsRow {
            iteration: iteration + 1,
            dataset_size: dataset.n_transitions(),
            mean_loss,
            mean_return,
        };
        metrics.push(row);
        eprintln!(
            "iteration {}/{}: dataset {} transitions, mean loss {:.6}, mean return {:.2}",
            row.iteration, cfg.n_iterations, row.dataset_size, row.mean_loss, row.mean_return
        );

        if let Some(f) = metrics_file.as_mut() {
            writeln!(
                f,
                "{},{},{},{}",
                row.iteration, row.dataset_size, row.mean_loss, row.mean_return
            )?;
            f.flush()?;
        }
        if let Some(dir) = out_dir {
            let meta = TrainMeta {
                seed,
                iterations_completed: iteration + 1,
                best_return: Some(best_return),
            };
            checkpoint::save(&dir.join("final.ckpt"), &state.snapshot(), &plan, &meta)?;
            checkpoint::save(&dir.join("best.ckpt"), &best_model, &plan, &meta)?;
        }
    }

    Ok(TrainOutcome {
        final_model: state.snapshot(),
        best_model,
        best_return,
        metrics,
    })
}
