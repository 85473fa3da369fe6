//! The dynamics-model family: context encoder + context-conditioned forward
//! and backward models, the future-step prediction loss that trains them
//! jointly, and the no-context baselines.
//!
//! All models share one I/O convention: networks consume normalized
//! (state, action) rows concatenated with a context vector (latent z for the
//! encoder model, a normalized raw history window for the stacked baseline,
//! empty for the vanilla baseline) and emit the normalized state difference
//! to the next state. Predicted next state = s + denormalize(output). The
//! fixed-unit-variance Gaussian likelihood makes maximum likelihood exactly
//! mean squared error, which is what the loss computes.

use crate::envs::{step_obs, EnvId, EnvParams};
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpParams, MlpSpec};
use crate::rng;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Latent context dimension of the encoder model.
pub const LATENT_DIM: usize = 10;
/// Past-window length of the stacked baseline.
pub const K_STACK: usize = 10;
/// Floor applied to every fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Normalizer
// ---------------------------------------------------------------------------

/// Per-dimension mean/std for states, actions, and forward state differences.
/// Backward-difference statistics are derived, not fitted: the backward
/// target s_t - s_{t+1} is exactly the negated forward difference, so its
/// mean is -delta_mean and its std is delta_std.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub state_mean: Array1<f64>,
    pub state_std: Array1<f64>,
    pub action_mean: Array1<f64>,
    pub action_std: Array1<f64>,
    pub delta_mean: Array1<f64>,
    pub delta_std: Array1<f64>,
}

impl Normalizer {
    /// Neutral statistics (mean 0, std 1); what a freshly built model carries
    /// before the first data collection.
    pub fn identity(obs_dim: usize, action_dim: usize) -> Self {
        Normalizer {
            state_mean: Array1::zeros(obs_dim),
            state_std: Array1::ones(obs_dim),
            action_mean: Array1::zeros(action_dim),
            action_std: Array1::ones(action_dim),
            delta_mean: Array1::zeros(obs_dim),
            delta_std: Array1::ones(obs_dim),
        }
    }

    /// Fit from row matrices of states, actions, and forward differences.
    pub fn fit(
        states: &ArrayView2<f64>,
        actions: &ArrayView2<f64>,
        deltas: &ArrayView2<f64>,
    ) -> Result<Self> {
        if states.nrows() == 0 || actions.nrows() == 0 || deltas.nrows() == 0 {
            return Err(Error::Data("cannot fit a normalizer on an empty dataset".into()));
        }
        let stats = |m: &ArrayView2<f64>| -> (Array1<f64>, Array1<f64>) {
            let mean = m.mean_axis(Axis(0)).unwrap();
            let mut var = Array1::<f64>::zeros(m.ncols());
            for row in m.rows() {
                for (v, (&x, &mu)) in var.iter_mut().zip(row.iter().zip(mean.iter())) {
                    *v += (x - mu) * (x - mu);
                }
            }
            var /= m.nrows() as f64;
            let std = var.mapv(|v| v.sqrt().max(STD_FLOOR));
            (mean, std)
        };
        let (state_mean, state_std) = stats(states);
        let (action_mean, action_std) = stats(actions);
        let (delta_mean, delta_std) = stats(deltas);
        Ok(Normalizer {
            state_mean,
            state_std,
            action_mean,
            action_std,
            delta_mean,
            delta_std,
        })
    }

    fn apply_rows(x: &ArrayView2<f64>, mean: &Array1<f64>, std: &Array1<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (v, (&mu, &sd)) in row.iter_mut().zip(mean.iter().zip(std.iter())) {
                *v = (*v - mu) / sd;
            }
        }
        out
    }

    pub fn norm_states(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        Self::apply_rows(x, &self.state_mean, &self.state_std)
    }

    pub fn norm_actions(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        Self::apply_rows(x, &self.action_mean, &self.action_std)
    }

    pub fn norm_deltas(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        Self::apply_rows(x, &self.delta_mean, &self.delta_std)
    }

    /// Normalize backward differences (s_t - s_{t+1}) with the derived
    /// (-mean, std) statistics.
    pub fn norm_deltas_backward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let neg_mean = self.delta_mean.mapv(|v| -v);
        Self::apply_rows(x, &neg_mean, &self.delta_std)
    }

    pub fn denorm_deltas(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (v, (&mu, &sd)) in row
                .iter_mut()
                .zip(self.delta_mean.iter().zip(self.delta_std.iter()))
            {
                *v = *v * sd + mu;
            }
        }
        out
    }

    pub fn denorm_deltas_backward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (v, (&mu, &sd)) in row
                .iter_mut()
                .zip(self.delta_mean.iter().zip(self.delta_std.iter()))
            {
                *v = *v * sd - mu;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// History windows
// ---------------------------------------------------------------------------

/// Flattened window of the K most recent (state-difference, action) pairs
/// before time t, oldest first, zero-padded on the left when t < K. This is
/// the raw (unnormalized) encoder input.
pub fn delta_history_window(
    states: &[Array1<f64>],
    actions: &[f64],
    t: usize,
    k: usize,
) -> Array1<f64> {
    debug_assert!(states.len() > t || t == 0, "need states s_0..s_t");
    let ds = states.first().map(|s| s.len()).unwrap_or(0);
    let block = ds + 1;
    let mut out = Array1::<f64>::zeros(k * block);
    for j in 0..k {
        // Window slot j holds the pair ending at time t - k + j + 1.
        let step = (t + j).checked_sub(k);
        if let Some(i) = step {
            if i + 1 <= t && i < actions.len() {
                for d in 0..ds {
                    out[j * block + d] = states[i + 1][d] - states[i][d];
                }
                out[j * block + ds] = actions[i];
            }
        }
    }
    out
}

/// Flattened window of the K most recent raw (state, action) pairs before
/// time t, oldest first, zero-padded on the left; the stacked baseline's
/// extra input.
pub fn raw_history_window(
    states: &[Array1<f64>],
    actions: &[f64],
    t: usize,
    k: usize,
) -> Array1<f64> {
    let ds = states.first().map(|s| s.len()).unwrap_or(0);
    let block = ds + 1;
    let mut out = Array1::<f64>::zeros(k * block);
    for j in 0..k {
        if let Some(i) = (t + j).checked_sub(k) {
            if i < t && i < actions.len() {
                for d in 0..ds {
                    out[j * block + d] = states[i][d];
                }
                out[j * block + ds] = actions[i];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Encoder-conditioned dynamics model: the trainable core of the system.
#[derive(Debug, Clone)]
pub struct CadmModel {
    pub env: EnvId,
    /// History length fed to the encoder.
    pub k: usize,
    /// Future steps averaged by the training loss.
    pub m: usize,
    /// Weight of the backward-model loss term.
    pub beta: f64,
    pub latent_dim: usize,
    pub encoder: MlpParams,
    pub forward_net: MlpParams,
    pub backward_net: MlpParams,
    pub norm: Normalizer,
}

impl CadmModel {
    pub fn new(
        env: EnvId,
        k: usize,
        m: usize,
        beta: f64,
        latent_dim: usize,
        encoder_hidden: &[usize],
        dynamics_hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let ds = env.obs_dim();
        let da = env.action_dim();
        let enc_spec = MlpSpec::from_hidden(k * (ds + da), encoder_hidden, latent_dim, Activation::Swish)?;
        let dyn_spec =
            MlpSpec::from_hidden(ds + da + latent_dim, dynamics_hidden, ds, Activation::Swish)?;
        Ok(CadmModel {
            env,
            k,
            m,
            beta,
            latent_dim,
            encoder: crate::nn::mlp_init(&enc_spec, rng::derive(seed, &[rng::tag("init-encoder")])),
            forward_net: crate::nn::mlp_init(&dyn_spec, rng::derive(seed, &[rng::tag("init-forward")])),
            backward_net: crate::nn::mlp_init(&dyn_spec, rng::derive(seed, &[rng::tag("init-backward")])),
            norm: Normalizer::identity(ds, da),
        })
    }

    /// State width this model's networks operate on. Read from the network
    /// shapes (not the env) so synthetic gradient-check instances can use
    /// arbitrary dimensions.
    pub fn obs_dim(&self) -> usize {
        self.forward_net.output_dim()
    }

    /// Action width the networks consume.
    pub fn act_dim(&self) -> usize {
        self.forward_net.input_dim() - self.obs_dim() - self.latent_dim
    }

    /// Build an instance with explicit state/action widths detached from any
    /// real environment; used by gradient-check suites. The env tag is a
    /// placeholder and such instances are never planned with or checkpointed.
    pub fn synthetic(
        obs_dim: usize,
        action_dim: usize,
        k: usize,
        m: usize,
        beta: f64,
        latent_dim: usize,
        encoder_hidden: &[usize],
        dynamics_hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let enc_spec = MlpSpec::from_hidden(
            k * (obs_dim + action_dim),
            encoder_hidden,
            latent_dim,
            Activation::Swish,
        )?;
        let dyn_spec = MlpSpec::from_hidden(
            obs_dim + action_dim + latent_dim,
            dynamics_hidden,
            obs_dim,
            Activation::Swish,
        )?;
        Ok(CadmModel {
            env: EnvId::Pendulum,
            k,
            m,
            beta,
            latent_dim,
            encoder: crate::nn::mlp_init(&enc_spec, rng::derive(seed, &[rng::tag("init-encoder")])),
            forward_net: crate::nn::mlp_init(&dyn_spec, rng::derive(seed, &[rng::tag("init-forward")])),
            backward_net: crate::nn::mlp_init(&dyn_spec, rng::derive(seed, &[rng::tag("init-backward")])),
            norm: Normalizer::identity(obs_dim, action_dim),
        })
    }

    /// Normalize a batch of raw history windows: state-difference slots with
    /// the delta statistics, action slots with the action statistics.
    /// Padding zeros are normalized like everything else.
    pub fn normalize_history(&self, raw: &ArrayView2<f64>) -> Array2<f64> {
        let ds = self.obs_dim();
        let block = ds + 1;
        let mut out = raw.to_owned();
        for mut row in out.rows_mut() {
            for j in 0..self.k {
                for d in 0..ds {
                    let v = &mut row[j * block + d];
                    *v = (*v - self.norm.delta_mean[d]) / self.norm.delta_std[d];
                }
                let v = &mut row[j * block + ds];
                *v = (*v - self.norm.action_mean[0]) / self.norm.action_std[0];
            }
        }
        out
    }

    /// Encode a batch of raw history windows into latent contexts (B x 10).
    pub fn encode(&self, raw_history: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let h = self.normalize_history(raw_history);
        self.encoder.infer(&h.view())
    }
}

/// No-context baselines sharing the same normalized-difference convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// One-step model of (s, a) only.
    Vanilla,
    /// (s, a) plus the flattened raw past-K_STACK (state, action) window.
    Stacked,
}

impl BaselineKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(BaselineKind::Vanilla),
            "stacked" => Ok(BaselineKind::Stacked),
            other => Err(Error::config(format!(
                "unknown baseline kind '{other}' (expected 'vanilla' or 'stacked')"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineKind::Vanilla => "vanilla",
            BaselineKind::Stacked => "stacked",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub env: EnvId,
    pub kind: BaselineKind,
    pub forward_net: MlpParams,
    pub norm: Normalizer,
}

impl BaselineModel {
    pub fn new(env: EnvId, kind: BaselineKind, dynamics_hidden: &[usize], seed: u64) -> Result<Self> {
        let ds = env.obs_dim();
        let da = env.action_dim();
        let ctx = match kind {
            BaselineKind::Vanilla => 0,
            BaselineKind::Stacked => K_STACK * (ds + da),
        };
        let spec = MlpSpec::from_hidden(ds + da + ctx, dynamics_hidden, ds, Activation::Swish)?;
        Ok(BaselineModel {
            env,
            kind,
            forward_net: crate::nn::mlp_init(&spec, rng::derive(seed, &[rng::tag("init-forward")])),
            norm: Normalizer::identity(ds, da),
        })
    }

    /// Normalize a raw (state, action)-pair window: state slots with state
    /// statistics, action slots with action statistics.
    pub fn normalize_window(&self, raw: &ArrayView2<f64>) -> Array2<f64> {
        let ds = self.env.obs_dim();
        let block = ds + 1;
        let mut out = raw.to_owned();
        for mut row in out.rows_mut() {
            for j in 0..K_STACK {
                for d in 0..ds {
                    let v = &mut row[j * block + d];
                    *v = (*v - self.norm.state_mean[d]) / self.norm.state_std[d];
                }
                let v = &mut row[j * block + ds];
                *v = (*v - self.norm.action_mean[0]) / self.norm.action_std[0];
            }
        }
        out
    }
}

/// The true analytic dynamics wrapped in the model interface; the test oracle
/// for planner and sweep suites. Carries its own parameters.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub params: EnvParams,
}

/// Any predictor the planner and evaluator can drive.
#[derive(Debug, Clone)]
pub enum DynamicsModel {
    Cadm(CadmModel),
    Baseline(BaselineModel),
    Oracle(OracleModel),
}

impl DynamicsModel {
    pub fn env(&self) -> EnvId {
        match self {
            DynamicsModel::Cadm(m) => m.env,
            DynamicsModel::Baseline(m) => m.env,
            DynamicsModel::Oracle(m) => m.params.env(),
        }
    }

    /// Width of the context vector this model consumes.
    pub fn context_dim(&self) -> usize {
        match self {
            DynamicsModel::Cadm(m) => m.latent_dim,
            DynamicsModel::Baseline(m) => match m.kind {
                BaselineKind::Vanilla => 0,
                BaselineKind::Stacked => K_STACK * (m.env.obs_dim() + m.env.action_dim()),
            },
            DynamicsModel::Oracle(_) => 0,
        }
    }

    /// Build this model's context at time t of a live episode: latent z for
    /// the encoder model, normalized raw window for the stacked baseline,
    /// empty otherwise.
    pub fn context_at(&self, states: &[Array1<f64>], actions: &[f64], t: usize) -> Result<Array1<f64>> {
        match self {
            DynamicsModel::Cadm(m) => {
                let raw = delta_history_window(states, actions, t, m.k);
                let raw2 = raw.insert_axis(Axis(0));
                let z = m.encode(&raw2.view())?;
                Ok(z.row(0).to_owned())
            }
            DynamicsModel::Baseline(m) => match m.kind {
                BaselineKind::Vanilla => Ok(Array1::zeros(0)),
                BaselineKind::Stacked => {
                    let raw = raw_history_window(states, actions, t, K_STACK);
                    let raw2 = raw.insert_axis(Axis(0));
                    let w = m.normalize_window(&raw2.view());
                    Ok(w.row(0).to_owned())
                }
            },
            DynamicsModel::Oracle(_) => Ok(Array1::zeros(0)),
        }
    }

    /// Predict next states for a batch of (state, action) rows under one
    /// shared context vector. Rows are independent; the context is tiled.
    pub fn predict_batch(
        &self,
        states: &ArrayView2<f64>,
        actions: &ArrayView2<f64>,
        context: &ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        let b = states.nrows();
        if actions.nrows() != b {
            return Err(Error::Shape {
                context: "predict_batch",
                expected: format!("{b} action rows"),
                got: format!("{}", actions.nrows()),
            });
        }
        if context.len() != self.context_dim() {
            return Err(Error::Shape {
                context: "predict_batch",
                expected: format!("context of width {}", self.context_dim()),
                got: format!("{}", context.len()),
            });
        }
        match self {
            DynamicsModel::Oracle(m) => {
                let ds = m.params.env().obs_dim();
                let mut out = Array2::zeros((b, ds));
                for (i, (s, a)) in states.rows().into_iter().zip(actions.rows()).enumerate() {
                    let next = step_obs(&m.params, s.as_slice().unwrap(), a[0]);
                    out.row_mut(i).assign(&Array1::from_vec(next));
                }
                Ok(out)
            }
            DynamicsModel::Cadm(m) => predict_with_net(
                &m.forward_net,
                &m.norm,
                states,
                actions,
                context,
            ),
            DynamicsModel::Baseline(m) => predict_with_net(
                &m.forward_net,
                &m.norm,
                states,
                actions,
                context,
            ),
        }
    }

    /// Normalized one-step forward prediction error, averaged per dimension:
    /// mean over rows of |pred_norm - target_norm|^2 / ds. The sweep metric.
    pub fn normalized_error(
        &self,
        states: &ArrayView2<f64>,
        actions: &ArrayView2<f64>,
        next_states: &ArrayView2<f64>,
        context: &ArrayView1<f64>,
    ) -> Result<f64> {
        let pred = self.predict_batch(states, actions, context)?;
        let ds = pred.ncols() as f64;
        // Compare in normalized-delta space so dimensions are commensurate.
        let (dm, dsd): (Array1<f64>, Array1<f64>) = match self {
            DynamicsModel::Cadm(m) => (m.norm.delta_mean.clone(), m.norm.delta_std.clone()),
            DynamicsModel::Baseline(m) => (m.norm.delta_mean.clone(), m.norm.delta_std.clone()),
            DynamicsModel::Oracle(m) => (
                Array1::zeros(m.params.env().obs_dim()),
                Array1::ones(m.params.env().obs_dim()),
            ),
        };
        let mut total = 0.0;
        for ((p, t), s) in pred.rows().into_iter().zip(next_states.rows()).zip(states.rows()) {
            for d in 0..p.len() {
                let pn = ((p[d] - s[d]) - dm[d]) / dsd[d];
                let tn = ((t[d] - s[d]) - dm[d]) / dsd[d];
                total += (pn - tn) * (pn - tn);
            }
        }
        Ok(total / (pred.nrows() as f64 * ds))
    }
}

/// Shared prediction path: x = [norm(s) | norm(a) | ctx] -> net -> s +
/// denorm(delta).
fn predict_with_net(
    net: &MlpParams,
    norm: &Normalizer,
    states: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
    context: &ArrayView1<f64>,
) -> Result<Array2<f64>> {
    let b = states.nrows();
    let ds = states.ncols();
    let da = actions.ncols();
    let c = context.len();
    let mut x = Array2::<f64>::zeros((b, ds + da + c));
    x.slice_mut(s![.., 0..ds]).assign(&norm.norm_states(states));
    x.slice_mut(s![.., ds..ds + da])
        .assign(&norm.norm_actions(actions));
    if c > 0 {
        for mut row in x.slice_mut(s![.., ds + da..]).rows_mut() {
            row.assign(context);
        }
    }
    let out = net.infer(&x.view())?;
    let delta = norm.denorm_deltas(&out.view());
    Ok(states.to_owned() + delta)
}

/// Mirror of the forward path through the backward network: predict the
/// current state from (next state, action, context). Not consumed by the
/// planner; exists for the training loss and analysis.
pub fn backward_predict(
    m: &CadmModel,
    next_states: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
    context: &ArrayView1<f64>,
) -> Result<Array2<f64>> {
    let b = next_states.nrows();
    let ds = next_states.ncols();
    let da = actions.ncols();
    let c = context.len();
    let mut x = Array2::<f64>::zeros((b, ds + da + c));
    x.slice_mut(s![.., 0..ds])
        .assign(&m.norm.norm_states(next_states));
    x.slice_mut(s![.., ds..ds + da])
        .assign(&m.norm.norm_actions(actions));
    if c > 0 {
        for mut row in x.slice_mut(s![.., ds + da..]).rows_mut() {
            row.assign(context);
        }
    }
    let out = m.backward_net.infer(&x.view())?;
    let delta = m.norm.denorm_deltas_backward(&out.view());
    Ok(next_states.to_owned() + delta)
}

// ---------------------------------------------------------------------------
// Training loss
// ---------------------------------------------------------------------------

/// One training batch of B segments: raw history windows plus the future
/// (M+1)-state / M-action slices, all in raw units.
#[derive(Debug, Clone)]
pub struct LossBatch {
    /// B x K(ds+da): raw delta-history windows at each segment head.
    pub history: Array2<f64>,
    /// B(M+1) x ds: states s_t .. s_{t+M} per segment, segment-major.
    pub states: Array2<f64>,
    /// BM x da: actions a_t .. a_{t+M-1} per segment, segment-major.
    pub actions: Array2<f64>,
    pub m: usize,
}

/// Gradients for the three parameter sets.
#[derive(Debug, Clone)]
pub struct CadmGrads {
    pub encoder: MlpParams,
    pub forward_net: MlpParams,
    pub backward_net: MlpParams,
}

/// The joint future-step prediction loss:
///
///   mean over segments of [ (1/M) sum_i |f_err_i|^2/2
///                           + beta * (1/M) sum_i |b_err_i|^2/2 ]
///
/// with teacher forcing (every step consumes ground-truth states) and one
/// latent z per segment, computed at the segment head and reused for all M
/// steps. Gradients flow into the forward net, the backward net, and through
/// z into the encoder. With beta = 0 the backward network is skipped
/// entirely: its gradients are exactly zero.
pub fn cadm_loss(model: &CadmModel, batch: &LossBatch) -> Result<(f64, CadmGrads)> {
    let ds = model.obs_dim();
    let da = model.act_dim();
    let m_steps = batch.m;
    let b = batch.history.nrows();
    if b == 0 || m_steps == 0 {
        return Err(Error::Data("empty loss batch".into()));
    }
    if batch.states.nrows() != b * (m_steps + 1) || batch.actions.nrows() != b * m_steps {
        return Err(Error::Shape {
            context: "cadm_loss",
            expected: format!("{} state rows and {} action rows", b * (m_steps + 1), b * m_steps),
            got: format!("{} and {}", batch.states.nrows(), batch.actions.nrows()),
        });
    }

    // Encode all segment heads.
    let hist_norm = model.normalize_history(&batch.history.view());
    let (z, enc_cache) = model.encoder.forward(&hist_norm.view())?;

    // Assemble forward/backward inputs and normalized targets, BM rows.
    let n_rows = b * m_steps;
    let width = ds + da + model.latent_dim;
    let mut x_fwd = Array2::<f64>::zeros((n_rows, width));
    let mut x_bwd = Array2::<f64>::zeros((n_rows, width));
    let mut tgt_fwd = Array2::<f64>::zeros((n_rows, ds));
    let norm_states = model.norm.norm_states(&batch.states.view());
    let norm_actions = model.norm.norm_actions(&batch.actions.view());
    for seg in 0..b {
        for i in 0..m_steps {
            let row = seg * m_steps + i;
            let s_row = seg * (m_steps + 1) + i;
            x_fwd
                .slice_mut(s![row, 0..ds])
                .assign(&norm_states.row(s_row));
            x_bwd
                .slice_mut(s![row, 0..ds])
                .assign(&norm_states.row(s_row + 1));
            x_fwd
                .slice_mut(s![row, ds..ds + da])
                .assign(&norm_actions.row(row));
            x_bwd
                .slice_mut(s![row, ds..ds + da])
                .assign(&norm_actions.row(row));
            x_fwd.slice_mut(s![row, ds + da..]).assign(&z.row(seg));
            x_bwd.slice_mut(s![row, ds + da..]).assign(&z.row(seg));
            for d in 0..ds {
                let delta = batch.states[[s_row + 1, d]] - batch.states[[s_row, d]];
                tgt_fwd[[row, d]] = (delta - model.norm.delta_mean[d]) / model.norm.delta_std[d];
            }
        }
    }
    // Backward target in its derived normalization is exactly the negated
    // forward target.
    let tgt_bwd = tgt_fwd.mapv(|v| -v);

    let scale = 1.0 / n_rows as f64;

    // Forward model pass.
    let (pred_f, cache_f) = model.forward_net.forward(&x_fwd.view())?;
    let err_f = &pred_f - &tgt_fwd;
    let loss_f = 0.5 * scale * err_f.iter().map(|e| e * e).sum::<f64>();
    let dy_f = err_f.mapv(|e| e * scale);
    let (grad_f, dx_f) = model.forward_net.backward(&cache_f, &dy_f.view())?;

    // Backward model pass, skipped entirely at beta = 0.
    let (loss_b, grad_b, dx_b) = if model.beta > 0.0 {
        let (pred_b, cache_b) = model.backward_net.forward(&x_bwd.view())?;
        let err_b = &pred_b - &tgt_bwd;
        let loss_b = 0.5 * scale * err_b.iter().map(|e| e * e).sum::<f64>();
        let dy_b = err_b.mapv(|e| e * model.beta * scale);
        let (grad_b, dx_b) = model.backward_net.backward(&cache_b, &dy_b.view())?;
        (loss_b, grad_b, Some(dx_b))
    } else {
        (0.0, model.backward_net.zeros_like(), None)
    };

    // Collect latent gradients: sum the z-columns of both input gradients
    // over the M rows of each segment.
    let mut dz = Array2::<f64>::zeros((b, model.latent_dim));
    for seg in 0..b {
        for i in 0..m_steps {
            let row = seg * m_steps + i;
            for l in 0..model.latent_dim {
                dz[[seg, l]] += dx_f[[row, ds + da + l]];
                if let Some(ref dxb) = dx_b {
                    dz[[seg, l]] += dxb[[row, ds + da + l]];
                }
            }
        }
    }
    let (grad_e, _) = model.encoder.backward(&enc_cache, &dz.view())?;

    let loss = loss_f + model.beta * loss_b;
    Ok((
        loss,
        CadmGrads {
            encoder: grad_e,
            forward_net: grad_f,
            backward_net: grad_b,
        },
    ))
}

/// One-step forward MSE for the baselines: mean over rows of |err|^2/2. The
/// context block of each input row is the baseline's own window (empty for
/// vanilla). Returns the loss and forward-net gradients.
#[derive(Debug, Clone)]
pub struct BaselineBatch {
    /// B x ds raw current states.
    pub states: Array2<f64>,
    /// B x da raw actions.
    pub actions: Array2<f64>,
    /// B x ds raw next states.
    pub next_states: Array2<f64>,
    /// B x ctx raw context windows (width 0 for vanilla).
    pub windows: Array2<f64>,
}

pub fn baseline_loss(model: &BaselineModel, batch: &BaselineBatch) -> Result<(f64, MlpParams)> {
    let b = batch.states.nrows();
    if b == 0 {
        return Err(Error::Data("empty loss batch".into()));
    }
    let ds = model.env.obs_dim();
    let da = model.env.action_dim();
    let ctx = match model.kind {
        BaselineKind::Vanilla => 0,
        BaselineKind::Stacked => K_STACK * (ds + da),
    };
    if batch.windows.ncols() != ctx {
        return Err(Error::Shape {
            context: "baseline_loss",
            expected: format!("windows of width {ctx}"),
            got: format!("{}", batch.windows.ncols()),
        });
    }
    let mut x = Array2::<f64>::zeros((b, ds + da + ctx));
    x.slice_mut(s![.., 0..ds])
        .assign(&model.norm.norm_states(&batch.states.view()));
    x.slice_mut(s![.., ds..ds + da])
        .assign(&model.norm.norm_actions(&batch.actions.view()));
    if ctx > 0 {
        x.slice_mut(s![.., ds + da..])
            .assign(&model.normalize_window(&batch.windows.view()));
    }
    let deltas = &batch.next_states - &batch.states;
    let tgt = model.norm.norm_deltas(&deltas.view());
    let (pred, cache) = model.forward_net.forward(&x.view())?;
    let err = &pred - &tgt;
    let scale = 1.0 / b as f64;
    let loss = 0.5 * scale * err.iter().map(|e| e * e).sum::<f64>();
    let dy = err.mapv(|e| e * scale);
    let (grads, _) = model.forward_net.backward(&cache, &dy.view())?;
    Ok((loss, grads))
}
