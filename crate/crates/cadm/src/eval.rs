//! Generalization measurements for trained dynamics models.
//!
//! Four artifacts, each with a fixed CSV schema:
//! * per-regime returns (`env,regime,seed,episode,return`),
//! * one-step prediction-error sweeps along one parameter axis
//!   (`param,value,mse,n`),
//! * open-loop prediction traces (`t,dim,true,predicted`),
//! * context-latent exports (`param_value,ep,t,z0..`),
//!
//! plus the analysis helpers used on top of them: a closed-form linear probe
//! and a two-component PCA (power iteration with deflation).
//!
//! Everything here treats the model as read-only and derives per-episode RNG
//! streams, so results are independent of evaluation order and worker count.

use crate::envs::{
    self, ActionSpace, Env, EnvId, EnvParams, Regime, step_obs,
};
use crate::error::{Error, Result};
use crate::model::{raw_history_window, BaselineKind, DynamicsModel, K_STACK};
use crate::planner::PlanConfig;
use crate::rng::{self, tag};
use crate::trainer::collect_episode;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

// ---------------------------------------------------------------------------
// Returns per regime
// ---------------------------------------------------------------------------

/// Returns measured over full planner episodes on one (environment, regime)
/// pair. Parameters are resampled from the regime grid before every episode.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub env: EnvId,
    pub regime: Regime,
    pub seed: u64,
    /// Total reward of each episode.
    pub returns: Vec<f64>,
    /// Parameters drawn for each episode, aligned with `returns`.
    pub params: Vec<EnvParams>,
}

impl EvalReport {
    pub fn mean(&self) -> f64 {
        if self.returns.is_empty() {
            return f64::NAN;
        }
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    /// Population standard deviation of the per-episode returns.
    pub fn std(&self) -> f64 {
        if self.returns.is_empty() {
            return f64::NAN;
        }
        let m = self.mean();
        let var = self
            .returns
            .iter()
            .map(|r| (r - m) * (r - m))
            .sum::<f64>()
            / self.returns.len() as f64;
        var.sqrt()
    }

    /// CSV document with header `env,regime,seed,episode,return`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("env,regime,seed,episode,return\n");
        for (i, r) in self.returns.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.env.as_str(),
                self.regime.as_str(),
                self.seed,
                i,
                r
            ));
        }
        out
    }
}

/// Run `n_episodes` full planner episodes, drawing fresh parameters from the
/// regime grid before each, and record the returns. The model is frozen; each
/// episode gets its own derived RNG streams.
pub fn evaluate_returns(
    model: &DynamicsModel,
    plan: &PlanConfig,
    regime: Regime,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let env = model.env();
    let mut returns = Vec::with_capacity(n_episodes);
    let mut params_log = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes as u64 {
        let mut param_rng = rng::stream(seed, &[tag("eval-params"), e]);
        let mut reset_rng = rng::stream(seed, &[tag("eval-reset"), e]);
        let mut plan_rng = rng::stream(seed, &[tag("eval-plan"), e]);
        let params = envs::sample_params(env, regime, &mut param_rng);
        let ep = collect_episode(model, plan, params, false, &mut reset_rng, &mut plan_rng)?;
        returns.push(ep.ret());
        params_log.push(params);
    }
    Ok(EvalReport {
        env,
        regime,
        seed,
        returns,
        params: params_log,
    })
}

// ---------------------------------------------------------------------------
// Prediction-error sweep
// ---------------------------------------------------------------------------

/// One grid point of a prediction-error sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    /// Mean per-dimension squared one-step error on normalized state deltas.
    pub mse: f64,
    /// Number of transitions behind the mean.
    pub n: usize,
}

/// CSV document with header `param,value,mse,n`.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("param,value,mse,n\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.param, r.value, r.mse, r.n));
    }
    out
}

/// Measure one-step prediction error at a single parameter value: collect
/// `n_rollouts` planner episodes with the axis at `value` and every other
/// parameter at its training-grid midpoint, then score each transition with a
/// context built from the live episode history at that step.
pub fn sweep_point(
    model: &DynamicsModel,
    plan: &PlanConfig,
    axis: &str,
    value: f64,
    grid_index: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<SweepRow> {
    if n_rollouts == 0 {
        return Err(Error::config("sweep needs at least one rollout"));
    }
    let env = model.env();
    let mut params = EnvParams::midpoint(env);
    params.set(axis, value)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for r in 0..n_rollouts as u64 {
        let gi = grid_index as u64;
        let mut reset_rng = rng::stream(seed, &[tag("sweep-reset"), gi, r]);
        let mut plan_rng = rng::stream(seed, &[tag("sweep-plan"), gi, r]);
        let ep = collect_episode(model, plan, params, false, &mut reset_rng, &mut plan_rng)?;
        for t in 0..ep.len() {
            let ctx = model.context_at(&ep.states, &ep.actions, t)?;
            let s = ep.states[t].view().insert_axis(Axis(0)).to_owned();
            let sn = ep.states[t + 1].view().insert_axis(Axis(0)).to_owned();
            let a = Array2::from_elem((1, 1), ep.actions[t]);
            total += model.normalized_error(&s.view(), &a.view(), &sn.view(), &ctx.view())?;
            n += 1;
        }
    }
    Ok(SweepRow {
        param: axis.to_string(),
        value,
        mse: total / n as f64,
        n,
    })
}

/// Sweep one parameter axis across the union of its training, moderate, and
/// extreme grids, measuring the model's one-step prediction error at each
/// value. One output row per grid value.
pub fn prediction_error_sweep(
    model: &DynamicsModel,
    plan: &PlanConfig,
    axis: &str,
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let grid = envs::sweep_axis_grid(model.env(), axis)?;
    grid.iter()
        .enumerate()
        .map(|(gi, &v)| sweep_point(model, plan, axis, v, gi, n_rollouts, seed))
        .collect()
}

// ---------------------------------------------------------------------------
// Open-loop prediction trace
// ---------------------------------------------------------------------------

/// One (time step, state dimension) sample of an open-loop prediction trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: usize,
    pub dim: usize,
    pub true_val: f64,
    pub predicted: f64,
}

/// CSV document with header `t,dim,true,predicted`.
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("t,dim,true,predicted\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.t, r.dim, r.true_val, r.predicted));
    }
    out
}

/// Roll the true dynamics for `warmup + horizon - 1` steps with random
/// actions, freeze the model's context on the warmup window, then chain
/// predictions forward from the warmup-final state using only the ground-truth
/// actions (each predicted state feeds the next prediction).
///
/// Row `t` pairs the true state at step `warmup + t` with the model state
/// after `t` chained steps, for `t` in `0..horizon`; row 0 is the shared
/// anchor, so the trace starts exactly aligned. The rollout steps the raw
/// dynamics without termination so the trace always has full length.
pub fn predict_trace(
    model: &DynamicsModel,
    params: EnvParams,
    warmup: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<TraceRow>> {
    if params.env() != model.env() {
        return Err(Error::config(format!(
            "trace parameters are for {} but the checkpoint is for {}",
            params.env().as_str(),
            model.env().as_str()
        )));
    }
    if horizon == 0 {
        return Err(Error::config("trace horizon must be at least 1"));
    }
    let mut reset_rng = rng::stream(seed, &[tag("trace-reset")]);
    let mut action_rng = rng::stream(seed, &[tag("trace-actions")]);
    let mut env = Env::new(params);
    let mut states = vec![env.reset(&mut reset_rng)];
    let mut actions = Vec::new();
    let space = params.env().action_space();
    for _ in 0..warmup + horizon - 1 {
        let a = match space {
            ActionSpace::Discrete2 => {
                if action_rng.random_range(0..2u8) == 1 {
                    1.0
                } else {
                    0.0
                }
            }
            ActionSpace::Box { lo, hi } => action_rng.random_range(lo..=hi),
        };
        let s = states.last().unwrap();
        let next = step_obs(&params, s.as_slice().unwrap(), a);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::EnvFault(format!(
                "non-finite state during trace rollout under {params:?}"
            )));
        }
        states.push(Array1::from_vec(next));
        actions.push(a);
    }

    let ctx = model.context_at(&states, &actions, warmup)?;
    let ds = states[0].len();
    let mut rows = Vec::with_capacity(horizon * ds);
    let mut pred = states[warmup].clone();
    for t in 0..horizon {
        if t > 0 {
            let a = Array2::from_elem((1, 1), actions[warmup + t - 1]);
            let s = pred.view().insert_axis(Axis(0)).to_owned();
            pred = model
                .predict_batch(&s.view(), &a.view(), &ctx.view())?
                .row(0)
                .to_owned();
        }
        let truth = &states[warmup + t];
        for d in 0..ds {
            rows.push(TraceRow {
                t,
                dim: d,
                true_val: truth[d],
                predicted: pred[d],
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Latent export
// ---------------------------------------------------------------------------

/// One exported context vector with its provenance.
#[derive(Debug, Clone)]
pub struct LatentRow {
    /// Value of the swept parameter for the episode this window came from.
    pub param_value: f64,
    /// Episode index within that parameter value.
    pub ep: usize,
    /// Window head time step within the episode.
    pub t: usize,
    pub z: Vec<f64>,
}

/// Latent export plus the matching raw windows used by the linear probe.
#[derive(Debug, Clone)]
pub struct LatentExport {
    pub axis: String,
    pub rows: Vec<LatentRow>,
    /// Encoded contexts, one row per entry of `rows`.
    pub z: Array2<f64>,
    /// Flattened normalized raw (state, action) windows over the same spans,
    /// one row per entry of `rows`. The no-encoder baseline for probes.
    pub raw: Array2<f64>,
}

impl LatentExport {
    /// Parameter label per row, aligned with `z` and `raw`.
    pub fn labels(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.param_value).collect()
    }

    /// CSV document with header `param_value,ep,t,z0..`.
    pub fn to_csv(&self) -> String {
        let zdim = self.z.ncols();
        let mut out = String::from("param_value,ep,t");
        for j in 0..zdim {
            out.push_str(&format!(",z{j}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.param_value, r.ep, r.t));
            for v in &r.z {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Window length over which the model builds its context, used to restrict
/// the export to windows with no zero padding.
fn history_len(model: &DynamicsModel) -> Result<usize> {
    match model {
        DynamicsModel::Cadm(m) => Ok(m.k),
        DynamicsModel::Baseline(m) if m.kind == BaselineKind::Stacked => Ok(K_STACK),
        _ => Err(Error::config(
            "this checkpoint has no context to export (vanilla/oracle models build none)",
        )),
    }
}

/// Collect planner episodes at each training-grid value of `axis` (the other
/// parameter held at its training-grid midpoint) and export the context
/// vector of every full-length history window, capped at
/// `n_segments_per_param` windows per value.
pub fn export_latents(
    model: &DynamicsModel,
    plan: &PlanConfig,
    axis: &str,
    n_segments_per_param: usize,
    seed: u64,
) -> Result<LatentExport> {
    let k = history_len(model)?;
    let env = model.env();
    let grid = envs::axis_grid(env, Regime::Train, axis)?;
    let ds = env.obs_dim();
    let zdim = model.context_dim();
    let mut rows = Vec::new();
    let mut zs: Vec<f64> = Vec::new();
    let mut raws: Vec<f64> = Vec::new();
    // If one episode cannot supply a single full window (early termination),
    // keep trying fresh episodes, but give up eventually rather than spin.
    const MAX_EPISODES_PER_VALUE: usize = 64;
    for (pi, &value) in grid.iter().enumerate() {
        let mut params = EnvParams::midpoint(env);
        params.set(axis, value)?;
        let mut have = 0usize;
        let mut ep_idx = 0usize;
        while have < n_segments_per_param {
            if ep_idx >= MAX_EPISODES_PER_VALUE {
                return Err(Error::Data(format!(
                    "latent export collected only {have}/{n_segments_per_param} full \
                     windows at {axis}={value} after {MAX_EPISODES_PER_VALUE} episodes"
                )));
            }
            let path = [tag("latents-reset"), pi as u64, ep_idx as u64];
            let mut reset_rng = rng::stream(seed, &path);
            let mut plan_rng =
                rng::stream(seed, &[tag("latents-plan"), pi as u64, ep_idx as u64]);
            let ep = collect_episode(model, plan, params, false, &mut reset_rng, &mut plan_rng)?;
            for t in k..=ep.len() {
                if have >= n_segments_per_param {
                    break;
                }
                let z = model.context_at(&ep.states, &ep.actions, t)?;
                let raw = raw_history_window(&ep.states, &ep.actions, t, k);
                let raw_n = normalize_raw_window(model, &raw, k, ds);
                rows.push(LatentRow {
                    param_value: value,
                    ep: ep_idx,
                    t,
                    z: z.to_vec(),
                });
                zs.extend(z.iter());
                raws.extend(raw_n.iter());
                have += 1;
            }
            ep_idx += 1;
        }
    }
    let n = rows.len();
    let z = Array2::from_shape_vec((n, zdim), zs).expect("latent export shape");
    let raw =
        Array2::from_shape_vec((n, k * (ds + 1)), raws).expect("raw window shape");
    Ok(LatentExport {
        axis: axis.to_string(),
        rows,
        z,
        raw,
    })
}

/// Normalize a flattened raw (state, action) window with the model's
/// state/action statistics so probe features are commensurate across
/// dimensions. Layout: k blocks of (ds state entries, 1 action entry).
fn normalize_raw_window(
    model: &DynamicsModel,
    window: &Array1<f64>,
    k: usize,
    ds: usize,
) -> Array1<f64> {
    let norm = match model {
        DynamicsModel::Cadm(m) => &m.norm,
        DynamicsModel::Baseline(m) => &m.norm,
        DynamicsModel::Oracle(_) => return window.clone(),
    };
    let block = ds + 1;
    let mut out = window.clone();
    for j in 0..k {
        for d in 0..ds {
            out[j * block + d] = (window[j * block + d] - norm.state_mean[d]) / norm.state_std[d];
        }
        out[j * block + ds] =
            (window[j * block + ds] - norm.action_mean[0]) / norm.action_std[0];
    }
    out
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

/// Closed-form least-squares probe: fit `labels ~ [features | 1]` on the
/// even-indexed rows, report the coefficient of determination (R^2) on the
/// odd-indexed held-out rows. A vanishingly small ridge keeps the normal
/// equations invertible for collinear features.
pub fn linear_probe_r2(features: &ArrayView2<f64>, labels: &[f64]) -> Result<f64> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::Shape {
            context: "linear_probe_r2",
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if n < 4 {
        return Err(Error::Data(format!(
            "probe needs at least 4 rows to split into train and test, got {n}"
        )));
    }
    let d = features.ncols() + 1; // bias column appended
    let train: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
    let test: Vec<usize> = (0..n).filter(|i| i % 2 == 1).collect();

    let design = |idx: &[usize]| {
        let mut x = Array2::ones((idx.len(), d));
        for (row, &i) in idx.iter().enumerate() {
            for j in 0..d - 1 {
                x[[row, j]] = features[[i, j]];
            }
        }
        x
    };
    let x_tr = design(&train);
    let y_tr = Array1::from_iter(train.iter().map(|&i| labels[i]));
    let mut xtx = x_tr.t().dot(&x_tr);
    let ridge = 1e-9 * xtx.diag().sum() / d as f64;
    for j in 0..d {
        xtx[[j, j]] += ridge;
    }
    let xty = x_tr.t().dot(&y_tr);
    let beta = crate::linalg::solve(xtx, xty)?;

    let x_te = design(&test);
    let y_te = Array1::from_iter(test.iter().map(|&i| labels[i]));
    let pred = x_te.dot(&beta);
    let mean = y_te.sum() / y_te.len() as f64;
    let ss_tot: f64 = y_te.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate(
            "probe labels are constant on the held-out rows".into(),
        ));
    }
    let ss_res: f64 = y_te
        .iter()
        .zip(pred.iter())
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Mean-centered projections onto the top two principal components, plus the
/// components themselves.
#[derive(Debug, Clone)]
pub struct Pca2 {
    /// N x 2: coordinates of each point along the two components.
    pub projections: Array2<f64>,
    /// Orthonormal component vectors; each has its largest-magnitude entry
    /// positive.
    pub components: [Array1<f64>; 2],
}

const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITERS: usize = 1000;

/// Top eigenvector of `c` by power iteration, optionally constrained to the
/// complement of `ortho`. Returns None when the matrix has no energy in the
/// available subspace (zero eigenvalue).
fn power_iterate(c: &ArrayView2<f64>, ortho: Option<&Array1<f64>>) -> Option<Array1<f64>> {
    let d = c.nrows();
    // Deterministic pseudo-random start: a fixed vector has measure-zero risk
    // of being orthogonal to the top eigenvector, and a fixed stream keeps
    // results reproducible.
    let mut start_rng = rng::stream(0x5EED_CA11, &[tag("pca-start"), ortho.is_some() as u64]);
    let mut v = Array1::from_shape_fn(d, |_| start_rng.random_range(-1.0..1.0));
    if let Some(u) = ortho {
        let proj = v.dot(u);
        v = &v - &(u * proj);
    }
    let norm = v.dot(&v).sqrt();
    if norm < 1e-300 {
        return None;
    }
    v /= norm;
    for _ in 0..PCA_MAX_ITERS {
        let mut w = c.dot(&v);
        if let Some(u) = ortho {
            let proj = w.dot(u);
            w = &w - &(u * proj);
        }
        let norm = w.dot(&w).sqrt();
        if norm < 1e-300 {
            return None;
        }
        w /= norm;
        let delta = (&w - &v).iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w;
        if delta < PCA_TOL {
            break;
        }
    }
    Some(v)
}

/// Project `points` (one row per observation) onto their top two principal
/// components. Components come from power iteration with deflation on the
/// sample covariance; they are orthonormal, and each is sign-fixed so its
/// largest-magnitude entry is positive. Rank-1 input still yields two
/// components (the second spans an arbitrary-but-deterministic orthogonal
/// direction with ~zero variance); rank-0 input is an error.
pub fn pca_top2(points: &ArrayView2<f64>) -> Result<Pca2> {
    let n = points.nrows();
    let d = points.ncols();
    if n < 3 {
        return Err(Error::config(format!(
            "pca needs at least 3 points, got {n}"
        )));
    }
    if d < 2 {
        return Err(Error::config(format!(
            "pca needs at least 2 feature columns, got {d}"
        )));
    }
    // Exact rank-0 check: every row bit-identical. Done on the raw input so
    // floating-point centering noise cannot mask it.
    let first = points.row(0);
    if points
        .rows()
        .into_iter()
        .all(|r| r.iter().zip(first.iter()).all(|(a, b)| a.to_bits() == b.to_bits()))
    {
        return Err(Error::Degenerate(
            "pca input has rank 0: all points are identical".into(),
        ));
    }
    let mean = points.mean_axis(Axis(0)).expect("n >= 3");
    let centered = points - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);

    let c1 = power_iterate(&cov.view(), None).ok_or_else(|| {
        Error::Degenerate("pca input has rank 0: zero covariance".into())
    })?;
    let lambda1 = c1.dot(&cov.dot(&c1));
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[[i, j]] -= lambda1 * c1[i] * c1[j];
        }
    }
    let c2 = power_iterate(&deflated.view(), Some(&c1)).unwrap_or_else(|| {
        // Rank-1 data: any unit vector orthogonal to c1 works; pick the axis
        // least aligned with c1 for a deterministic, well-conditioned choice.
        let j = (0..d)
            .min_by(|&a, &b| c1[a].abs().total_cmp(&c1[b].abs()))
            .unwrap();
        let mut v = Array1::zeros(d);
        v[j] = 1.0;
        let proj = v.dot(&c1);
        v = &v - &(&c1 * proj);
        let norm = v.dot(&v).sqrt();
        v / norm
    });

    let sign_fix = |mut v: Array1<f64>| {
        let j = (0..v.len())
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap();
        if v[j] < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        v
    };
    let c1 = sign_fix(c1);
    let c2 = sign_fix(c2);

    let mut projections = Array2::zeros((n, 2));
    for (i, row) in centered.rows().into_iter().enumerate() {
        projections[[i, 0]] = row.dot(&c1);
        projections[[i, 1]] = row.dot(&c2);
    }
    Ok(Pca2 {
        projections,
        components: [c1, c2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::checkpoint::TrainMeta;
    use crate::model::{CadmModel, OracleModel};
    use crate::planner::PlanMethod;

    fn tiny_plan(method: PlanMethod) -> PlanConfig {
        PlanConfig {
            method,
            horizon: 4,
            n_candidates: 24,
            cem_iterations: 2,
            cem_elite_frac: 0.25,
            cem_alpha: 0.1,
        }
    }

    fn oracle(params: EnvParams) -> DynamicsModel {
        DynamicsModel::Oracle(OracleModel { params })
    }

    fn small_cadm(env: EnvId) -> DynamicsModel {
        DynamicsModel::Cadm(
            CadmModel::new(env, 5, 3, 0.5, 10, &[16, 16], &[16, 16], 77).unwrap(),
        )
    }

    #[test]
    fn eval_report_stats_and_csv_schema() {
        let report = EvalReport {
            env: EnvId::Cartpole,
            regime: Regime::Train,
            seed: 3,
            returns: vec![10.0, 20.0, 30.0],
            params: vec![],
        };
        assert_eq!(report.mean(), 20.0);
        assert!((report.std() - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "env,regime,seed,episode,return");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "cartpole,train,3,0,10");
        assert!(csv.ends_with('\n'));
    }

    #[test]
    fn cartpole_returns_stay_in_reward_bounds() {
        let model = oracle(EnvParams::Cartpole {
            force: 10.0,
            length: 0.5,
        });
        let report = evaluate_returns(&model, &tiny_plan(PlanMethod::Rs), Regime::Train, 3, 5)
            .unwrap();
        assert_eq!(report.returns.len(), 3);
        for r in &report.returns {
            assert!((0.0..=200.0).contains(r), "return {r} out of range");
        }
    }

    #[test]
    fn pendulum_returns_are_nonpositive() {
        let model = oracle(EnvParams::Pendulum {
            mass: 1.0,
            length: 1.0,
        });
        // Short horizon keeps the oracle rollouts cheap; returns are bounded
        // above by zero regardless of policy quality.
        let mut plan = tiny_plan(PlanMethod::Cem);
        plan.horizon = 2;
        plan.n_candidates = 8;
        let report =
            evaluate_returns(&model, &plan, Regime::Moderate, 2, 9).unwrap();
        for r in &report.returns {
            assert!(*r <= 0.0);
        }
    }

    #[test]
    fn moderate_regime_never_samples_training_parameters() {
        let model = oracle(EnvParams::Cartpole {
            force: 10.0,
            length: 0.5,
        });
        let report = evaluate_returns(&model, &tiny_plan(PlanMethod::Rs), Regime::Moderate, 6, 11)
            .unwrap();
        let (train_f, train_l) = envs::regime_grid(EnvId::Cartpole, Regime::Train);
        assert_eq!(report.params.len(), 6);
        for p in &report.params {
            match p {
                EnvParams::Cartpole { force, length } => {
                    assert!(!train_f.contains(force), "training force {force} leaked");
                    assert!(!train_l.contains(length), "training length {length} leaked");
                }
                _ => panic!("wrong env"),
            }
        }
    }

    #[test]
    fn evaluation_leaves_the_model_bit_identical() {
        let model = small_cadm(EnvId::Pendulum);
        let plan = tiny_plan(PlanMethod::Cem);
        let meta = TrainMeta {
            seed: 1,
            iterations_completed: 0,
            best_return: None,
        };
        let before = checkpoint::to_text(&model, &plan, &meta).unwrap();
        evaluate_returns(&model, &plan, Regime::Train, 1, 2).unwrap();
        sweep_point(&model, &plan, "mass", 1.0, 0, 1, 2).unwrap();
        predict_trace(
            &model,
            EnvParams::Pendulum {
                mass: 1.0,
                length: 1.0,
            },
            6,
            4,
            2,
        )
        .unwrap();
        export_latents(&model, &plan, "mass", 3, 2).unwrap();
        let after = checkpoint::to_text(&model, &plan, &meta).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn oracle_sweep_error_is_flat_zero() {
        // A model wrapping the true dynamics of each grid point predicts every
        // transition exactly, so the sweep is ~0 at every parameter value.
        let plan = tiny_plan(PlanMethod::Rs);
        let grid = envs::sweep_axis_grid(EnvId::Cartpole, "force").unwrap();
        assert!(grid.len() >= 9);
        for (gi, &value) in grid.iter().enumerate() {
            let mut params = EnvParams::midpoint(EnvId::Cartpole);
            params.set("force", value).unwrap();
            let model = oracle(params);
            let row = sweep_point(&model, &plan, "force", value, gi, 1, 7).unwrap();
            assert!(row.n > 0);
            assert!(
                row.mse < 1e-10,
                "oracle mse {} at force={}",
                row.mse,
                value
            );
        }
    }

    #[test]
    fn sweep_emits_one_row_per_grid_value() {
        let model = oracle(EnvParams::Pendulum {
            mass: 1.0,
            length: 1.0,
        });
        let mut plan = tiny_plan(PlanMethod::Cem);
        plan.horizon = 1;
        plan.n_candidates = 4;
        plan.cem_iterations = 1;
        let rows = prediction_error_sweep(&model, &plan, "mass", 1, 13).unwrap();
        let grid = envs::sweep_axis_grid(EnvId::Pendulum, "mass").unwrap();
        assert_eq!(rows.len(), grid.len());
        for (row, v) in rows.iter().zip(grid.iter()) {
            assert_eq!(row.value, *v);
            assert_eq!(row.param, "mass");
            assert!(row.mse >= 0.0);
        }
        let csv = sweep_to_csv(&rows);
        assert!(csv.starts_with("param,value,mse,n\n"));
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }

    #[test]
    fn zero_rollout_sweep_is_rejected() {
        let model = oracle(EnvParams::Pendulum {
            mass: 1.0,
            length: 1.0,
        });
        let err = sweep_point(&model, &tiny_plan(PlanMethod::Cem), "mass", 1.0, 0, 0, 1)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn oracle_trace_reproduces_the_true_states() {
        let params = EnvParams::Pendulum {
            mass: 1.2,
            length: 0.9,
        };
        let model = oracle(params);
        let rows = predict_trace(&model, params, 10, 20, 3).unwrap();
        assert_eq!(rows.len(), 20 * 3); // horizon time steps x state dims
        for r in &rows {
            assert!(
                (r.true_val - r.predicted).abs() < 1e-9,
                "t={} dim={} true={} pred={}",
                r.t,
                r.dim,
                r.true_val,
                r.predicted
            );
        }
        assert_eq!(rows.iter().map(|r| r.t).max(), Some(19));
        let csv = trace_to_csv(&rows);
        assert!(csv.starts_with("t,dim,true,predicted\n"));
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }

    #[test]
    fn trace_starts_aligned_even_for_untrained_models() {
        let model = small_cadm(EnvId::Cartpole);
        let rows = predict_trace(
            &model,
            EnvParams::Cartpole {
                force: 10.0,
                length: 0.5,
            },
            10,
            5,
            17,
        )
        .unwrap();
        for r in rows.iter().filter(|r| r.t == 0) {
            assert_eq!(r.true_val.to_bits(), r.predicted.to_bits());
        }
        // Chained predictions exist for every later step.
        assert_eq!(rows.len(), 5 * 4);
    }

    #[test]
    fn trace_rejects_mismatched_env_and_zero_horizon() {
        let model = small_cadm(EnvId::Cartpole);
        let err = predict_trace(
            &model,
            EnvParams::Pendulum {
                mass: 1.0,
                length: 1.0,
            },
            5,
            5,
            1,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = predict_trace(
            &model,
            EnvParams::Cartpole {
                force: 10.0,
                length: 0.5,
            },
            5,
            0,
            1,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn latent_export_counts_windows_and_skips_padding() {
        let model = small_cadm(EnvId::Pendulum);
        let plan = {
            let mut p = tiny_plan(PlanMethod::Cem);
            p.horizon = 1;
            p.n_candidates = 4;
            p.cem_iterations = 1;
            p
        };
        let export = export_latents(&model, &plan, "mass", 4, 5).unwrap();
        let grid = envs::axis_grid(EnvId::Pendulum, Regime::Train, "mass").unwrap();
        assert_eq!(export.rows.len(), grid.len() * 4);
        let k = 5; // history length of small_cadm
        for r in &export.rows {
            assert!(r.t >= k, "window at t={} would be zero-padded", r.t);
            assert_eq!(r.z.len(), 10);
            assert!(r.z.iter().all(|v| v.is_finite()));
        }
        assert_eq!(export.z.nrows(), export.rows.len());
        assert_eq!(export.raw.nrows(), export.rows.len());
        assert_eq!(export.raw.ncols(), k * 4); // k x (3 state dims + action)
        // Per parameter value, exactly n_segments rows.
        for v in grid {
            let count = export.rows.iter().filter(|r| r.param_value == *v).count();
            assert_eq!(count, 4);
        }
        // Deterministic: same call, same export.
        let again = export_latents(&model, &plan, "mass", 4, 5).unwrap();
        assert_eq!(export.to_csv(), again.to_csv());
        let header = export.to_csv();
        assert!(header.starts_with("param_value,ep,t,z0,z1,"));
    }

    #[test]
    fn latent_export_requires_a_context_model() {
        let model = oracle(EnvParams::Pendulum {
            mass: 1.0,
            length: 1.0,
        });
        let err =
            export_latents(&model, &tiny_plan(PlanMethod::Cem), "mass", 2, 1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn probe_recovers_a_linear_relationship() {
        let mut rng = rng::stream(21, &[tag("probe-test")]);
        let n = 60;
        let d = 6;
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let w = Array1::from_shape_fn(d, |j| (j as f64) - 2.0);
        let y: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&w) + 0.7).collect();
        let r2 = linear_probe_r2(&x.view(), &y).unwrap();
        assert!(r2 > 0.999, "r2 = {r2}");

        // Labels unrelated to the features give a much weaker fit.
        let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r2_noise = linear_probe_r2(&x.view(), &noise).unwrap();
        assert!(r2_noise < 0.5, "r2_noise = {r2_noise}");
    }

    #[test]
    fn probe_rejects_degenerate_inputs() {
        let x = Array2::zeros((10, 2));
        let constant = vec![1.0; 10];
        assert!(matches!(
            linear_probe_r2(&x.view(), &constant).unwrap_err(),
            Error::Degenerate(_)
        ));
        let y = vec![1.0, 2.0];
        assert!(linear_probe_r2(&Array2::zeros((2, 2)).view(), &y).is_err());
    }

    #[test]
    fn pca_components_are_orthonormal_and_dominate_axes() {
        let mut rng = rng::stream(8, &[tag("pca-test")]);
        let n = 80;
        // Anisotropic cloud: strong direction plus weaker noise.
        let dir = Array1::from_shape_fn(10, |j| ((j as f64) * 0.7).sin());
        let points = Array2::from_shape_fn((n, 10), |(i, j)| {
            let scale: f64 = ((i % 17) as f64 - 8.0) / 2.0;
            scale * dir[j] + 0.1 * rng.random_range(-1.0..1.0)
        });
        let pca = pca_top2(&points.view()).unwrap();
        let [c1, c2] = &pca.components;
        assert!((c1.dot(c1).sqrt() - 1.0).abs() < 1e-8);
        assert!((c2.dot(c2).sqrt() - 1.0).abs() < 1e-8);
        assert!(c1.dot(c2).abs() < 1e-8);

        // Variance along c1 beats the variance along every coordinate axis.
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
        };
        let proj1: Vec<f64> = pca.projections.column(0).to_vec();
        let v1 = var(&proj1);
        for j in 0..10 {
            let axis: Vec<f64> = points.column(j).to_vec();
            assert!(
                v1 >= var(&axis) - 1e-9,
                "axis {j} variance {} exceeds c1 variance {v1}",
                var(&axis)
            );
        }

        // Sign convention: the largest-magnitude entry of each component is
        // positive.
        for c in [c1, c2] {
            let j = (0..10)
                .max_by(|&a, &b| c[a].abs().total_cmp(&c[b].abs()))
                .unwrap();
            assert!(c[j] > 0.0);
        }
    }

    #[test]
    fn pca_is_translation_invariant() {
        let mut rng = rng::stream(14, &[tag("pca-shift")]);
        let points = Array2::from_shape_fn((30, 10), |_| rng.random_range(-1.0..1.0));
        let shifted = &points + 100.0;
        let a = pca_top2(&points.view()).unwrap();
        let b = pca_top2(&shifted.view()).unwrap();
        for (x, y) in a.projections.iter().zip(b.projections.iter()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn pca_on_a_line_has_negligible_second_variance() {
        // Points on a 1-D line through 10-D space.
        let dir = Array1::from_shape_fn(10, |j| ((j as f64) - 4.5) / 3.0);
        let points = Array2::from_shape_fn((25, 10), |(i, j)| (i as f64 - 12.0) * dir[j]);
        let pca = pca_top2(&points.view()).unwrap();
        let second: Vec<f64> = pca.projections.column(1).to_vec();
        let m = second.iter().sum::<f64>() / second.len() as f64;
        let var = second.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
            / (second.len() as f64 - 1.0);
        assert!(var < 1e-8, "second-component variance {var}");
        // Components remain orthonormal even with the fallback second vector.
        let [c1, c2] = &pca.components;
        assert!(c1.dot(c2).abs() < 1e-8);
        assert!((c2.dot(c2).sqrt() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn pca_rejects_rank_zero_and_tiny_inputs() {
        let same = Array2::from_elem((5, 10), 0.25);
        assert!(matches!(
            pca_top2(&same.view()).unwrap_err(),
            Error::Degenerate(_)
        ));
        let two = Array2::zeros((2, 10));
        assert_eq!(pca_top2(&two.view()).unwrap_err().exit_code(), 2);
        let thin = Array2::zeros((5, 1));
        assert_eq!(pca_top2(&thin.view()).unwrap_err().exit_code(), 2);
    }
}
