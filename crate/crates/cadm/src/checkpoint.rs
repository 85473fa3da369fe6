//! Checkpoint persistence: a versioned JSON document with human-readable
//! metadata (env, hyperparameters, planner settings, normalizer statistics)
//! and base64-packed little-endian 64-bit weight blobs. Loading a saved
//! checkpoint reproduces predictions bit-exactly.

use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::model::{BaselineKind, BaselineModel, CadmModel, DynamicsModel, Normalizer};
use crate::nn::{Activation, Layer, MlpParams};
use crate::planner::{PlanConfig, PlanMethod};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Bumped whenever the on-disk layout changes incompatibly.
pub const FORMAT_VERSION: u32 = 1;

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub iterations_completed: usize,
    pub best_return: Option<f64>,
}

/// A checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub model: DynamicsModel,
    pub plan: PlanConfig,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct FileDoc {
    format_version: u32,
    env: String,
    kind: String,
    hyper: HyperDoc,
    plan: PlanDoc,
    normalizer: NormDoc,
    encoder: Option<NetDoc>,
    forward: NetDoc,
    backward: Option<NetDoc>,
    meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct HyperDoc {
    k: usize,
    m: usize,
    beta: f64,
    latent_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct PlanDoc {
    method: String,
    horizon: usize,
    n_candidates: usize,
    cem_iterations: usize,
    cem_elite_frac: f64,
    cem_alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct NormDoc {
    state_mean: Vec<f64>,
    state_std: Vec<f64>,
    action_mean: Vec<f64>,
    action_std: Vec<f64>,
    delta_mean: Vec<f64>,
    delta_std: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetDoc {
    activation: Activation,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    w: String,
    b: String,
}

fn pack_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn unpack_f64(text: &str, expect: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::config(format!("checkpoint {what}: bad base64: {e}")))?;
    if bytes.len() != expect * 8 {
        return Err(Error::config(format!(
            "checkpoint {what}: expected {} bytes, found {}",
            expect * 8,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact yields 8 bytes")))
        .collect())
}

fn net_to_doc(p: &MlpParams) -> NetDoc {
    NetDoc {
        activation: p.activation,
        layers: p
            .layers
            .iter()
            .map(|l| LayerDoc {
                rows: l.w.nrows(),
                cols: l.w.ncols(),
                w: pack_f64(l.w.as_slice().expect("weights are standard layout")),
                b: pack_f64(l.b.as_slice().expect("biases are contiguous")),
            })
            .collect(),
    }
}

fn net_from_doc(doc: &NetDoc, what: &str) -> Result<MlpParams> {
    if doc.layers.is_empty() {
        return Err(Error::config(format!("checkpoint {what}: no layers")));
    }
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.iter().enumerate() {
        let w = unpack_f64(&l.w, l.rows * l.cols, &format!("{what} layer {i} weights"))?;
        let b = unpack_f64(&l.b, l.rows, &format!("{what} layer {i} biases"))?;
        let w = Array2::from_shape_vec((l.rows, l.cols), w)
            .map_err(|e| Error::config(format!("checkpoint {what} layer {i}: {e}")))?;
        layers.push(Layer {
            w,
            b: Array1::from_vec(b),
        });
    }
    Ok(MlpParams {
        layers,
        activation: doc.activation,
    })
}

fn norm_to_doc(n: &Normalizer) -> NormDoc {
    NormDoc {
        state_mean: n.state_mean.to_vec(),
        state_std: n.state_std.to_vec(),
        action_mean: n.action_mean.to_vec(),
        action_std: n.action_std.to_vec(),
        delta_mean: n.delta_mean.to_vec(),
        delta_std: n.delta_std.to_vec(),
    }
}

fn norm_from_doc(d: &NormDoc) -> Normalizer {
    Normalizer {
        state_mean: Array1::from_vec(d.state_mean.clone()),
        state_std: Array1::from_vec(d.state_std.clone()),
        action_mean: Array1::from_vec(d.action_mean.clone()),
        action_std: Array1::from_vec(d.action_std.clone()),
        delta_mean: Array1::from_vec(d.delta_mean.clone()),
        delta_std: Array1::from_vec(d.delta_std.clone()),
    }
}

fn plan_to_doc(p: &PlanConfig) -> PlanDoc {
    PlanDoc {
        method: p.method.as_str().to_owned(),
        horizon: p.horizon,
        n_candidates: p.n_candidates,
        cem_iterations: p.cem_iterations,
        cem_elite_frac: p.cem_elite_frac,
        cem_alpha: p.cem_alpha,
    }
}

fn plan_from_doc(d: &PlanDoc) -> Result<PlanConfig> {
    Ok(PlanConfig {
        method: PlanMethod::parse(&d.method)?,
        horizon: d.horizon,
        n_candidates: d.n_candidates,
        cem_iterations: d.cem_iterations,
        cem_elite_frac: d.cem_elite_frac,
        cem_alpha: d.cem_alpha,
    })
}

/// Serialize a model to the checkpoint document text.
pub fn to_text(model: &DynamicsModel, plan: &PlanConfig, meta: &TrainMeta) -> Result<String> {
    let doc = match model {
        DynamicsModel::Cadm(m) => FileDoc {
            format_version: FORMAT_VERSION,
            env: m.env.as_str().to_owned(),
            kind: "cadm".to_owned(),
            hyper: HyperDoc {
                k: m.k,
                m: m.m,
                beta: m.beta,
                latent_dim: m.latent_dim,
            },
            plan: plan_to_doc(plan),
            normalizer: norm_to_doc(&m.norm),
            encoder: Some(net_to_doc(&m.encoder)),
            forward: net_to_doc(&m.forward_net),
            backward: Some(net_to_doc(&m.backward_net)),
            meta: meta.clone(),
        },
        DynamicsModel::Baseline(m) => FileDoc {
            format_version: FORMAT_VERSION,
            env: m.env.as_str().to_owned(),
            kind: m.kind.as_str().to_owned(),
            hyper: HyperDoc {
                k: match m.kind {
                    BaselineKind::Vanilla => 0,
                    BaselineKind::Stacked => crate::model::K_STACK,
                },
                m: 1,
                beta: 0.0,
                latent_dim: 0,
            },
            plan: plan_to_doc(plan),
            normalizer: norm_to_doc(&m.norm),
            encoder: None,
            forward: net_to_doc(&m.forward_net),
            backward: None,
            meta: meta.clone(),
        },
        DynamicsModel::Oracle(_) => {
            return Err(Error::config("oracle models cannot be checkpointed"))
        }
    };
    serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Data(format!("cannot serialize checkpoint: {e}")))
}

pub fn save(path: &Path, model: &DynamicsModel, plan: &PlanConfig, meta: &TrainMeta) -> Result<()> {
    let text = to_text(model, plan, meta)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn from_text(text: &str) -> Result<Loaded> {
    let doc: FileDoc = serde_json::from_str(text)
        .map_err(|e| Error::config(format!("malformed checkpoint: {e}")))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::config(format!(
            "checkpoint format version {} is not supported (this build reads version {})",
            doc.format_version, FORMAT_VERSION
        )));
    }
    let env = EnvId::parse(&doc.env)?;
    let norm = norm_from_doc(&doc.normalizer);
    let plan = plan_from_doc(&doc.plan)?;
    let model = match doc.kind.as_str() {
        "cadm" => {
            let encoder = doc
                .encoder
                .as_ref()
                .ok_or_else(|| Error::config("cadm checkpoint is missing the encoder"))?;
            let backward = doc
                .backward
                .as_ref()
                .ok_or_else(|| Error::config("cadm checkpoint is missing the backward net"))?;
            DynamicsModel::Cadm(CadmModel {
                env,
                k: doc.hyper.k,
                m: doc.hyper.m,
                beta: doc.hyper.beta,
                latent_dim: doc.hyper.latent_dim,
                encoder: net_from_doc(encoder, "encoder")?,
                forward_net: net_from_doc(&doc.forward, "forward net")?,
                backward_net: net_from_doc(backward, "backward net")?,
                norm,
            })
        }
        "vanilla" | "stacked" => DynamicsModel::Baseline(BaselineModel {
            env,
            kind: BaselineKind::parse(&doc.kind)?,
            forward_net: net_from_doc(&doc.forward, "forward net")?,
            norm,
        }),
        other => {
            return Err(Error::config(format!(
                "unknown checkpoint kind '{other}'"
            )))
        }
    };
    Ok(Loaded {
        model,
        plan,
        meta: doc.meta,
    })
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::config(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array2;
    use rand::Rng;

    fn sample_cadm() -> DynamicsModel {
        let mut m = CadmModel::new(EnvId::Cartpole, 4, 3, 0.5, 10, &[16, 16], &[24, 24], 21).unwrap();
        // Non-trivial normalizer so round-trip exactness is meaningful.
        let mut r = rng::stream(8, &[rng::tag("ckpt-test")]);
        for v in m.norm.state_mean.iter_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        for v in m.norm.delta_std.iter_mut() {
            *v = r.random_range(0.5..2.0);
        }
        DynamicsModel::Cadm(m)
    }

    fn sample_plan() -> PlanConfig {
        PlanConfig {
            method: PlanMethod::Rs,
            horizon: 30,
            n_candidates: 1000,
            cem_iterations: 5,
            cem_elite_frac: 0.1,
            cem_alpha: 0.1,
        }
    }

    fn sample_meta() -> TrainMeta {
        TrainMeta {
            seed: 42,
            iterations_completed: 20,
            best_return: Some(187.25),
        }
    }

    #[test]
    fn cadm_round_trip_is_bit_exact_on_predictions() {
        let model = sample_cadm();
        let text = to_text(&model, &sample_plan(), &sample_meta()).unwrap();
        let loaded = from_text(&text).unwrap();
        let mut r = rng::stream(3, &[rng::tag("ckpt-test")]);
        let states = Array2::from_shape_fn((100, 4), |_| r.random_range(-2.0..2.0));
        let actions = Array2::from_shape_fn((100, 1), |_| r.random_range(0.0..1.0));
        let ctx = ndarray::Array1::from_shape_fn(10, |_| r.random_range(-1.0..1.0));
        let before = model
            .predict_batch(&states.view(), &actions.view(), &ctx.view())
            .unwrap();
        let after = loaded
            .model
            .predict_batch(&states.view(), &actions.view(), &ctx.view())
            .unwrap();
        assert!(before
            .iter()
            .zip(after.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // Encoder survives too.
        let (m0, m1) = match (&model, &loaded.model) {
            (DynamicsModel::Cadm(a), DynamicsModel::Cadm(b)) => (a, b),
            _ => unreachable!(),
        };
        let h = Array2::from_shape_fn((5, m0.k * 5), |_| r.random_range(-1.0..1.0));
        let z0 = m0.encode(&h.view()).unwrap();
        let z1 = m1.encode(&h.view()).unwrap();
        assert!(z0.iter().zip(z1.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn meta_plan_and_hyper_round_trip() {
        let text = to_text(&sample_cadm(), &sample_plan(), &sample_meta()).unwrap();
        let loaded = from_text(&text).unwrap();
        assert_eq!(loaded.meta, sample_meta());
        assert_eq!(loaded.plan.horizon, 30);
        assert_eq!(loaded.plan.method, PlanMethod::Rs);
        match loaded.model {
            DynamicsModel::Cadm(m) => {
                assert_eq!(m.env, EnvId::Cartpole);
                assert_eq!((m.k, m.m, m.beta, m.latent_dim), (4, 3, 0.5, 10));
            }
            _ => panic!("expected cadm checkpoint"),
        }
    }

    #[test]
    fn vanilla_checkpoint_has_no_encoder() {
        let model = DynamicsModel::Baseline(
            BaselineModel::new(EnvId::Pendulum, BaselineKind::Vanilla, &[8, 8], 5).unwrap(),
        );
        let text = to_text(&model, &sample_plan(), &sample_meta()).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value["encoder"].is_null());
        assert!(value["backward"].is_null());
        match from_text(&text).unwrap().model {
            DynamicsModel::Baseline(m) => assert_eq!(m.kind, BaselineKind::Vanilla),
            _ => panic!("expected baseline"),
        }
    }

    #[test]
    fn stacked_checkpoint_round_trips() {
        let model = DynamicsModel::Baseline(
            BaselineModel::new(EnvId::Cartpole, BaselineKind::Stacked, &[8], 5).unwrap(),
        );
        let text = to_text(&model, &sample_plan(), &sample_meta()).unwrap();
        let loaded = from_text(&text).unwrap();
        let states = Array2::from_elem((3, 4), 0.3);
        let actions = Array2::from_elem((3, 1), 1.0);
        let window = ndarray::Array1::from_elem(50, 0.1);
        let a = model
            .predict_batch(&states.view(), &actions.view(), &window.view())
            .unwrap();
        let b = loaded
            .model
            .predict_batch(&states.view(), &actions.view(), &window.view())
            .unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn awkward_float_values_survive() {
        let mut m = CadmModel::new(EnvId::Pendulum, 2, 2, 0.5, 10, &[4], &[4], 1).unwrap();
        m.forward_net.layers[0].w[[0, 0]] = -0.0;
        m.forward_net.layers[0].w[[1, 0]] = f64::MIN_POSITIVE / 2.0; // subnormal
        m.forward_net.layers[0].w[[2, 0]] = 1.0e-308;
        m.forward_net.layers[0].w[[3, 0]] = f64::MAX;
        let model = DynamicsModel::Cadm(m);
        let text = to_text(&model, &sample_plan(), &sample_meta()).unwrap();
        let loaded = from_text(&text).unwrap();
        let (orig, back) = match (&model, &loaded.model) {
            (DynamicsModel::Cadm(a), DynamicsModel::Cadm(b)) => (a, b),
            _ => unreachable!(),
        };
        for (a, b) in orig
            .forward_net
            .iter_scalars()
            .zip(back.forward_net.iter_scalars())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let text = to_text(&sample_cadm(), &sample_plan(), &sample_meta()).unwrap();
        let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 999", 1);
        let err = from_text(&bumped).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("999"));
    }

    #[test]
    fn corrupt_payload_rejected() {
        let text = to_text(&sample_cadm(), &sample_plan(), &sample_meta()).unwrap();
        // Not JSON at all.
        assert_eq!(from_text("not json").unwrap_err().exit_code(), 2);
        // Valid JSON, but a weight blob is truncated.
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["forward"]["layers"][0]["w"] = serde_json::Value::String("AAAA".into());
        let err = from_text(&value.to_string()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        // Bad base64.
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["forward"]["layers"][0]["w"] = serde_json::Value::String("@@@".into());
        assert_eq!(from_text(&value.to_string()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn oracle_cannot_be_saved() {
        let model = DynamicsModel::Oracle(crate::model::OracleModel {
            params: crate::envs::EnvParams::Pendulum { mass: 1.0, length: 1.0 },
        });
        assert_eq!(
            to_text(&model, &sample_plan(), &sample_meta())
                .unwrap_err()
                .exit_code(),
            2
        );
    }

    #[test]
    fn save_and_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = sample_cadm();
        save(&path, &model, &sample_plan(), &sample_meta()).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.meta.seed, 42);
        // Missing file reads as a config error.
        assert_eq!(
            load(&dir.path().join("absent.ckpt")).unwrap_err().exit_code(),
            2
        );
    }
}
