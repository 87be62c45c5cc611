//! Loss, the training loop and checkpoint files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   "ALTO\0CKP"
//! u32     version (1)
//! u64     length of the JSON metadata, then the UTF-8 bytes
//! u64     tensor count
//! per tensor:
//!   u16 name length, name bytes
//!   u8  dtype (0 = f32, 1 = f64)
//!   u8  rank, rank x u64 dims
//!   values, little-endian, in the tensor's dtype
//! ```
//!
//! Parameters are stored as `param/<name>`, Adam moments as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ad::{bce_sum, AdamConfig, AdamState, Graph, ParamSet, Var};
use crate::convert::GridMode;
use crate::decoder::{self, DecoderConfig, QueryMaps};
use crate::encoder::{self, EncoderConfig, EncoderMaps};
use crate::error::{Error, Result};
use crate::geometry::{self, stream, Point, QueryBatch, ShapeSpec};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ALTO\0CKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encoder, decoder and numeric precision.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub dtype: DType,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    pub fn mode(&self) -> GridMode {
        self.encoder.mode
    }
}

/// Fresh parameters for `cfg`, drawn from the init stream of `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut r = geometry::rng(seed, stream::INIT);
    let mut ps = ParamSet::new();
    encoder::init_params(&cfg.encoder, &mut r, &mut ps)?;
    decoder::init_params(&cfg.decoder, cfg.mode(), cfg.encoder.dim, &mut r, &mut ps)?;
    if cfg.dtype == DType::F32 {
        for (_, t) in ps.iter_mut() {
            *t = t.clone().with_dtype(DType::F32);
        }
    }
    Ok(ps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Surface points per cloud.
    pub points: usize,
    /// Queries per step.
    pub queries: usize,
    pub lr: f64,
    pub seed: u64,
    /// Predictions are clamped to `[eps, 1 - eps]` inside the loss.
    pub clamp_eps: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub noise_sigma: f64,
    /// Reuse the step-0 query set every step.
    pub fixed_queries: bool,
    /// Draw a new noisy cloud every step.
    pub resample_points: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            points: 3000,
            queries: 2048,
            lr: 1e-4,
            seed: 0,
            clamp_eps: 1e-7,
            checkpoint_interval: 0,
            noise_sigma: 0.005,
            fixed_queries: false,
            resample_points: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.queries == 0 {
            return Err(Error::Config("points and queries per step must be at least 1".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config(format!("clamp_eps must be in (0, 0.5), got {}", self.clamp_eps)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Summed binary cross-entropy and its mean over queries.
pub fn bce_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<(f64, f64)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim(
            "bce_loss",
            format!("{} predictions vs {} targets", pred.len(), target.len()),
        ));
    }
    if let Some(bad) = target.iter().find(|&&o| o != 0.0 && o != 1.0) {
        return Err(Error::Contract(format!("occupancy target {bad} is not 0 or 1")));
    }
    let sum = bce_sum(pred, target, eps);
    Ok((sum, sum / pred.len() as f64))
}

/// What a run learns from.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainData {
    /// Noisy surface samples and oracle-labelled uniform queries.
    Shape(ShapeSpec),
    /// A fixed cloud and a fixed labelled query set.
    Labeled { points: Vec<Point>, queries: QueryBatch },
}

/// The noisy input cloud a shape run sees at `step`.
pub fn training_cloud(spec: &ShapeSpec, cfg: &TrainConfig, step: u64) -> Result<Vec<Point>> {
    let seed = if cfg.resample_points {
        cfg.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    } else {
        cfg.seed
    };
    let clean = geometry::sample_surface(spec, cfg.points, seed)?;
    geometry::add_noise(&clean, cfg.noise_sigma, seed)
}

/// The labelled queries a shape run sees at `step`.
pub fn training_queries(spec: &ShapeSpec, cfg: &TrainConfig, step: u64) -> Result<QueryBatch> {
    let s = if cfg.fixed_queries { 0 } else { step };
    Ok(geometry::sample_queries_stream(cfg.queries, cfg.seed, 1000 + s)?.with_labels_from(spec))
}

/// Summed BCE of the model on `labels` at the queries of `qmaps`.
pub fn loss_graph(
    g: &mut Graph,
    p: &crate::ad::Bound,
    model: &ModelConfig,
    maps: &EncoderMaps,
    qmaps: &QueryMaps,
    labels: &[f64],
    eps: f64,
) -> Result<Var> {
    let planes = encoder::encode_graph(g, p, &model.encoder, maps)?;
    let prob = decoder::decode_graph(g, p, &model.decoder, model.mode(), &planes, qmaps)?;
    g.bce(prob, labels, eps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub sum: f64,
    pub mean: f64,
}

pub struct TrainState {
    pub params: ParamSet,
    pub adam: AdamState,
    /// Steps completed so far.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParamSet, cfg: &TrainConfig) -> Result<Self> {
        let adam = AdamState::new(&params, cfg.adam())?;
        Ok(TrainState { params, adam, step: 0 })
    }
}

/// Runs `cfg.steps` further optimisation steps. `on_step` sees the state
/// after every step (for logging and checkpoints).
pub fn fit<F>(
    data: &TrainData,
    model: &ModelConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_step: F,
) -> Result<Vec<LossRecord>>
where
    F: FnMut(&TrainState, &LossRecord) -> Result<()>,
{
    model.validate()?;
    cfg.validate()?;
    let mut history = Vec::with_capacity(cfg.steps as usize);
    let res = model.encoder.resolution;
    let mut fixed_maps: Option<EncoderMaps> = None;
    let mut fixed_queries: Option<(QueryMaps, Vec<f64>)> = None;
    if let TrainData::Labeled { points, queries } = data {
        let labels = queries
            .labels
            .clone()
            .ok_or_else(|| Error::Contract("training queries carry no labels".into()))?;
        fixed_maps = Some(EncoderMaps::new(&model.encoder, points)?);
        fixed_queries = Some((QueryMaps::new(&queries.coords, model.mode(), res)?, labels));
    } else if let TrainData::Shape(spec) = data {
        if !cfg.resample_points {
            fixed_maps = Some(EncoderMaps::new(&model.encoder, &training_cloud(spec, cfg, 0)?)?);
        }
    }
    for _ in 0..cfg.steps {
        let step = state.step;
        let owned_maps;
        let maps = match (&fixed_maps, data) {
            (Some(m), _) => m,
            (None, TrainData::Shape(spec)) => {
                owned_maps = EncoderMaps::new(&model.encoder, &training_cloud(spec, cfg, step)?)?;
                &owned_maps
            }
            (None, TrainData::Labeled { .. }) => unreachable!("labelled data builds its maps up front"),
        };
        let owned_q;
        let (qmaps, labels) = match (&fixed_queries, data) {
            (Some((q, l)), _) => (q, l.as_slice()),
            (None, TrainData::Shape(spec)) => {
                let qb = training_queries(spec, cfg, step)?;
                owned_q = (
                    QueryMaps::new(&qb.coords, model.mode(), res)?,
                    qb.labels.expect("oracle labels"),
                );
                (&owned_q.0, owned_q.1.as_slice())
            }
            (None, TrainData::Labeled { .. }) => unreachable!(),
        };
        let mut g = Graph::with_dtype(model.dtype);
        let p = state.params.bind(&mut g);
        let loss = loss_graph(&mut g, &p, model, maps, qmaps, labels, cfg.clamp_eps)?;
        let sum = g.value(loss).data()[0];
        if !sum.is_finite() {
            return Err(Error::Numerical(format!("loss became {sum} at step {}", step + 1)));
        }
        let grads = g.backward(loss)?;
        let grads = p.grads(&grads);
        drop(g);
        state.adam.step(&mut state.params, &grads)?;
        state.step += 1;
        let rec = LossRecord {
            step: state.step,
            sum,
            mean: sum / labels.len() as f64,
        };
        debug!("step {} loss {:.6}", rec.step, rec.mean);
        if rec.step % 50 == 0 {
            info!("step {} mean loss {:.6}", rec.step, rec.mean);
        }
        on_step(state, &rec)?;
        history.push(rec);
    }
    Ok(history)
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Snapshot of the run configuration.
    pub config: Value,
    pub step: u64,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_state(config: Value, state: &TrainState) -> Self {
        Checkpoint {
            config,
            step: state.step,
            params: state.params.clone(),
            adam: Some(state.adam.clone()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = json!({ "config": self.config, "step": self.step });
        if let Some(a) = &self.adam {
            meta["adam"] = json!({ "t": a.t, "config": serde_json::to_value(a.config)? });
        }
        // Values keep object keys sorted, so a reloaded checkpoint re-encodes identically.
        let meta = serde_json::to_vec(&serde_json::to_value(meta)?)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let mut tensors: Vec<(String, &Tensor)> =
            self.params.iter().map(|(n, t)| (format!("param/{n}"), t)).collect();
        if let Some(a) = &self.adam {
            tensors.extend(a.m.iter().map(|(n, t)| (format!("adam.m/{n}"), t)));
            tensors.extend(a.v.iter().map(|(n, t)| (format!("adam.v/{n}"), t)));
        }
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            if name.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t.dtype() {
                DType::F32 => t.data().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
                DType::F64 => t.data().iter().for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_array(&mut r, "version")?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = read_len(&mut r, bytes.len(), "metadata length")?;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta, "metadata")?;
        let meta: Value = serde_json::from_slice(&meta)
            .map_err(|e| Error::Checkpoint(format!("metadata is not valid JSON: {e}")))?;
        let count = u64::from_le_bytes(read_array(&mut r, "tensor count")?);
        let mut params = ParamSet::new();
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for i in 0..count {
            let name_len = u16::from_le_bytes(read_array(&mut r, "tensor name length")?) as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "tensor name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?;
            let [tag, rank] = read_array::<2>(&mut r, "tensor header")?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' has unknown dtype tag {tag}")))?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(read_len(&mut r, bytes.len(), "tensor dims")?);
            }
            let n: usize = shape.iter().product();
            let width = if dtype == DType::F32 { 4 } else { 8 };
            if n.saturating_mul(width) > bytes.len() - r.position() as usize {
                return Err(Error::Checkpoint(format!("truncated data for tensor '{name}'")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(match dtype {
                    DType::F32 => f32::from_le_bytes(read_array(&mut r, "tensor data")?) as f64,
                    DType::F64 => f64::from_le_bytes(read_array(&mut r, "tensor data")?),
                });
            }
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?
                .with_dtype(dtype);
            if let Some(k) = name.strip_prefix("param/") {
                params.insert(k, t);
            } else if let Some(k) = name.strip_prefix("adam.m/") {
                m.insert(k, t);
            } else if let Some(k) = name.strip_prefix("adam.v/") {
                v.insert(k, t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor name '{name}'")));
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.position() as usize
            )));
        }
        let step = meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("metadata lacks a step counter".into()))?;
        let adam = match meta.get("adam") {
            None | Some(Value::Null) => None,
            Some(a) => {
                let config: AdamConfig = serde_json::from_value(a["config"].clone())
                    .map_err(|e| Error::Checkpoint(format!("bad Adam config: {e}")))?;
                let t = a["t"]
                    .as_u64()
                    .ok_or_else(|| Error::Checkpoint("Adam state lacks t".into()))?;
                let names = |s: &ParamSet| s.names().map(str::to_owned).collect::<Vec<_>>();
                if names(&m) != names(&params) || names(&v) != names(&params) {
                    return Err(Error::Checkpoint("Adam moments do not match the parameters".into()));
                }
                Some(AdamState { config, m, v, t })
            }
        };
        Ok(Checkpoint {
            config: meta["config"].clone(),
            step,
            params,
            adam,
        })
    }

    /// The model section of the stored run configuration.
    pub fn model(&self) -> Result<ModelConfig> {
        let v = self
            .config
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Config("checkpoint config has no model section".into()))?;
        serde_json::from_value(v).map_err(|e| Error::Config(format!("checkpoint model config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("file truncated while reading {what}")))
}

fn read_array<const N: usize>(r: &mut Cursor<&[u8]>, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b, what)?;
    Ok(b)
}

fn read_len(r: &mut Cursor<&[u8]>, total: usize, what: &str) -> Result<usize> {
    let n = u64::from_le_bytes(read_array(r, what)?);
    if n > total as u64 * 8 {
        return Err(Error::Checkpoint(format!("implausible {what} {n}")));
    }
    Ok(n as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Padding;
    use crate::decoder::DecodeMode;

    #[test]
    fn bce_values() {
        let (s, m) = bce_loss(&[0.5], &[1.0], 1e-7).unwrap();
        assert!((s - std::f64::consts::LN_2).abs() < 1e-15 && s == m);
        let (s, _) = bce_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 1e-7).unwrap();
        assert!(s <= 3.0 * -(1.0f64 - 1e-7).ln() + 1e-18);
        assert!(matches!(bce_loss(&[0.3], &[0.5], 1e-7), Err(Error::Contract(_))));
    }

    #[test]
    fn bce_matches_loop() {
        let mut r = geometry::rng(1, 0);
        use rand::Rng;
        let pred: Vec<f64> = (0..64).map(|_| r.gen()).collect();
        let target: Vec<f64> = (0..64).map(|_| if r.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        let mut want = 0.0;
        for i in 0..64 {
            let p = pred[i].clamp(1e-7, 1.0 - 1e-7);
            want -= if target[i] == 1.0 { p.ln() } else { (1.0 - p).ln() };
        }
        let (s, m) = bce_loss(&pred, &target, 1e-7).unwrap();
        assert!((s - want).abs() < 1e-12);
        assert!((m - want / 64.0).abs() < 1e-12);
    }

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                mode: GridMode::Triplane,
                resolution: 8,
                dim: 4,
                depth: 2,
                no_resample_top: 1,
                alternation: None,
                padding: Padding::Zero,
            },
            decoder: DecoderConfig { decode: DecodeMode::Attention, heads: 1, chunk: 4096 },
            dtype: DType::F64,
        }
    }

    fn tiny_train(steps: u64) -> TrainConfig {
        TrainConfig { steps, points: 50, queries: 64, lr: 1e-3, seed: 3, ..TrainConfig::default() }
    }

    #[test]
    fn zero_steps_leave_params() {
        let model = tiny_model();
        let params = init_model(&model, 1).unwrap();
        let mut st = TrainState::new(params.clone(), &tiny_train(0)).unwrap();
        let spec = ShapeSpec::sphere([0.5; 3], 0.3);
        let h = fit(&TrainData::Shape(spec), &model, &tiny_train(0), &mut st, |_, _| Ok(())).unwrap();
        assert!(h.is_empty());
        assert_eq!(st.params, params);
    }

    #[test]
    fn fit_is_deterministic_and_resumable() {
        let model = tiny_model();
        let spec = TrainData::Shape(ShapeSpec::sphere([0.5; 3], 0.3));
        let run = |steps: u64| {
            let mut st = TrainState::new(init_model(&model, 1).unwrap(), &tiny_train(steps)).unwrap();
            let h = fit(&spec, &model, &tiny_train(steps), &mut st, |_, _| Ok(())).unwrap();
            (h, st)
        };
        let (a, sa) = run(4);
        let (b, sb) = run(4);
        assert_eq!(a.len(), 4);
        assert!(a.iter().zip(&b).all(|(x, y)| x.sum.to_bits() == y.sum.to_bits()));
        assert_eq!(sa.params, sb.params);

        let (_, mut half) = run(2);
        let rest = fit(&spec, &model, &tiny_train(2), &mut half, |_, _| Ok(())).unwrap();
        assert_eq!(rest[1].step, 4);
        assert_eq!(rest[1].sum.to_bits(), a[3].sum.to_bits());
        assert_eq!(half.params, sa.params);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny_model();
        let mut st = TrainState::new(init_model(&model, 2).unwrap(), &tiny_train(1)).unwrap();
        let spec = TrainData::Shape(ShapeSpec::sphere([0.5; 3], 0.3));
        fit(&spec, &model, &tiny_train(1), &mut st, |_, _| Ok(())).unwrap();
        let ck = Checkpoint::from_state(json!({ "model": model, "lr": 0.001 }), &st);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.params, st.params);
        assert_eq!(back.step, 1);
        assert_eq!(back.adam.as_ref().unwrap().t, 1);
        assert_eq!(back.params.names().collect::<Vec<_>>(), st.params.names().collect::<Vec<_>>());

        let mut bad = bytes.clone();
        bad[2] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn f32_checkpoints_store_four_bytes() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::new(&[2], vec![0.1, 0.2]).unwrap().with_dtype(DType::F32));
        let ck = Checkpoint { config: Value::Null, step: 0, params: ps, adam: None };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
