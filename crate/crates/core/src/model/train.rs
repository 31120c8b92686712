use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::mask::sample_mask;
use super::net::{FrameBatch, LossReport, VtaoModel};
use super::ModelError;
use crate::dataset::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[Array2<f64>]) -> Self {
        let zeros = || shapes.iter().map(|a| Array2::zeros(a.dim())).collect();
        AdamW { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update; `decay[i]` selects tensors that receive weight decay.
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], decay: &[bool]) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                if decay[i] {
                    *p -= c.lr * c.weight_decay * *p;
                }
                *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many steps when set.
    pub max_steps: Option<usize>,
    /// Seeds weight init, shuffling and masks.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { optim: AdamWConfig::default(), batch_size: 8, epochs: 300, max_steps: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    step: usize,
    seed: u64,
    history: Vec<HistoryEntry>,
    tensors: Vec<(String, Vec<usize>)>,
}

const MAGIC: &[u8; 8] = b"VTAOCKPT";
const VERSION: u32 = 1;

/// Weights plus everything needed to rebuild and audit a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VtaoModel,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub history: Vec<HistoryEntry>,
}

impl Checkpoint {
    pub fn new(model: VtaoModel, seed: u64) -> Self {
        Checkpoint { model, epoch: 0, step: 0, seed, history: Vec::new() }
    }

    /// Layout: magic, u32 version, u64 header length, JSON header, then every
    /// tensor as little-endian f64 in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let header = Header {
            config: self.model.config().clone(),
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
            history: self.history.clone(),
            tensors: params
                .names()
                .iter()
                .zip(params.values())
                .map(|(n, v)| (n.clone(), v.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in params.values() {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.into());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = VtaoModel::new(header.config, 0)?;
        let mut at = 20 + len;
        let mut named = Vec::with_capacity(header.tensors.len());
        for (name, shape) in header.tensors {
            if shape.len() != 2 {
                return Err(ModelError::Checkpoint(format!("{name} is not a matrix")));
            }
            let n = shape[0] * shape[1];
            let raw = bytes.get(at..at + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            named.push((name, Array2::from_shape_vec((shape[0], shape[1]), data).expect("sized")));
            at += 8 * n;
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        model.set_params(named)?;
        Ok(Checkpoint { model, epoch: header.epoch, step: header.step, seed: header.seed, history: header.history })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Masked pretraining from a fresh model seeded with `train.seed`.
///
/// `on_step` sees every logged entry, e.g. for progress output.
pub fn pretrain(
    ds: &Dataset,
    config: &ModelConfig,
    train: &PretrainConfig,
    mut on_step: impl FnMut(&HistoryEntry),
) -> Result<Checkpoint, ModelError> {
    if ds.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if config.use_a && ds.horizon() < config.p {
        return Err(ModelError::Config(format!(
            "dataset holds {} future actions, the model predicts {}",
            ds.horizon(),
            config.p
        )));
    }
    if config.use_v && ds.image_size() != config.image_size {
        return Err(ModelError::Config(format!(
            "dataset images are {} px, the model expects {}",
            ds.image_size(),
            config.image_size
        )));
    }
    if train.batch_size == 0 {
        return Err(ModelError::Config("batch size must be positive".into()));
    }
    let model = VtaoModel::new(config.clone(), train.seed)?;
    let mut ckpt = Checkpoint::new(model, train.seed);
    if config.is_empty() || !config.pretrained {
        return Ok(ckpt);
    }
    let decay: Vec<bool> = (0..ckpt.model.params().len()).map(|i| ckpt.model.params().decays(i)).collect();
    let mut opt = AdamW::new(train.optim, ckpt.model.params().values());
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let layout = ckpt.model.layout().clone();
    let max_steps = train.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            if ckpt.step >= max_steps {
                break 'epochs;
            }
            let batch = FrameBatch::from_dataset(ds, chunk);
            let plans: Vec<_> = chunk.iter().map(|_| sample_mask(&layout, &config.mask, rng.random())).collect();
            let (report, grads) = match ckpt.model.loss_and_grad(&batch, &plans) {
                Ok(r) => r,
                Err(ModelError::NonFinite { report, .. }) => {
                    return Err(ModelError::Diverged { step: ckpt.step, report, last_good: Box::new(ckpt) });
                }
                Err(e) => return Err(e),
            };
            let entry = HistoryEntry { step: ckpt.step, epoch, loss: report };
            on_step(&entry);
            ckpt.history.push(entry);
            let before = ckpt.model.params().values().to_vec();
            opt.step(ckpt.model.params_mut().values_mut(), &grads, &decay);
            if ckpt.model.params().values().iter().any(|v| v.iter().any(|x| !x.is_finite())) {
                ckpt.model.params_mut().values_mut().clone_from_slice(&before);
                ckpt.history.pop();
                return Err(ModelError::Diverged { step: ckpt.step, report, last_good: Box::new(ckpt) });
            }
            ckpt.step += 1;
        }
        ckpt.epoch = epoch + 1;
    }
    Ok(ckpt)
}
