use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{ActorCritic, Rollout, RunningNorm, UpdateStats};
use super::{gae, mean_success_rate, PPOConfig, RlError, SuccessTracker};
use crate::env::{BottleSpec, EnvConfig, EnvState, Environment, Hands, Observation, Outcome, RewardBreakdown};
use crate::env::{ACTION_DIM, PROPRIO_DIM};
use crate::model::{Checkpoint, FrameBatch, VtaoModel};

/// Read-only encoder; RL code can only run it forward.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    model: Arc<VtaoModel>,
}

impl FrozenEncoder {
    pub fn new(model: VtaoModel) -> Self {
        FrozenEncoder { model: Arc::new(model) }
    }

    pub fn model(&self) -> &VtaoModel {
        &self.model
    }

    pub fn dim(&self) -> usize {
        self.model.config().embed_dim
    }

    pub fn digest(&self) -> String {
        self.model.encoder_digest()
    }

    pub fn check_env(&self, env: &EnvConfig) -> Result<(), RlError> {
        let c = self.model.config();
        if c.use_v && c.image_size != env.image_size {
            return Err(RlError::Encoder(format!(
                "encoder expects {} px images, environment renders {} px",
                c.image_size, env.image_size
            )));
        }
        Ok(())
    }

    /// CLS latents of a batch of observations, nothing masked. The action
    /// input is the 48 joint angles at the head of the proprioception.
    pub fn features(&self, obs: &[&Observation]) -> Result<Array2<f64>, RlError> {
        let b = obs.len();
        let c = self.model.config();
        let images = if c.use_v {
            let s = c.image_size;
            let mut images = Array4::zeros((b, s, s, 3));
            for (i, o) in obs.iter().enumerate() {
                if o.image.width != s || o.image.height != s {
                    return Err(RlError::Encoder(format!("{}x{} image for a {s} px encoder", o.image.width, o.image.height)));
                }
                for (k, v) in o.image.data.iter().enumerate() {
                    images[[i, k / (3 * s), (k / 3) % s, k % 3]] = *v as f64 / 255.0;
                }
            }
            images
        } else {
            Array4::zeros((b, 0, 0, 3))
        };
        let tactile = Array2::from_shape_fn((b, 40), |(i, j)| obs[i].tactile[j] as f64);
        let actions = Array2::from_shape_fn((b, 48), |(i, j)| obs[i].proprio[j]);
        Ok(self.model.cls_features(&FrameBatch::observation(images, tactile, actions))?)
    }
}

/// What the policy network sees for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput {
    pub h_cls: Array1<f64>,
    pub phi_p: Array1<f64>,
}

impl PolicyInput {
    /// `h_cls` followed by `phi(P)`.
    pub fn concat(&self) -> Array1<f64> {
        self.h_cls.iter().chain(self.phi_p.iter()).copied().collect()
    }
}

pub fn featurize(
    encoder: &FrozenEncoder,
    net: &ActorCritic,
    norm: &RunningNorm,
    obs: &[&Observation],
) -> Result<Vec<PolicyInput>, RlError> {
    let h = encoder.features(obs)?;
    let phi = net.embed_proprio(&norm.normalize(&proprio_matrix(obs)));
    Ok((0..obs.len())
        .map(|i| PolicyInput { h_cls: h.row(i).to_owned(), phi_p: phi.row(i).to_owned() })
        .collect())
}

fn refs(obs: &[Observation]) -> Vec<&Observation> {
    obs.iter().collect()
}

pub(crate) fn proprio_matrix(obs: &[&Observation]) -> Array2<f64> {
    Array2::from_shape_fn((obs.len(), PROPRIO_DIM), |(i, j)| obs[i].proprio[j])
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: u8,
    pub env_steps: usize,
    /// Per-transition means of every reward component.
    pub reward: RewardBreakdown,
    /// Mean over environments of the last-ten success rate, once any episode ended.
    pub success_rate: Option<f64>,
    pub episodes: usize,
    /// Mean final cap angle of the episodes that ended this iteration.
    pub mean_cap_angle: Option<f64>,
    pub update: UpdateStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyHeader {
    ppo: PPOConfig,
    env: EnvConfig,
    norm: RunningNorm,
    iteration: usize,
    stage: u8,
    encoder_digest: String,
    feat_dim: usize,
    hidden: usize,
    encoder_bytes: usize,
    tensors: Vec<(String, Vec<usize>)>,
}

const MAGIC: &[u8; 8] = b"VTAOPOLC";
const VERSION: u32 = 1;

/// Policy weights with the frozen encoder and the configs they were trained under.
#[derive(Debug, Clone)]
pub struct PolicyCheckpoint {
    pub ppo: PPOConfig,
    pub env: EnvConfig,
    pub encoder: FrozenEncoder,
    pub net: ActorCritic,
    pub norm: RunningNorm,
    pub iteration: usize,
    pub stage: u8,
}

impl PolicyCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let enc = Checkpoint::new(self.encoder.model().clone(), 0).to_bytes();
        let header = PolicyHeader {
            ppo: self.ppo.clone(),
            env: self.env,
            norm: self.norm.clone(),
            iteration: self.iteration,
            stage: self.stage,
            encoder_digest: self.encoder.digest(),
            feat_dim: self.net.feat_dim,
            hidden: self.net.hidden,
            encoder_bytes: enc.len(),
            tensors: self.net.names().iter().zip(self.net.values()).map(|(n, v)| (n.clone(), v.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&enc);
        for v in self.net.values() {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RlError> {
        let bad = |m: &str| RlError::Checkpoint(m.into());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing policy header"));
        }
        if u32::from_le_bytes(bytes[8..12].try_into().unwrap()) != VERSION {
            return Err(bad("unsupported policy version"));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let h: PolicyHeader = serde_json::from_slice(body).map_err(|e| RlError::Checkpoint(e.to_string()))?;
        let mut at = 20 + len;
        let enc = bytes.get(at..at + h.encoder_bytes).ok_or_else(|| bad("truncated encoder"))?;
        let encoder = FrozenEncoder::new(Checkpoint::from_bytes(enc)?.model);
        if encoder.digest() != h.encoder_digest {
            return Err(bad("encoder digest mismatch"));
        }
        at += h.encoder_bytes;
        let mut values = Vec::new();
        for (name, shape) in &h.tensors {
            let n = shape.iter().product::<usize>();
            let raw = bytes.get(at..at + 8 * n).ok_or_else(|| RlError::Checkpoint(format!("truncated {name}")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            values.push(Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| RlError::Checkpoint(e.to_string()))?);
            at += 8 * n;
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let mut net = ActorCritic::new(h.feat_dim, h.hidden, 0.0, 0);
        net.set_values(values)?;
        Ok(PolicyCheckpoint { ppo: h.ppo, env: h.env, encoder, net, norm: h.norm, iteration: h.iteration, stage: h.stage })
    }

    pub fn save(&self, path: &Path) -> Result<(), RlError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RlError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyCheckpoint,
    pub log: Vec<LogRow>,
}

fn add_reward(acc: &mut [f64; 11], r: &RewardBreakdown) {
    for (a, v) in acc.iter_mut().zip(r.to_array()) {
        *a += v;
    }
}

fn reward_from(a: &[f64; 11]) -> RewardBreakdown {
    RewardBreakdown {
        r_hdis: a[0],
        r_fcon: a[1],
        r_cang: a[2],
        r_cvel: a[3],
        r_fdis: a[4],
        r_htdis: a[5],
        r_bdis: a[6],
        r_brot: a[7],
        r_left: a[8],
        r_right: a[9],
        total: a[10],
    }
}

/// Curriculum PPO: `stage1_iters` with the bottle fixed, then stage 2 with
/// the same policy. Environment `i` uses `bottles[i % len]`.
///
/// With `out`, the log is appended to `out/train_log.jsonl` every iteration
/// and checkpoints go to `out/checkpoints/`.
pub fn train_curriculum(
    encoder: &FrozenEncoder,
    bottles: &[BottleSpec],
    env_config: &EnvConfig,
    cfg: &PPOConfig,
    out: Option<&Path>,
    mut on_iter: impl FnMut(&LogRow),
) -> Result<TrainOutcome, RlError> {
    cfg.validate()?;
    encoder.check_env(env_config)?;
    if bottles.is_empty() {
        return Err(RlError::Config("no training bottles".into()));
    }
    let hands = Arc::new(Hands::default());
    let envs: Vec<Environment> = bottles
        .iter()
        .map(|b| Environment::with_hands(*b, *env_config, hands.clone()))
        .collect::<Result<_, _>>()?;
    let n = cfg.n_envs;
    let env_of = |i: usize| &envs[i % envs.len()];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = ActorCritic::new(encoder.dim(), cfg.hidden, cfg.init_log_std, rng.random());
    let mut opt = net.optimizer(cfg.lr);
    let mut policy = PolicyCheckpoint {
        ppo: cfg.clone(),
        env: *env_config,
        encoder: encoder.clone(),
        net,
        norm: RunningNorm::new(PROPRIO_DIM),
        iteration: 0,
        stage: 1,
    };
    let mut log_file: Option<File> = match out {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints"))?;
            Some(OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?)
        }
        None => None,
    };

    let mut stage = 1u8;
    let mut states: Vec<EnvState> = (0..n).map(|i| env_of(i).reset(stage, rng.random())).collect();
    let mut trackers = vec![SuccessTracker::new(); n];
    let observe = |states: &[EnvState]| -> Vec<Observation> {
        states.iter().enumerate().map(|(i, s)| env_of(i).observe(s)).collect()
    };
    let mut obs = observe(&states);
    let mut log = Vec::new();
    let mut env_steps = 0;
    let t_len = cfg.rollout;
    let d = encoder.dim();

    for it in 0..cfg.total_iters() {
        let wrap = |e: RlError| RlError::Iteration { iteration: it, source: Box::new(e) };
        let switch = stage == 1
            && (it >= cfg.stage1_iters
                || cfg.switch_on_success.is_some_and(|th| mean_success_rate(&trackers).is_some_and(|r| r >= th)));
        if switch {
            stage = 2;
            states = (0..n).map(|i| env_of(i).reset(stage, rng.random())).collect();
            trackers = vec![SuccessTracker::new(); n];
            obs = observe(&states);
        }

        let mut feats_all = Array2::zeros((t_len * n, d));
        let mut prop_raw = Array2::zeros((t_len * n, PROPRIO_DIM));
        let mut prop_all = Array2::zeros((t_len * n, PROPRIO_DIM));
        let mut actions_all = Array2::zeros((t_len * n, ACTION_DIM));
        let mut logp_all = Array1::zeros(t_len * n);
        let mut values = Array2::zeros((t_len, n));
        let mut rewards = Array2::zeros((t_len, n));
        let mut dones = Array2::from_elem((t_len, n), false);
        let mut comp = [0.0; 11];
        let mut finished = Vec::new();

        let mut feats = encoder.features(&refs(&obs)).map_err(wrap)?;
        for t in 0..t_len {
            let raw = proprio_matrix(&refs(&obs));
            let prop = policy.norm.normalize(&raw);
            let (a, logp, v) = policy.net.act(&feats, &prop, &mut rng);
            let rows = t * n..(t + 1) * n;
            feats_all.slice_mut(s![rows.clone(), ..]).assign(&feats);
            prop_raw.slice_mut(s![rows.clone(), ..]).assign(&raw);
            prop_all.slice_mut(s![rows.clone(), ..]).assign(&prop);
            actions_all.slice_mut(s![rows.clone(), ..]).assign(&a);
            logp_all.slice_mut(s![rows]).assign(&logp);
            values.row_mut(t).assign(&v);
            for i in 0..n {
                let env = env_of(i);
                debug_assert_eq!(states[i].stage, stage);
                let action = a.row(i).to_vec();
                let r = env.step(&states[i], &action).map_err(|e| wrap(e.into()))?;
                rewards[[t, i]] = r.reward.total;
                add_reward(&mut comp, &r.reward);
                if r.done {
                    dones[[t, i]] = true;
                    trackers[i].push(r.state.outcome == Some(Outcome::Success));
                    finished.push(r.state.cap_angle);
                    states[i] = env.reset(stage, rng.random());
                } else {
                    states[i] = r.state;
                }
            }
            env_steps += n;
            obs = observe(&states);
            feats = encoder.features(&refs(&obs)).map_err(wrap)?;
        }
        let (_, last_values) = policy.net.forward(&feats, &policy.norm.normalize(&proprio_matrix(&refs(&obs))));
        let (adv, ret) = gae(&rewards, &values, &dones, last_values.as_slice().unwrap(), cfg.gamma, cfg.lambda);
        let flat = |a: &Array2<f64>| Array1::from_iter(a.iter().copied());
        let rollout = Rollout {
            features: feats_all,
            proprio: prop_all,
            actions: actions_all,
            logp: logp_all,
            values: flat(&values),
            advantages: flat(&adv),
            returns: flat(&ret),
        };
        let update = policy.net.ppo_update(&mut opt, &rollout, cfg, rng.random()).map_err(wrap)?;
        policy.norm.update(&prop_raw);
        policy.iteration = it + 1;
        policy.stage = stage;

        let steps = (t_len * n) as f64;
        let row = LogRow {
            iteration: it,
            stage,
            env_steps,
            reward: reward_from(&comp.map(|c| c / steps)),
            success_rate: mean_success_rate(&trackers),
            episodes: finished.len(),
            mean_cap_angle: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
            update,
        };
        on_iter(&row);
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&row).expect("row serializes");
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                policy.save(&dir.join("checkpoints").join(format!("iter_{:05}.ckpt", it + 1)))?;
            }
        }
        log.push(row);
    }
    if let Some(dir) = out {
        policy.save(&dir.join("checkpoints").join("final.ckpt"))?;
    }
    Ok(TrainOutcome { policy, log })
}
