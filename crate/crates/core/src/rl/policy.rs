use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{PPOConfig, RlError};
use crate::env::{ACTION_DIM, PROPRIO_DIM};
use crate::model::autodiff::{Graph, Var};
use crate::model::{AdamW, AdamWConfig};

/// Width of the learned proprioception embedding.
pub const PHI_DIM: usize = 128;
const NORM_CLIP: f64 = 5.0;

/// Running mean and variance of proprioception, merged batch-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        RunningNorm { mean: vec![0.0; dim], var: vec![1.0; dim], count: 0.0 }
    }

    pub fn update(&mut self, batch: &Array2<f64>) {
        let n = batch.nrows() as f64;
        if n == 0.0 {
            return;
        }
        let bm = batch.mean_axis(Axis(0)).expect("rows");
        let bv = batch.var_axis(Axis(0), 0.0);
        let total = self.count + n;
        for j in 0..self.mean.len() {
            let delta = bm[j] - self.mean[j];
            let m2 = self.var[j] * self.count + bv[j] * n + delta * delta * self.count * n / total;
            self.mean[j] += delta * n / total;
            self.var[j] = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((*v - self.mean[j]) / (self.var[j] + 1e-8).sqrt()).clamp(-NORM_CLIP, NORM_CLIP);
            }
        }
        out
    }
}

/// Gaussian policy and value function over `{h_cls, phi(P)}`.
///
/// Both heads are two-layer tanh MLPs sharing the proprioception embedding;
/// the log standard deviation is a free per-dimension parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub feat_dim: usize,
    pub hidden: usize,
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

const PHI_W: usize = 0;
const PHI_B: usize = 1;
const PI_HEAD: usize = 2;
const V_HEAD: usize = 9;
const LOG_STD: usize = 16;

const NAMES: [&str; 17] = [
    "phi.w", "phi.b", "pi.0.wh", "pi.0.wp", "pi.0.b", "pi.1.w", "pi.1.b", "pi.2.w", "pi.2.b", "v.0.wh", "v.0.wp",
    "v.0.b", "v.1.w", "v.1.b", "v.2.w", "v.2.b", "log_std",
];

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    let a = gain * (6.0 / (rows + cols) as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| u.sample(rng))
}

fn log_prob(a: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    a.iter()
        .zip(mu)
        .zip(log_std)
        .map(|((a, m), s)| {
            let z = (a - m) / s.exp();
            -0.5 * z * z - s - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// PPO's per-sample objective `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv)
}

/// Flattened transitions of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub features: Array2<f64>,
    /// Normalized proprioception.
    pub proprio: Array2<f64>,
    pub actions: Array2<f64>,
    pub logp: Array1<f64>,
    pub values: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean of `(r - 1) - ln r`, a non-negative KL estimate.
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

struct Pass {
    g: Graph,
    vars: Vec<Var>,
    mu: Var,
    value: Var,
}

impl ActorCritic {
    pub fn new(feat_dim: usize, hidden: usize, init_log_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = hidden;
        let mut values = vec![
            xavier(&mut rng, PROPRIO_DIM, PHI_DIM, 1.0),
            Array2::zeros((1, PHI_DIM)),
        ];
        for out in [ACTION_DIM, 1] {
            // Small final policy layer so initial actions stay near zero.
            let gain = if out == ACTION_DIM { 0.01 } else { 1.0 };
            values.extend([
                xavier(&mut rng, feat_dim, h, 1.0),
                xavier(&mut rng, PHI_DIM, h, 1.0),
                Array2::zeros((1, h)),
                xavier(&mut rng, h, h, 1.0),
                Array2::zeros((1, h)),
                xavier(&mut rng, h, out, gain),
                Array2::zeros((1, out)),
            ]);
        }
        values.push(Array2::from_elem((1, ACTION_DIM), init_log_std));
        ActorCritic { feat_dim, hidden, names: NAMES.iter().map(|s| s.to_string()).collect(), values }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    /// Replaces every tensor, checking shapes.
    pub fn set_values(&mut self, values: Vec<Array2<f64>>) -> Result<(), RlError> {
        if values.len() != self.values.len() || values.iter().zip(&self.values).any(|(a, b)| a.dim() != b.dim()) {
            return Err(RlError::Checkpoint("policy tensor shapes do not match the config".into()));
        }
        self.values = values;
        Ok(())
    }

    pub fn log_std(&self) -> &[f64] {
        self.values[LOG_STD].as_slice().expect("contiguous")
    }

    fn head(&self, g: &mut Graph, vars: &[Var], h: Var, phi: Var, base: usize) -> Var {
        let a = g.matmul(h, vars[base]);
        let b = g.matmul(phi, vars[base + 1]);
        let x = g.add(a, b);
        let x = g.add_row(x, vars[base + 2]);
        let x = g.tanh(x);
        let x = g.matmul(x, vars[base + 3]);
        let x = g.add_row(x, vars[base + 4]);
        let x = g.tanh(x);
        let x = g.matmul(x, vars[base + 5]);
        g.add_row(x, vars[base + 6])
    }

    fn pass(&self, features: &Array2<f64>, proprio: &Array2<f64>, trainable: bool) -> Pass {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .values
            .iter()
            .map(|v| if trainable { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        let h = g.constant(features.clone());
        let p = g.constant(proprio.clone());
        let phi = g.matmul(p, vars[PHI_W]);
        let phi = g.add_row(phi, vars[PHI_B]);
        let mu = self.head(&mut g, &vars, h, phi, PI_HEAD);
        let value = self.head(&mut g, &vars, h, phi, V_HEAD);
        Pass { g, vars, mu, value }
    }

    /// `phi(P)` for normalized proprioception rows.
    pub fn embed_proprio(&self, proprio: &Array2<f64>) -> Array2<f64> {
        proprio.dot(&self.values[PHI_W]) + &self.values[PHI_B]
    }

    /// Action means and values.
    pub fn forward(&self, features: &Array2<f64>, proprio: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let p = self.pass(features, proprio, false);
        (p.g.value(p.mu).clone(), p.g.value(p.value).column(0).to_owned())
    }

    /// Samples actions; returns actions, their log-probabilities and values.
    pub fn act(
        &self,
        features: &Array2<f64>,
        proprio: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let (mu, values) = self.forward(features, proprio);
        let log_std = self.log_std();
        let mut actions = mu.clone();
        for mut row in actions.rows_mut() {
            for (j, a) in row.iter_mut().enumerate() {
                let eps: f64 = StandardNormal.sample(rng);
                *a += log_std[j].exp() * eps;
            }
        }
        let logp = Array1::from_iter((0..actions.nrows()).map(|i| {
            log_prob(actions.row(i).as_slice().unwrap(), mu.row(i).as_slice().unwrap(), log_std)
        }));
        (actions, logp, values)
    }

    /// Clipped-surrogate PPO with a clipped value loss over `epochs` shuffled passes.
    pub fn ppo_update(
        &mut self,
        opt: &mut AdamW,
        rollout: &Rollout,
        cfg: &PPOConfig,
        seed: u64,
    ) -> Result<UpdateStats, RlError> {
        let n = rollout.actions.nrows();
        let mean = rollout.advantages.mean().unwrap_or(0.0);
        let std = rollout.advantages.std(0.0);
        let adv = rollout.advantages.mapv(|a| (a - mean) / (std + 1e-8));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mb = n.div_ceil(cfg.minibatches);
        let decay = vec![false; self.values.len()];
        let mut stats = UpdateStats::default();
        let mut count = 0usize;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_kl = 0.0;
            let chunks = order.chunks(mb);
            let n_chunks = chunks.len() as f64;
            for idx in chunks {
                let s = self.minibatch(opt, rollout, &adv, idx, cfg, &decay)?;
                stats.policy_loss += s.policy_loss;
                stats.value_loss += s.value_loss;
                stats.entropy += s.entropy;
                stats.approx_kl += s.approx_kl;
                stats.clip_fraction += s.clip_fraction;
                stats.grad_norm += s.grad_norm;
                epoch_kl += s.approx_kl / n_chunks;
                count += 1;
            }
            if cfg.target_kl.is_some_and(|t| epoch_kl > 1.5 * t) {
                break;
            }
        }
        let k = count as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.approx_kl /= k;
        stats.clip_fraction /= k;
        stats.grad_norm /= k;
        Ok(stats)
    }

    fn minibatch(
        &mut self,
        opt: &mut AdamW,
        r: &Rollout,
        adv: &Array1<f64>,
        idx: &[usize],
        cfg: &PPOConfig,
        decay: &[bool],
    ) -> Result<UpdateStats, RlError> {
        let m = idx.len() as f64;
        let feats = r.features.select(Axis(0), idx);
        let prop = r.proprio.select(Axis(0), idx);
        let mut pass = self.pass(&feats, &prop, true);
        let mu = pass.g.value(pass.mu).clone();
        let v = pass.g.value(pass.value).column(0).to_owned();
        let log_std = self.log_std().to_vec();
        let sigma: Vec<f64> = log_std.iter().map(|s| s.exp()).collect();

        let mut g_mu = Array2::zeros(mu.dim());
        let mut g_v = Array2::zeros((idx.len(), 1));
        let mut g_s = Array2::from_elem((1, ACTION_DIM), -cfg.ent_coef);
        let mut stats = UpdateStats::default();
        for (k, &i) in idx.iter().enumerate() {
            let a = r.actions.row(i);
            let logp = log_prob(a.as_slice().unwrap(), mu.row(k).as_slice().unwrap(), &log_std);
            let ratio = (logp - r.logp[i]).exp();
            let av = adv[i];
            stats.policy_loss -= clipped_surrogate(ratio, av, cfg.clip) / m;
            stats.approx_kl += ((ratio - 1.0) - ratio.ln()) / m;
            if (ratio - 1.0).abs() > cfg.clip {
                stats.clip_fraction += 1.0 / m;
            }
            let unclipped = (av >= 0.0 && ratio <= 1.0 + cfg.clip) || (av < 0.0 && ratio >= 1.0 - cfg.clip);
            if unclipped {
                let dlogp = -ratio * av / m;
                for j in 0..ACTION_DIM {
                    let z = (a[j] - mu[[k, j]]) / sigma[j];
                    g_mu[[k, j]] = dlogp * z / sigma[j];
                    g_s[[0, j]] += dlogp * (z * z - 1.0);
                }
            }

            let (vo, ret) = (r.values[i], r.returns[i]);
            let vc = vo + (v[k] - vo).clamp(-cfg.clip, cfg.clip);
            let (lu, lc) = ((v[k] - ret).powi(2), (vc - ret).powi(2));
            stats.value_loss += 0.5 * lu.max(lc) / m;
            g_v[[k, 0]] = if lu >= lc {
                cfg.vf_coef * (v[k] - ret) / m
            } else if (v[k] - vo).abs() < cfg.clip {
                cfg.vf_coef * (vc - ret) / m
            } else {
                0.0
            };
        }
        stats.entropy = log_std.iter().map(|s| s + 0.5 * (2.0 * PI * std::f64::consts::E).ln()).sum();

        // Seed the tape with the analytic output gradients.
        let cm = pass.g.constant(g_mu);
        let cv = pass.g.constant(g_v);
        let a = pass.g.mul(pass.mu, cm);
        let a = pass.g.sum(a);
        let b = pass.g.mul(pass.value, cv);
        let b = pass.g.sum(b);
        let root = pass.g.add(a, b);
        let mut grads = pass.g.backward(root);
        let mut all: Vec<Array2<f64>> = pass
            .vars
            .iter()
            .zip(&self.values)
            .map(|(var, val)| grads.take(*var).unwrap_or_else(|| Array2::zeros(val.dim())))
            .collect();
        all[LOG_STD] = g_s;
        let norm = all.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            let bad: Vec<&str> = all
                .iter()
                .zip(&self.names)
                .filter(|(g, _)| g.iter().any(|x| !x.is_finite()))
                .map(|(_, n)| n.as_str())
                .collect();
            return Err(RlError::NonFinite(format!("tensors {bad:?}")));
        }
        stats.grad_norm = norm;
        if let Some(max) = cfg.max_grad_norm {
            if norm > max {
                for g in &mut all {
                    *g *= max / norm;
                }
            }
        }
        opt.step(&mut self.values, &all, decay);
        Ok(stats)
    }

    pub fn optimizer(&self, lr: f64) -> AdamW {
        AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..AdamWConfig::default() }, &self.values)
    }
}
