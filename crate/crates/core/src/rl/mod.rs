//! PPO over frozen encoder features, the two-stage curriculum and evaluation.

mod eval;
mod gae;
mod policy;
mod train;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvError;
use crate::model::ModelError;

pub use eval::{
    evaluate, evaluate_split, Aggregate, Controller, EvalReport, EvalRow, OracleController, PolicyController,
    RandomController, ZeroController,
};
pub use gae::gae;
pub use policy::{clipped_surrogate, ActorCritic, Rollout, RunningNorm, UpdateStats, PHI_DIM};
pub use train::{
    featurize, train_curriculum, FrozenEncoder, LogRow, PolicyCheckpoint, PolicyInput,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid RL config: {0}")]
    Config(String),
    #[error("encoder does not fit the environment: {0}")]
    Encoder(String),
    #[error("non-finite gradient in PPO update: {0}")]
    NonFinite(String),
    #[error("iteration {iteration}: {source}")]
    Iteration { iteration: usize, source: Box<RlError> },
    #[error("bad policy checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PPOConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub lr: f64,
    /// Global gradient-norm bound per update; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Skips the remaining epochs of an update once an epoch's mean KL exceeds 1.5x this.
    pub target_kl: Option<f64>,
    pub n_envs: usize,
    pub rollout: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Switch to stage 2 early once the mean tracked success rate reaches this.
    pub switch_on_success: Option<f64>,
    pub hidden: usize,
    pub init_log_std: f64,
    /// Write a policy checkpoint every this many iterations (0 = final only).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 5,
            minibatches: 4,
            ent_coef: 0.0,
            vf_coef: 0.5,
            lr: 3e-4,
            max_grad_norm: Some(1.0),
            target_kl: None,
            n_envs: 16,
            rollout: 64,
            stage1_iters: 150,
            stage2_iters: 150,
            switch_on_success: None,
            hidden: 256,
            init_log_std: 0.0,
            checkpoint_every: 50,
            seed: 0,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.n_envs == 0 || self.rollout == 0 || self.epochs == 0 || self.minibatches == 0 || self.hidden == 0 {
            return bad("envs, rollout, epochs, minibatches and hidden must be positive");
        }
        if self.minibatches > self.n_envs * self.rollout {
            return bad("more minibatches than transitions");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.stage1_iters + self.stage2_iters
    }
}

/// Outcomes (1 success, 0 failure) of the last episodes of one environment.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SuccessTracker {
    outcomes: VecDeque<u8>,
}

impl SuccessTracker {
    pub const WINDOW: usize = 10;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, success: bool) {
        if self.outcomes.len() == Self::WINDOW {
            self.outcomes.pop_front();
        }
        self.outcomes.push_back(success as u8);
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    /// Mean of the buffered outcomes; `None` before the first episode ends.
    pub fn rate(&self) -> Option<f64> {
        if self.outcomes.is_empty() {
            None
        } else {
            Some(self.outcomes.iter().map(|&o| o as f64).sum::<f64>() / self.outcomes.len() as f64)
        }
    }
}

pub fn running_success_rate(tracker: &SuccessTracker) -> Option<f64> {
    tracker.rate()
}

/// Mean rate over the trackers that have seen an episode.
pub fn mean_success_rate(trackers: &[SuccessTracker]) -> Option<f64> {
    let rates: Vec<f64> = trackers.iter().filter_map(SuccessTracker::rate).collect();
    if rates.is_empty() {
        None
    } else {
        Some(rates.iter().sum::<f64>() / rates.len() as f64)
    }
}
