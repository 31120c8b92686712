//! Masked visual-tactile-action-object transformer and its pretraining loop.

pub mod autodiff;
mod config;
mod mask;
mod net;
mod train;

use thiserror::Error;

pub use config::{
    configure_ablation, configure_ablation_from, ActionGranularity, HandSet, LossWeights, MaskRatios, ModelConfig,
    TokenLayout, ABLATION_NAMES,
};
pub use mask::{masked_count, sample_mask, MaskPlan};
pub use net::{FrameBatch, Latents, LossReport, Params, Reconstruction, TokenBatch, VtaoModel};
pub use train::{pretrain, AdamW, AdamWConfig, Checkpoint, HistoryEntry, PretrainConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("mask plan does not match the token layout: {0}")]
    Plan(String),
    #[error("{what}: expected {expected}, got {got}")]
    Dimension { what: String, expected: String, got: String },
    #[error("non-finite loss at step {step}: {report}")]
    NonFinite { step: usize, report: LossReport },
    #[error("training diverged at step {step} ({report}); last good checkpoint is from step {}", last_good.step)]
    Diverged { step: usize, report: LossReport, last_good: Box<Checkpoint> },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn dim_err(what: &str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> ModelError {
    ModelError::Dimension { what: what.into(), expected: format!("{expected:?}"), got: format!("{got:?}") }
}
