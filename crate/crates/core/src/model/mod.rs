//! The trajectory scorer: anchor and scene embeddings, transformer blocks
//! with sparse mixture-of-experts feed-forward layers, and per-metric
//! Gaussian score heads.

mod checkpoint;
mod moe;
mod scorer;
mod train;

pub use checkpoint::Checkpoint;
pub use moe::{
    balance_loss, route, top_k, FfnIds, MoeIds, MoeLayer, Routing, RoutingRecord,
};
pub use scorer::{
    anchor_features, composite, select_trajectory, ScoreOutput, Scorer, ScorerInput, SupervisedObjective,
    SELECTION_WEIGHTS,
};
pub use train::{
    evaluate_selection, supervised_loss, train_supervised, Adam, EpochLog, LabelledScene, SelectionReport,
    TrainConfig,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;
use crate::world::METRIC_NAMES;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("top-k must satisfy 1 <= k <= {experts}, got {k}")]
    TopK { k: usize, experts: usize },
    #[error("balance loss is undefined when every expert has zero importance")]
    ZeroImportance,
    #[error("oracle target {value} at anchor {anchor}, metric {metric} lies outside [0, 1]")]
    TargetRange { anchor: usize, metric: usize, value: f64 },
    #[error("vocabulary horizon {got} does not match the model horizon {expected}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("input shape mismatch: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Moe,
    Dense,
}

/// Training stage a checkpoint belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sup,
    Grpo,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Sup => "sup",
            Stage::Grpo => "grpo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Waypoints per anchor.
    pub horizon: usize,
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub ffn: FfnKind,
    /// With `ffn = moe`, block `b` uses a MoE layer iff `b % moe_every == 0`;
    /// the others use a dense layer.
    pub moe_every: usize,
    pub dense_hidden: usize,
    pub metrics: usize,
    pub sigma_min: f64,
    pub sigma_init: f64,
    pub w_bal: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (dim, experts, expert_hidden) = (64, 4, 128);
        Self {
            horizon: 8,
            blocks: 2,
            dim,
            heads: 4,
            experts,
            top_k: 2,
            expert_hidden,
            ffn: FfnKind::Moe,
            moe_every: 1,
            dense_hidden: matched_dense_hidden(dim, experts, expert_hidden),
            metrics: METRIC_NAMES.len(),
            sigma_min: 0.01,
            sigma_init: 0.1,
            w_bal: 0.01,
        }
    }
}

/// Hidden width of a dense feed-forward layer with (as nearly as possible)
/// the parameter count of a MoE layer with `experts` private experts, one
/// shared expert and a router.
pub fn matched_dense_hidden(dim: usize, experts: usize, expert_hidden: usize) -> usize {
    let ffn = 2 * dim * expert_hidden + expert_hidden + dim;
    let moe = (experts + 1) * ffn + dim * experts;
    let per_unit = 2 * dim + 1;
    ((moe - dim) as f64 / per_unit as f64).round() as usize
}

impl ModelConfig {
    /// The dense-FFN ablation of this config at the same parameter budget.
    pub fn dense_ablation(&self) -> ModelConfig {
        ModelConfig {
            ffn: FfnKind::Dense,
            dense_hidden: matched_dense_hidden(self.dim, self.experts, self.expert_hidden),
            ..self.clone()
        }
    }

    pub fn is_moe_block(&self, b: usize) -> bool {
        self.ffn == FfnKind::Moe && b.is_multiple_of(self.moe_every)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.horizon == 0 || self.blocks == 0 {
            return bad("horizon and blocks must be at least 1".into());
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.ffn == FfnKind::Moe {
            if self.experts < 2 || self.top_k == 0 || self.top_k >= self.experts {
                return bad(format!("need 1 <= top_k < experts, got top_k {} with {} experts", self.top_k, self.experts));
            }
            if self.expert_hidden == 0 || self.moe_every == 0 {
                return bad("expert_hidden and moe_every must be at least 1".into());
            }
        }
        if self.dense_hidden == 0 {
            return bad("dense_hidden must be at least 1".into());
        }
        if self.metrics != METRIC_NAMES.len() {
            return bad(format!("the world defines {} metrics, config has {}", METRIC_NAMES.len(), self.metrics));
        }
        if !(self.sigma_min > 0.0 && self.sigma_init > self.sigma_min) {
            return bad("need 0 < sigma_min < sigma_init".into());
        }
        if !(self.w_bal >= 0.0 && self.w_bal.is_finite()) {
            return bad("w_bal must be finite and non-negative".into());
        }
        Ok(())
    }
}
