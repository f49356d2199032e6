//! Flat `section.key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid config. Parsing reports all bad lines at once.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::grpo::{AdvantageMode, GrpoConfig};
use crate::model::{matched_dense_hidden, FfnKind, ModelConfig, TrainConfig};
use crate::vocab::KinematicParams;

/// Environment variable that replaces the training seeds.
pub const SEED_ENV: &str = "TRAJMOE_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSection {
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VocabSection {
    pub k: usize,
    pub iters: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldSection,
    pub vocab: VocabSection,
    pub model: ModelConfig,
    /// Parameter initialisation seed.
    pub model_seed: u64,
    pub train: TrainConfig,
    /// Fraction of the training data held out for per-epoch selection quality.
    pub heldout_fraction: f64,
    pub grpo: GrpoConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldSection { seed: 1, count: 200 },
            vocab: VocabSection {
                k: 256,
                iters: 50,
                samples: 4000,
                seed: 7,
            },
            model: ModelConfig::default(),
            model_seed: 3,
            train: TrainConfig::default(),
            heldout_fraction: 0.1,
            grpo: GrpoConfig::default(),
            eval: EvalSection { seed: 2, count: 200 },
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

fn parse_ffn(value: &str) -> Result<FfnKind, String> {
    match value {
        "moe" => Ok(FfnKind::Moe),
        "dense" => Ok(FfnKind::Dense),
        _ => Err(format!("expected moe or dense, got {value:?}")),
    }
}

impl RunConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, Vec<String>> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {}: expected key = value", n + 1));
                continue;
            };
            if let Err(e) = cfg.set(key.trim(), value.trim()) {
                errors.push(format!("line {}: {}: {e}", n + 1, key.trim()));
            }
        }
        if errors.is_empty() {
            if let Err(e) = cfg.validate() {
                errors.extend(e);
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    /// Sets one key; an error for unknown keys and unparsable values.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let g = &mut self.grpo;
        match key {
            "world.seed" => self.world.seed = parse(v)?,
            "world.count" => self.world.count = parse(v)?,
            "vocab.k" => self.vocab.k = parse(v)?,
            "vocab.iters" => self.vocab.iters = parse(v)?,
            "vocab.samples" => self.vocab.samples = parse(v)?,
            "vocab.seed" => self.vocab.seed = parse(v)?,
            "model.horizon" => m.horizon = parse(v)?,
            "model.blocks" => m.blocks = parse(v)?,
            "model.dim" => m.dim = parse(v)?,
            "model.heads" => m.heads = parse(v)?,
            "model.experts" => m.experts = parse(v)?,
            "model.top_k" => m.top_k = parse(v)?,
            "model.expert_hidden" => m.expert_hidden = parse(v)?,
            "model.ffn" => m.ffn = parse_ffn(v)?,
            "model.moe_every" => m.moe_every = parse(v)?,
            "model.w_bal" => m.w_bal = parse(v)?,
            "model.sigma_min" => m.sigma_min = parse(v)?,
            "model.sigma_init" => m.sigma_init = parse(v)?,
            "model.seed" => self.model_seed = parse(v)?,
            "train.epochs" => self.train.epochs = parse(v)?,
            "train.lr" => self.train.lr = parse(v)?,
            "train.batch" => self.train.batch = parse(v)?,
            "train.seed" => self.train.seed = parse(v)?,
            "train.cosine_decay" => self.train.cosine_decay = parse_bool(v)?,
            "train.heldout_fraction" => self.heldout_fraction = parse(v)?,
            "grpo.group_size" => g.group_size = parse(v)?,
            "grpo.clip_eps" => g.clip_eps = parse(v)?,
            "grpo.beta" => g.beta = parse(v)?,
            "grpo.lambda" => g.lambda = parse(v)?,
            "grpo.sigma_min" => g.sigma_min = parse(v)?,
            "grpo.iterations" => g.iterations = parse(v)?,
            "grpo.lr" => g.lr = parse(v)?,
            "grpo.seed" => g.seed = parse(v)?,
            "grpo.advantage_mode" => g.advantage_mode = AdvantageMode::from_str(v).map_err(|e| e.to_string())?,
            "grpo.minibatch" => g.minibatch = parse(v)?,
            "grpo.updates_per_rollout" => g.updates_per_rollout = parse(v)?,
            "eval.seed" => self.eval.seed = parse(v)?,
            "eval.count" => self.eval.count = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        if matches!(key, "model.dim" | "model.experts" | "model.expert_hidden") {
            m.dense_hidden = matched_dense_hidden(m.dim, m.experts, m.expert_hidden);
        }
        Ok(())
    }

    /// Replaces the model, training and GRPO seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.model_seed = seed;
        self.train.seed = seed;
        self.grpo.seed = seed;
    }

    /// Applies `TRAJMOE_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<(), String> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v.trim().parse().map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
                self.override_seed(seed);
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(format!("{SEED_ENV}: {e}")),
        }
    }

    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errors = Vec::new();
        if let Err(e) = self.model.validate() {
            errors.push(e.to_string());
        }
        if let Err(e) = self.grpo.validate() {
            errors.push(e.to_string());
        }
        if self.vocab.k < 2 || self.vocab.iters == 0 || self.vocab.samples < self.vocab.k {
            errors.push("vocab needs k >= 2, iters >= 1 and samples >= k".into());
        }
        if self.model.horizon != KinematicParams::default().horizon {
            errors.push(format!(
                "model.horizon {} differs from the sampler horizon {}",
                self.model.horizon,
                KinematicParams::default().horizon
            ));
        }
        if self.train.batch == 0 || !(self.train.lr > 0.0) {
            errors.push("train needs batch >= 1 and lr > 0".into());
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            errors.push("train.heldout_fraction must lie in [0, 1)".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn render(&self) -> String {
        let m = &self.model;
        let g = &self.grpo;
        let ffn = match m.ffn {
            FfnKind::Moe => "moe",
            FfnKind::Dense => "dense",
        };
        let rows: Vec<(&str, String)> = vec![
            ("world.seed", self.world.seed.to_string()),
            ("world.count", self.world.count.to_string()),
            ("vocab.k", self.vocab.k.to_string()),
            ("vocab.iters", self.vocab.iters.to_string()),
            ("vocab.samples", self.vocab.samples.to_string()),
            ("vocab.seed", self.vocab.seed.to_string()),
            ("model.horizon", m.horizon.to_string()),
            ("model.blocks", m.blocks.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.experts", m.experts.to_string()),
            ("model.top_k", m.top_k.to_string()),
            ("model.expert_hidden", m.expert_hidden.to_string()),
            ("model.ffn", ffn.to_string()),
            ("model.moe_every", m.moe_every.to_string()),
            ("model.w_bal", m.w_bal.to_string()),
            ("model.sigma_min", m.sigma_min.to_string()),
            ("model.sigma_init", m.sigma_init.to_string()),
            ("model.seed", self.model_seed.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.batch", self.train.batch.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.cosine_decay", self.train.cosine_decay.to_string()),
            ("train.heldout_fraction", self.heldout_fraction.to_string()),
            ("grpo.group_size", g.group_size.to_string()),
            ("grpo.clip_eps", g.clip_eps.to_string()),
            ("grpo.beta", g.beta.to_string()),
            ("grpo.lambda", g.lambda.to_string()),
            ("grpo.sigma_min", g.sigma_min.to_string()),
            ("grpo.iterations", g.iterations.to_string()),
            ("grpo.lr", g.lr.to_string()),
            ("grpo.seed", g.seed.to_string()),
            ("grpo.advantage_mode", g.advantage_mode.name().to_string()),
            ("grpo.minibatch", g.minibatch.to_string()),
            ("grpo.updates_per_rollout", g.updates_per_rollout.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            ("eval.count", self.eval.count.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
