//! Group-relative policy optimisation of Gaussian score heads.
//!
//! A head predicts a Gaussian `N(μ, σ)` over a score. For each rollout a
//! group of scores is sampled from the pre-update policy, rewarded by their
//! distance to the oracle score, normalised within the group, and used in a
//! clipped importance-ratio surrogate with a KL penalty towards a frozen
//! reference policy. Samples are constants of the rollout; gradients flow
//! through the log-density only.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Checkpoint, LabelledScene, ModelError, Stage};
use crate::numerics::{sigmoid, NumericsError, ParamStore, Tape, Tensor, Var};

/// Bound on `|log ratio|` before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 20.0;
/// Largest tolerated fraction of clamped log ratios in one update.
pub const MAX_CLAMPED_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid GRPO config: {0}")]
    Config(String),
    #[error("unknown advantage mode {0:?} (expected per_sample or suffix_sum)")]
    UnknownMode(String),
    #[error("standard deviation {sigma} is below the minimum {sigma_min}")]
    SigmaTooSmall { sigma: f64, sigma_min: f64 },
    #[error("standard deviation {0} must be finite and non-negative")]
    InvalidSigma(f64),
    #[error("non-finite importance ratio at sample {index}")]
    NonFiniteRatio { index: usize },
    #[error("{clamped} of {total} log ratios hit the ±{LOG_RATIO_CLAMP} clamp")]
    RatioClamped { clamped: usize, total: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("checkpoint stage is \"{}\", expected \"{}\"", found.tag(), expected.tag())]
    Stage { found: Stage, expected: Stage },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `Adv_i = r̃_i`.
    PerSample,
    /// `Adv_i = Σ_{j: r̃_j ≥ r̃_i} r̃_j`.
    SuffixSum,
}

impl FromStr for AdvantageMode {
    type Err = GrpoError;

    fn from_str(s: &str) -> Result<Self, GrpoError> {
        match s {
            "per_sample" => Ok(AdvantageMode::PerSample),
            "suffix_sum" => Ok(AdvantageMode::SuffixSum),
            other => Err(GrpoError::UnknownMode(other.to_string())),
        }
    }
}

impl AdvantageMode {
    pub fn name(self) -> &'static str {
        match self {
            AdvantageMode::PerSample => "per_sample",
            AdvantageMode::SuffixSum => "suffix_sum",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    /// KL weight inside the surrogate objective.
    pub beta: f64,
    /// KL weight added to the loss.
    pub lambda: f64,
    pub sigma_min: f64,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub advantage_mode: AdvantageMode,
    /// Rollouts per iteration.
    pub minibatch: usize,
    /// Gradient steps taken on each iteration's rollouts before the sampling
    /// policy is refreshed.
    pub updates_per_rollout: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            clip_eps: 0.2,
            beta: 0.01,
            lambda: 0.01,
            sigma_min: 0.01,
            iterations: 200,
            lr: 1e-2,
            seed: 0,
            advantage_mode: AdvantageMode::PerSample,
            minibatch: 32,
            updates_per_rollout: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.lambda >= 0.0) {
            return bad("beta and lambda must be non-negative");
        }
        if !(self.sigma_min > 0.0) {
            return bad("sigma_min must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.minibatch == 0 || self.updates_per_rollout == 0 {
            return bad("minibatch and updates_per_rollout must be at least 1");
        }
        Ok(())
    }
}

/// `n` independent draws from `N(μ, σ²)`.
pub fn sample_group(mu: f64, sigma: f64, n: usize, seed: u64) -> Result<Vec<f64>, GrpoError> {
    sample_group_with(mu, sigma, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_group_with<R: Rng>(mu: f64, sigma: f64, n: usize, rng: &mut R) -> Result<Vec<f64>, GrpoError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(GrpoError::InvalidSigma(sigma));
    }
    Ok((0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            mu + sigma * z
        })
        .collect())
}

/// Rewards `r_i = −|s_i − s*|` and their group-normalised values. A group
/// whose rewards have population standard deviation below `1e-12`
/// normalises to zeros.
pub fn group_rewards(samples: &[f64], target: f64) -> (Vec<f64>, Vec<f64>) {
    let r: Vec<f64> = samples.iter().map(|s| -(s - target).abs()).collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let std = (r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let norm = if std < 1e-12 {
        vec![0.0; r.len()]
    } else {
        r.iter().map(|x| (x - mean) / std).collect()
    };
    (r, norm)
}

pub fn advantages(normalized: &[f64], mode: AdvantageMode) -> Vec<f64> {
    match mode {
        AdvantageMode::PerSample => normalized.to_vec(),
        AdvantageMode::SuffixSum => normalized
            .iter()
            .map(|&ri| normalized.iter().filter(|&&rj| rj >= ri).sum())
            .collect(),
    }
}

fn check_sigma(sigma: f64, sigma_min: f64) -> Result<(), GrpoError> {
    if !(sigma >= sigma_min) {
        return Err(GrpoError::SigmaTooSmall { sigma, sigma_min });
    }
    Ok(())
}

pub fn gaussian_log_prob(x: f64, mu: f64, sigma: f64, sigma_min: f64) -> Result<f64, GrpoError> {
    check_sigma(sigma, sigma_min)?;
    let z = (x - mu) / sigma;
    Ok(-sigma.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * z * z)
}

/// `0.5·[log σθ² − log σref² + (σref² + (μθ − μref)²)/σθ² − 1]`.
pub fn gaussian_kl(mu_t: f64, sigma_t: f64, mu_ref: f64, sigma_ref: f64, sigma_min: f64) -> Result<f64, GrpoError> {
    check_sigma(sigma_t, sigma_min)?;
    check_sigma(sigma_ref, sigma_min)?;
    let (vt, vr) = (sigma_t * sigma_t, sigma_ref * sigma_ref);
    let d = mu_t - mu_ref;
    Ok(0.5 * (vt.ln() - vr.ln() + (vr + d * d) / vt - 1.0))
}

/// One group: the sampling and reference policies, the samples, and their
/// rewards and advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRollout {
    pub mu_old: f64,
    pub sigma_old: f64,
    pub mu_ref: f64,
    pub sigma_ref: f64,
    pub samples: Vec<f64>,
    pub target: f64,
    pub rewards: Vec<f64>,
    pub normalized: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupRollout {
    /// Fills in rewards and advantages for given samples.
    pub fn from_samples(
        old: (f64, f64),
        reference: (f64, f64),
        samples: Vec<f64>,
        target: f64,
        mode: AdvantageMode,
    ) -> Self {
        let (rewards, normalized) = group_rewards(&samples, target);
        let advantages = advantages(&normalized, mode);
        Self {
            mu_old: old.0,
            sigma_old: old.1,
            mu_ref: reference.0,
            sigma_ref: reference.1,
            samples,
            target,
            rewards,
            normalized,
            advantages,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub mean_ratio: f64,
    /// Fraction of samples whose ratio lies outside `[1 − ε, 1 + ε]`.
    pub clip_fraction: f64,
    pub kl: f64,
    /// Log ratios that hit the clamp.
    pub clamped: usize,
}

/// `J = mean_i min(ρ_i·Adv_i, clip(ρ_i, 1−ε, 1+ε)·Adv_i) − β·KL(θ, ref)` for
/// one rollout under the policy `N(μθ, σθ)`.
pub fn grpo_objective(rollout: &GroupRollout, mu: f64, sigma: f64, config: &GrpoConfig) -> Result<(f64, Diagnostics), GrpoError> {
    let eps = config.clip_eps;
    let mut total = 0.0;
    let mut diag = Diagnostics::default();
    for (i, (&s, &adv)) in rollout.samples.iter().zip(&rollout.advantages).enumerate() {
        let lp = gaussian_log_prob(s, mu, sigma, config.sigma_min)?;
        let lp_old = gaussian_log_prob(s, rollout.mu_old, rollout.sigma_old, config.sigma_min)?;
        let mut log_ratio = lp - lp_old;
        if !log_ratio.is_finite() {
            return Err(GrpoError::NonFiniteRatio { index: i });
        }
        if log_ratio.abs() > LOG_RATIO_CLAMP {
            diag.clamped += 1;
            log_ratio = log_ratio.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
        }
        let ratio = log_ratio.exp();
        if !(ratio >= 1.0 - eps && ratio <= 1.0 + eps) {
            diag.clip_fraction += 1.0;
        }
        diag.mean_ratio += ratio;
        total += (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv);
    }
    let n = rollout.samples.len() as f64;
    diag.mean_ratio /= n;
    diag.clip_fraction /= n;
    diag.kl = gaussian_kl(mu, sigma, rollout.mu_ref, rollout.sigma_ref, config.sigma_min)?;
    Ok((total / n - config.beta * diag.kl, diag))
}

/// `L = −J + λ·KL`.
pub fn rl_loss(j: f64, kl: f64, lambda: f64) -> f64 {
    -j + lambda * kl
}

/// Tape handles of a batched GRPO objective.
pub struct RecordedObjective {
    /// Mean over rollouts of `J`.
    pub j: Var,
    /// Mean over rollouts of the KL to the reference.
    pub kl: Var,
    /// `−J + λ·KL`.
    pub loss: Var,
    pub diagnostics: Diagnostics,
}

/// Records the GRPO loss for a batch of rollouts; `mu` and `sigma` are `[R]`
/// policy parameters, one per rollout. Every rollout must have the same
/// group size.
pub fn record_objective(
    tape: &mut Tape,
    rollouts: &[GroupRollout],
    mu: Var,
    sigma: Var,
    config: &GrpoConfig,
) -> Result<RecordedObjective, GrpoError> {
    let r = rollouts.len();
    let n = rollouts.first().map_or(0, |g| g.samples.len());
    if r == 0 || n == 0 || rollouts.iter().any(|g| g.samples.len() != n) {
        return Err(GrpoError::Config("rollouts must be non-empty with equal group sizes".into()));
    }
    let sig = tape.value(sigma);
    if let Some(&bad) = sig.data().iter().find(|&&s| !(s >= config.sigma_min)) {
        return Err(GrpoError::SigmaTooSmall {
            sigma: bad,
            sigma_min: config.sigma_min,
        });
    }
    let expand: Vec<usize> = (0..r).flat_map(|g| std::iter::repeat_n(g, n)).collect();
    let mut samples = Vec::with_capacity(r * n);
    let mut adv = Vec::with_capacity(r * n);
    let mut lp_old = Vec::with_capacity(r * n);
    for g in rollouts {
        for (&s, &a) in g.samples.iter().zip(&g.advantages) {
            samples.push(s);
            adv.push(a);
            lp_old.push(gaussian_log_prob(s, g.mu_old, g.sigma_old, config.sigma_min)?);
        }
    }
    let s = tape.leaf(Tensor::vector(samples));
    let adv = tape.leaf(Tensor::vector(adv));
    let lp_old = tape.leaf(Tensor::vector(lp_old));

    // log N(s | μ, σ)
    let mu_x = tape.gather(mu, &expand)?;
    let sigma_x = tape.gather(sigma, &expand)?;
    let diff = tape.sub(s, mu_x)?;
    let z = tape.div(diff, sigma_x)?;
    let z2 = tape.mul(z, z)?;
    let half_z2 = tape.scale(z2, -0.5);
    let log_sigma = tape.log(sigma_x);
    let lp = tape.sub(half_z2, log_sigma)?;
    let lp = tape.add_scalar(lp, -0.5 * (2.0 * PI).ln());

    let log_ratio = tape.sub(lp, lp_old)?;
    let lr_vals = tape.value(log_ratio).to_vec();
    if let Some(i) = lr_vals.iter().position(|v| !v.is_finite()) {
        return Err(GrpoError::NonFiniteRatio { index: i });
    }
    let clamped = lr_vals.iter().filter(|v| v.abs() > LOG_RATIO_CLAMP).count();
    let log_ratio = tape.clamp(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    let ratio = tape.exp(log_ratio);
    let eps = config.clip_eps;
    let ratios = tape.value(ratio).to_vec();
    let f1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let f2 = tape.mul(clipped, adv)?;
    let surrogate = tape.minimum(f1, f2)?;
    let surrogate = tape.mean(surrogate);

    // KL(θ, ref) per rollout, as written: ½[log σθ² − log σr² + (σr² + Δμ²)/σθ² − 1]
    let mu_ref = tape.leaf(Tensor::vector(rollouts.iter().map(|g| g.mu_ref).collect()));
    let var_ref: Vec<f64> = rollouts.iter().map(|g| g.sigma_ref * g.sigma_ref).collect();
    let log_var_ref = tape.leaf(Tensor::vector(var_ref.iter().map(|v| v.ln()).collect()));
    let var_ref = tape.leaf(Tensor::vector(var_ref));
    let var_t = tape.mul(sigma, sigma)?;
    let log_var_t = tape.log(var_t);
    let dmu = tape.sub(mu, mu_ref)?;
    let dmu2 = tape.mul(dmu, dmu)?;
    let num = tape.add(var_ref, dmu2)?;
    let frac = tape.div(num, var_t)?;
    let kl = tape.sub(log_var_t, log_var_ref)?;
    let kl = tape.add(kl, frac)?;
    let kl = tape.add_scalar(kl, -1.0);
    let kl = tape.scale(kl, 0.5);
    let kl = tape.mean(kl);

    let beta_kl = tape.scale(kl, config.beta);
    let j = tape.sub(surrogate, beta_kl)?;
    let neg_j = tape.neg(j);
    let lambda_kl = tape.scale(kl, config.lambda);
    let loss = tape.add(neg_j, lambda_kl)?;

    let total = ratios.len() as f64;
    let diagnostics = Diagnostics {
        mean_ratio: ratios.iter().sum::<f64>() / total,
        clip_fraction: ratios.iter().filter(|&&q| !(q >= 1.0 - eps && q <= 1.0 + eps)).count() as f64 / total,
        kl: tape.scalar_value(kl)?,
        clamped,
    };
    Ok(RecordedObjective {
        j,
        kl,
        loss,
        diagnostics,
    })
}

/// A set of Gaussian score heads trained by [`finetune`]. Items are the
/// individual `(μ, σ)` predictions a rollout can be attached to.
pub trait HeadPolicy {
    fn item_count(&self) -> usize;

    /// Oracle score for an item.
    fn target(&self, item: usize) -> f64;

    /// Records `(μ, σ)` for `items` as `[R]` vectors; `vars` are the
    /// registered policy parameters.
    fn record(&self, tape: &mut Tape, vars: &[Var], items: &[usize]) -> Result<(Var, Var), GrpoError>;

    fn evaluate(&self, params: &ParamStore, items: &[usize]) -> Result<(Vec<f64>, Vec<f64>), GrpoError> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let (mu, sigma) = self.record(&mut tape, &vars, items)?;
        Ok((tape.value(mu).to_vec(), tape.value(sigma).to_vec()))
    }
}

/// A single scalar head: `μ` is a parameter and `σ = softplus(raw) + σ_min`.
pub struct ScalarHead {
    pub target: f64,
    pub sigma_min: f64,
}

impl ScalarHead {
    /// Parameters starting at `μ₀` and `σ₀`.
    pub fn params(&self, mu0: f64, sigma0: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.push("mu", Tensor::vector(vec![mu0]));
        p.push("sigma_raw", Tensor::vector(vec![(sigma0 - self.sigma_min).exp_m1().ln()]));
        p
    }
}

impl HeadPolicy for ScalarHead {
    fn item_count(&self) -> usize {
        1
    }

    fn target(&self, _: usize) -> f64 {
        self.target
    }

    fn record(&self, tape: &mut Tape, vars: &[Var], items: &[usize]) -> Result<(Var, Var), GrpoError> {
        let idx = vec![0; items.len()];
        let mu = tape.gather(vars[0], &idx)?;
        let raw = tape.gather(vars[1], &idx)?;
        let sp = tape.softplus(raw);
        Ok((mu, tape.add_scalar(sp, self.sigma_min)))
    }
}

/// The scorer's μ and σ heads on frozen fused features. The Gaussian mean
/// lives in score space: `μ = sigmoid(μ_logit)`.
pub struct ModelHeads {
    /// `[K, dim]` per scene.
    features: Vec<Tensor>,
    /// `[K, M]` oracle scores per scene.
    targets: Vec<Tensor>,
    metrics: usize,
    sigma_min: f64,
}

impl ModelHeads {
    pub fn new(features: Vec<Tensor>, targets: Vec<Tensor>, metrics: usize, sigma_min: f64) -> Result<Self, GrpoError> {
        if features.len() != targets.len() || features.iter().zip(&targets).any(|(f, t)| f.rows() != t.rows() || t.cols() != metrics) {
            return Err(GrpoError::Config("features and targets disagree in shape".into()));
        }
        Ok(Self {
            features,
            targets,
            metrics,
            sigma_min,
        })
    }

    fn locate(&self, mut item: usize) -> (usize, usize, usize) {
        let m = self.metrics;
        for (s, t) in self.targets.iter().enumerate() {
            let n = t.rows() * m;
            if item < n {
                return (s, item / m, item % m);
            }
            item -= n;
        }
        panic!("item out of range")
    }

    /// Head parameter store from a scorer, in `[mu.w, mu.b, sigma.w, sigma.b]`
    /// order.
    pub fn params_from(scorer: &crate::model::Scorer) -> ParamStore {
        let mut p = ParamStore::new();
        for id in scorer.head_ids() {
            p.push(scorer.params.name(id), scorer.params.get(id).clone());
        }
        p
    }
}

impl HeadPolicy for ModelHeads {
    fn item_count(&self) -> usize {
        self.targets.iter().map(|t| t.len()).sum()
    }

    fn target(&self, item: usize) -> f64 {
        let (s, k, m) = self.locate(item);
        self.targets[s].row(k)[m]
    }

    fn record(&self, tape: &mut Tape, vars: &[Var], items: &[usize]) -> Result<(Var, Var), GrpoError> {
        let dim = self.features[0].cols();
        let mut rows = Vec::with_capacity(items.len() * dim);
        let mut pick = Vec::with_capacity(items.len());
        for (r, &item) in items.iter().enumerate() {
            let (s, k, m) = self.locate(item);
            rows.extend_from_slice(self.features[s].row(k));
            pick.push(r * self.metrics + m);
        }
        let f = tape.leaf(Tensor::new(vec![items.len(), dim], rows).map_err(GrpoError::Numerics)?);
        let logits = tape.matmul(f, vars[0])?;
        let logits = tape.add(logits, vars[1])?;
        let logits = tape.gather(logits, &pick)?;
        let mu = tape.sigmoid(logits);
        let raw = tape.matmul(f, vars[2])?;
        let raw = tape.add(raw, vars[3])?;
        let raw = tape.gather(raw, &pick)?;
        let sp = tape.softplus(raw);
        Ok((mu, tape.add_scalar(sp, self.sigma_min)))
    }
}

/// One row of the fine-tuning log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrpoLog {
    pub iteration: usize,
    pub loss: f64,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "KL")]
    pub kl: f64,
    pub clip_fraction: f64,
    /// Mean `|μ − s*|` over the iteration's rollouts, before the update.
    pub mean_abs_err: f64,
}

/// Runs GRPO on `params` in place. The reference policy is `params` as
/// passed in; the sampling policy is refreshed at the start of every
/// iteration.
pub fn finetune<P: HeadPolicy>(policy: &P, params: &mut ParamStore, config: &GrpoConfig) -> Result<Vec<GrpoLog>, GrpoError> {
    config.validate()?;
    let reference = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut logs = Vec::with_capacity(config.iterations);
    let items_total = policy.item_count();
    if items_total == 0 {
        return Ok(logs);
    }
    for iteration in 1..=config.iterations {
        let items: Vec<usize> = (0..config.minibatch).map(|_| rng.random_range(0..items_total)).collect();
        let (mu_old, sigma_old) = policy.evaluate(params, &items)?;
        let (mu_ref, sigma_ref) = policy.evaluate(&reference, &items)?;
        let mut rollouts = Vec::with_capacity(items.len());
        let mut abs_err = 0.0;
        for (r, &item) in items.iter().enumerate() {
            let target = policy.target(item);
            abs_err += (mu_old[r] - target).abs();
            let samples = sample_group_with(mu_old[r], sigma_old[r], config.group_size, &mut rng)?;
            rollouts.push(GroupRollout::from_samples(
                (mu_old[r], sigma_old[r]),
                (mu_ref[r], sigma_ref[r]),
                samples,
                target,
                config.advantage_mode,
            ));
        }
        let mut first: Option<(f64, f64, f64, f64)> = None;
        for _ in 0..config.updates_per_rollout {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let (mu, sigma) = policy.record(&mut tape, &vars, &items)?;
            let obj = record_objective(&mut tape, &rollouts, mu, sigma, config)?;
            let total = rollouts.len() * config.group_size;
            if obj.diagnostics.clamped as f64 > MAX_CLAMPED_FRACTION * total as f64 {
                return Err(GrpoError::RatioClamped {
                    clamped: obj.diagnostics.clamped,
                    total,
                });
            }
            let loss = tape.scalar_value(obj.loss)?;
            if !loss.is_finite() {
                return Err(GrpoError::NonFinite("loss"));
            }
            first.get_or_insert((loss, tape.scalar_value(obj.j)?, obj.diagnostics.kl, obj.diagnostics.clip_fraction));
            let grads = tape.backward(obj.loss)?;
            for id in params.ids().collect::<Vec<_>>() {
                let Some(g) = grads.get(vars[id.0]) else { continue };
                let g = g.to_vec();
                for (p, gi) in params.get_mut(id).data_mut().iter_mut().zip(g) {
                    *p -= config.lr * gi;
                }
            }
            if params.iter().any(|(_, _, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(GrpoError::NonFinite("parameters"));
            }
        }
        let (loss, j, kl, clip_fraction) = first.expect("at least one update");
        logs.push(GrpoLog {
            iteration,
            loss,
            j,
            kl,
            clip_fraction,
            mean_abs_err: abs_err / items.len() as f64,
        });
    }
    Ok(logs)
}

/// Fine-tunes the score heads of a supervised checkpoint on labelled scenes.
/// Everything outside the heads is left untouched.
pub fn finetune_checkpoint(
    checkpoint: &Checkpoint,
    scenes: &[LabelledScene],
    config: &GrpoConfig,
) -> Result<(Checkpoint, Vec<GrpoLog>), GrpoError> {
    if checkpoint.stage != Stage::Sup {
        return Err(GrpoError::Stage {
            found: checkpoint.stage,
            expected: Stage::Sup,
        });
    }
    config.validate()?;
    let scorer = &checkpoint.scorer;
    let features = scenes
        .iter()
        .map(|s| scorer.fused_features(&s.input))
        .collect::<Result<Vec<_>, _>>()?;
    let targets = scenes.iter().map(|s| s.targets.clone()).collect();
    let policy = ModelHeads::new(features, targets, scorer.config().metrics, scorer.config().sigma_min.max(config.sigma_min))?;
    let mut heads = ModelHeads::params_from(scorer);
    let logs = finetune(&policy, &mut heads, config)?;
    let mut tuned = scorer.clone();
    for (i, id) in scorer.head_ids().into_iter().enumerate() {
        tuned.params.set(id, heads.get(crate::numerics::ParamId(i)).clone())?;
    }
    let out = Checkpoint::new(Stage::Grpo, checkpoint.seed, checkpoint.vocabulary.clone(), tuned)?;
    Ok((out, logs))
}

pub fn write_log_csv<W: std::io::Write>(w: W, logs: &[GrpoLog]) -> Result<(), GrpoError> {
    let mut csv = csv::Writer::from_writer(w);
    for row in logs {
        csv.serialize(row)?;
    }
    csv.flush().map_err(|e| GrpoError::Csv(e.into()))?;
    Ok(())
}

/// Score-space mean of a logit, the μ a model head feeds to the Gaussian.
pub fn score_mean(logit: f64) -> f64 {
    sigmoid(logit)
}
