//! Supervised training of the scorer against oracle sub-scores.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scorer::{check_targets, supervised_loss_tape, ScorerInput};
use super::{select_trajectory, ModelError, Scorer, SELECTION_WEIGHTS};
use crate::numerics::{sigmoid, ParamStore, Tape, Tensor};
use crate::vocab::TrajectoryVocabulary;
use crate::world::{label_vocabulary, MetricVector, Scenario, METRIC_NAMES};

/// `Σ_m mean_k BCE(sigmoid(μ_km), y_km) + w_bal · Σ balance`.
pub fn supervised_loss(mu: &Tensor, targets: &Tensor, balance: &[f64], w_bal: f64) -> Result<f64, ModelError> {
    if mu.shape() != targets.shape() || mu.rank() != 2 {
        return Err(ModelError::Input(format!(
            "μ of shape {:?} against targets of shape {:?}",
            mu.shape(),
            targets.shape()
        )));
    }
    check_targets(targets)?;
    let mut tape = Tape::new();
    let m = tape.leaf(mu.clone());
    let bal: Vec<_> = balance.iter().map(|&b| tape.constant_scalar(b)).collect();
    let loss = supervised_loss_tape(&mut tape, m, targets, &bal, w_bal)?;
    Ok(tape.scalar_value(loss)?)
}

/// A scenario with model inputs and oracle labels for every anchor.
#[derive(Clone, Debug)]
pub struct LabelledScene {
    pub seed: u64,
    pub input: ScorerInput,
    /// `[K, M]` oracle sub-scores in metric order.
    pub targets: Tensor,
    pub metrics: Vec<MetricVector>,
}

impl LabelledScene {
    pub fn new(scenario: &Scenario, vocab: &TrajectoryVocabulary, anchors: &Tensor) -> Result<Self, ModelError> {
        let metrics = label_vocabulary(vocab, scenario)?;
        let targets = Tensor::new(
            vec![metrics.len(), METRIC_NAMES.len()],
            metrics.iter().flat_map(|m| m.to_array()).collect(),
        )?;
        Ok(Self {
            seed: scenario.seed,
            input: ScorerInput::new(scenario, anchors)?,
            targets,
            metrics,
        })
    }

    pub fn label_all(
        scenarios: &[Scenario],
        vocab: &TrajectoryVocabulary,
    ) -> Result<Vec<LabelledScene>, ModelError> {
        let anchors = super::anchor_features(vocab);
        scenarios.iter().map(|s| LabelledScene::new(s, vocab, &anchors)).collect()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update; `grads[i]` belongs to `ParamId(i)`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let data = params.get_mut(id).data_mut();
            for j in 0..data.len() {
                let g = grads[i][j];
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let mh = self.m[i][j] / c1;
                let vh = self.v[i][j] / c2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Scenarios per update.
    pub batch: usize,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
    /// Cosine decay of the step size from `lr` to zero over all updates.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 2e-3,
            batch: 4,
            seed: 0,
            cosine_decay: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean supervised loss over the epoch's training scenarios.
    pub loss: f64,
    /// Mean summed balance loss over the epoch's training scenarios.
    pub balance_loss: f64,
    /// Mean oracle aggregate of the selected anchor on the held-out split.
    pub heldout_aggregate: f64,
}

/// Loss and gradients of one scenario.
fn scene_gradients(scorer: &Scorer, scene: &LabelledScene) -> Result<(f64, f64, Vec<Vec<f64>>), ModelError> {
    let mut tape = Tape::new();
    let vars = scorer.params.register(&mut tape);
    let out = scorer.record(&mut tape, &vars, &scene.input)?;
    let loss = supervised_loss_tape(&mut tape, out.mu, &scene.targets, &out.balance, scorer.config().w_bal)?;
    let value = tape.scalar_value(loss)?;
    let balance: f64 = out.balance.iter().map(|&b| tape.value(b).data()[0]).sum();
    let grads = tape.backward(loss)?;
    let per_param = scorer
        .params
        .iter()
        .map(|(id, _, t)| grads.get(vars[id.0]).map(Tensor::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((value, balance, per_param))
}

/// Minibatch Adam on the supervised loss. Returns one log row per epoch.
pub fn train_supervised(
    scorer: &mut Scorer,
    train: &[LabelledScene],
    heldout: &[LabelledScene],
    config: &TrainConfig,
) -> Result<Vec<EpochLog>, ModelError> {
    if config.batch == 0 {
        return Err(ModelError::Config("batch must be at least 1".into()));
    }
    if !(config.lr > 0.0) {
        return Err(ModelError::Config("lr must be positive".into()));
    }
    let mut adam = Adam::new(config.lr, &scorer.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    let total_steps = (config.epochs * train.len().div_ceil(config.batch)).max(1);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut bal_sum) = (0.0, 0.0);
        for batch in order.chunks(config.batch) {
            let mut total: Vec<Vec<f64>> = scorer.params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
            for &i in batch {
                let (loss, bal, grads) = scene_gradients(scorer, &train[i])?;
                if !loss.is_finite() {
                    return Err(ModelError::Diverged(format!("non-finite loss at epoch {epoch}")));
                }
                loss_sum += loss;
                bal_sum += bal;
                for (t, g) in total.iter_mut().zip(&grads) {
                    for (a, b) in t.iter_mut().zip(g) {
                        *a += b / batch.len() as f64;
                    }
                }
            }
            if config.cosine_decay {
                adam.lr = 0.5 * config.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            }
            step += 1;
            adam.step(&mut scorer.params, &total);
        }
        let n = train.len().max(1) as f64;
        logs.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            balance_loss: bal_sum / n,
            heldout_aggregate: evaluate_selection(scorer, heldout)?.selected_aggregate,
        });
    }
    Ok(logs)
}

/// How well a scorer's selections and score predictions match the oracle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionReport {
    pub scenes: usize,
    /// Mean oracle aggregate of the selected anchor.
    pub selected_aggregate: f64,
    /// Mean oracle sub-scores of the selected anchor, in metric order.
    pub selected_metrics: [f64; 5],
    /// Mean over scenes, anchors and metrics of `|sigmoid(μ) − oracle|`.
    pub mean_abs_err: f64,
    /// Selected anchor per scene.
    pub selections: Vec<usize>,
}

pub fn evaluate_selection(scorer: &Scorer, scenes: &[LabelledScene]) -> Result<SelectionReport, ModelError> {
    let mut agg = 0.0;
    let mut metrics = [0.0; 5];
    let mut err = 0.0;
    let mut selections = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let out = scorer.score(&scene.input)?;
        let k = select_trajectory(&out.mu, SELECTION_WEIGHTS);
        selections.push(k);
        agg += scene.metrics[k].aggregate;
        for (acc, v) in metrics.iter_mut().zip(scene.metrics[k].to_array()) {
            *acc += v;
        }
        err += out
            .mu
            .data()
            .iter()
            .zip(scene.targets.data())
            .map(|(&m, &y)| (sigmoid(m) - y).abs())
            .sum::<f64>()
            / out.mu.len() as f64;
    }
    let n = scenes.len().max(1) as f64;
    Ok(SelectionReport {
        scenes: scenes.len(),
        selected_aggregate: agg / n,
        selected_metrics: metrics.map(|m| m / n),
        mean_abs_err: err / n,
        selections,
    })
}
