//! The transformer scorer over vocabulary anchors.
//!
//! Anchors are a set: they get no positional encoding, so permuting the
//! vocabulary permutes the scores. Each block is pre-norm self-attention over
//! anchor tokens, cross-attention from anchors to scene tokens, and a
//! feed-forward layer (sparse MoE or dense), each with a residual connection.
//!
//! The forward pass is a fixed sequence of steps. [`SupervisedObjective`]
//! snapshots the activations between steps so that a gradient check can
//! resume from the first step that reads a perturbed parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::moe::{balance_tape, ffn_tape, init_ffn, init_moe, moe_tape, normal_tensor, FfnIds, MoeIds, RoutingRecord};
use super::{ModelConfig, ModelError};
use crate::numerics::{sigmoid, Evaluation, NumericsError, Objective, ParamId, ParamStore, Tape, Tensor, Var};
use crate::vocab::TrajectoryVocabulary;
use crate::world::{scene_features, Scenario, SCENE_DIM, SCENE_TOKENS};

const LN_EPS: f64 = 1e-5;
/// Additive attention bias that removes padding scene tokens.
const MASK_BIAS: f64 = -1e9;
/// Anchor waypoint coordinates are divided by this before embedding.
const POSITION_SCALE: f64 = 20.0;

/// Weights of `(ep, ttc, hc)` in the selection composite.
pub const SELECTION_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];

#[derive(Clone, Debug, PartialEq)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
enum FfnBlock {
    Moe(MoeIds),
    Dense(FfnIds),
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    self_attn: AttnIds,
    cross_attn: AttnIds,
    ffn: FfnBlock,
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    scene_w: ParamId,
    scene_b: ParamId,
    traj_w: ParamId,
    traj_b: ParamId,
    blocks: Vec<BlockIds>,
    mu_w: ParamId,
    mu_b: ParamId,
    sigma_w: ParamId,
    sigma_b: ParamId,
}

/// One step of the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    SceneEmbed,
    SceneKv(usize),
    TrajEmbed,
    SelfAttn(usize),
    CrossAttn(usize),
    Ffn(usize),
    Head,
}

fn steps(blocks: usize) -> Vec<Step> {
    let mut out = vec![Step::SceneEmbed];
    out.extend((0..blocks).map(Step::SceneKv));
    out.push(Step::TrajEmbed);
    for b in 0..blocks {
        out.extend([Step::SelfAttn(b), Step::CrossAttn(b), Step::Ffn(b)]);
    }
    out.push(Step::Head);
    out
}

/// Everything about a scorer except its parameter values.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    config: ModelConfig,
    ids: Ids,
    steps: Vec<Step>,
    /// Index into `steps` of the first step reading each parameter.
    first_step: Vec<usize>,
}

/// Model inputs for one scenario.
#[derive(Clone, Debug)]
pub struct ScorerInput {
    /// `[SCENE_TOKENS, SCENE_DIM]`.
    pub scene: Tensor,
    /// `[SCENE_TOKENS]`, 0 for real tokens and a large negative bias for
    /// padding.
    pub mask: Tensor,
    /// `[K, 3·T]` from [`anchor_features`].
    pub anchors: Tensor,
}

/// Flattened `(x/20, y/20, heading)` per waypoint, one row per anchor.
pub fn anchor_features(vocab: &TrajectoryVocabulary) -> Tensor {
    let data: Vec<f64> = vocab
        .anchors
        .iter()
        .flat_map(|a| {
            a.poses()
                .iter()
                .flat_map(|p| [p.x / POSITION_SCALE, p.y / POSITION_SCALE, p.heading])
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(vec![vocab.k(), 3 * vocab.horizon], data).expect("finite anchors")
}

impl ScorerInput {
    pub fn new(scenario: &Scenario, anchors: &Tensor) -> Result<Self, ModelError> {
        let scene = Tensor::new(vec![SCENE_TOKENS, SCENE_DIM], scene_features(scenario)?)?;
        Ok(Self::from_parts(scene, anchors.clone()))
    }

    pub fn from_parts(scene: Tensor, anchors: Tensor) -> Self {
        let mask = (0..scene.rows())
            .map(|r| if scene.row(r)[0] == 1.0 { 0.0 } else { MASK_BIAS })
            .collect();
        Self {
            scene,
            mask: Tensor::vector(mask),
            anchors,
        }
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.rows()
    }
}

/// Scores for every anchor.
#[derive(Clone, Debug)]
pub struct ScoreOutput {
    /// `[K, M]` score logits.
    pub mu: Tensor,
    /// `[K, M]`, at least `sigma_min`.
    pub sigma: Tensor,
    /// One record per MoE layer, in block order.
    pub routing: Vec<RoutingRecord>,
    /// Balance loss of each MoE layer.
    pub balance: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Scorer {
    pub params: ParamStore,
    layout: Layout,
}

impl Scorer {
    /// Seeded initialisation. Weights are Gaussian with standard deviation
    /// `1/sqrt(fan_in)`, biases zero, and the σ heads start at exactly
    /// `sigma_init` for every input.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.dim;
        let m = config.metrics;
        let w = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, rows: usize, cols: usize| {
            p.push(name, normal_tensor(rng, &[rows, cols], 1.0 / (rows as f64).sqrt()))
        };
        let scene_w = w(&mut p, &mut rng, "scene_embed.w".into(), SCENE_DIM, d);
        let scene_b = p.push("scene_embed.b", Tensor::zeros(&[d]));
        let traj_w = w(&mut p, &mut rng, "traj_embed.w".into(), 3 * config.horizon, d);
        let traj_b = p.push("traj_embed.b", Tensor::zeros(&[d]));
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let attn = |p: &mut ParamStore, rng: &mut ChaCha8Rng, kind: &str| AttnIds {
                wq: w(p, rng, format!("block{b}.{kind}.wq"), d, d),
                wk: w(p, rng, format!("block{b}.{kind}.wk"), d, d),
                wv: w(p, rng, format!("block{b}.{kind}.wv"), d, d),
                wo: w(p, rng, format!("block{b}.{kind}.wo"), d, d),
            };
            let self_attn = attn(&mut p, &mut rng, "self_attn");
            let cross_attn = attn(&mut p, &mut rng, "cross_attn");
            let ffn = if config.is_moe_block(b) {
                FfnBlock::Moe(init_moe(&mut p, &mut rng, &format!("block{b}.moe"), d, config.expert_hidden, config.experts))
            } else {
                FfnBlock::Dense(init_ffn(&mut p, &mut rng, &format!("block{b}.ffn"), d, config.dense_hidden))
            };
            blocks.push(BlockIds {
                self_attn,
                cross_attn,
                ffn,
            });
        }
        let mu_w = p.push("head.mu.w", normal_tensor(&mut rng, &[d, m], 0.1 / (d as f64).sqrt()));
        let mu_b = p.push("head.mu.b", Tensor::zeros(&[m]));
        let sigma_w = p.push("head.sigma.w", Tensor::zeros(&[d, m]));
        let raw = inverse_softplus(config.sigma_init - config.sigma_min);
        let sigma_b = p.push("head.sigma.b", Tensor::full(&[m], raw));
        let ids = Ids {
            scene_w,
            scene_b,
            traj_w,
            traj_b,
            blocks,
            mu_w,
            mu_b,
            sigma_w,
            sigma_b,
        };
        let layout = Layout::new(config.clone(), ids, p.len());
        Ok(Self { params: p, layout })
    }

    /// Rebuilds a scorer from named parameters, checking that names and
    /// shapes match the layout `config` implies.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut scorer = Scorer::init(config, 0)?;
        if named.len() != scorer.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                scorer.params.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let id = scorer
                .params
                .find(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter {name}")))?;
            scorer
                .params
                .set(id, tensor)
                .map_err(|e| ModelError::Checkpoint(format!("parameter {name}: {e}")))?;
        }
        Ok(scorer)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    /// Parameters of the μ and σ score heads.
    pub fn head_ids(&self) -> [ParamId; 4] {
        let ids = &self.layout.ids;
        [ids.mu_w, ids.mu_b, ids.sigma_w, ids.sigma_b]
    }

    /// Parameters of the private experts of MoE block `block`, by expert.
    pub fn expert_ids(&self, block: usize) -> Option<Vec<Vec<ParamId>>> {
        match &self.layout.ids.blocks.get(block)?.ffn {
            FfnBlock::Moe(m) => Some(m.experts.iter().map(|e| e.ids().to_vec()).collect()),
            FfnBlock::Dense(_) => None,
        }
    }

    pub fn check_vocabulary(&self, vocab: &TrajectoryVocabulary) -> Result<(), ModelError> {
        if vocab.horizon != self.config().horizon {
            return Err(ModelError::HorizonMismatch {
                expected: self.config().horizon,
                got: vocab.horizon,
            });
        }
        Ok(())
    }

    /// Per-anchor, per-metric `(μ, σ)` plus routing records.
    pub fn score(&self, input: &ScorerInput) -> Result<ScoreOutput, ModelError> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let mut live = Live::start(&mut tape, input, self.layout.config.blocks);
        self.layout.run(&mut tape, &vars, &mut live, 0, None, None)?;
        live.finish(&tape)
    }

    /// Records the forward pass on `tape`; `vars` are the registered
    /// parameters.
    pub(crate) fn record(&self, tape: &mut Tape, vars: &[Var], input: &ScorerInput) -> Result<Recorded, ModelError> {
        self.check_input(input)?;
        let mut live = Live::start(tape, input, self.layout.config.blocks);
        self.layout.run(tape, vars, &mut live, 0, None, None)?;
        Ok(Recorded {
            mu: live.mu.expect("head ran"),
            balance: live.balance,
        })
    }

    fn check_input(&self, input: &ScorerInput) -> Result<(), ModelError> {
        let want = 3 * self.config().horizon;
        if input.anchors.rank() != 2 || input.anchors.cols() != want {
            return Err(ModelError::Input(format!(
                "anchor features of shape {:?}, model expects {want} columns",
                input.anchors.shape()
            )));
        }
        if input.scene.shape() != [SCENE_TOKENS, SCENE_DIM] {
            return Err(ModelError::Input(format!("scene tokens of shape {:?}", input.scene.shape())));
        }
        Ok(())
    }

    /// Final layer-normalised anchor features `[K, dim]`, the input of the
    /// score heads.
    pub fn fused_features(&self, input: &ScorerInput) -> Result<Tensor, ModelError> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let mut live = Live::start(&mut tape, input, self.layout.config.blocks);
        self.layout.run(&mut tape, &vars, &mut live, 0, None, None)?;
        let x = live.x.expect("trajectory embedding ran");
        // The head step consumed LN(x); recompute it for the caller.
        let f = tape.layer_norm(x, LN_EPS);
        Ok(tape.value(f).clone())
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl Layout {
    fn new(config: ModelConfig, ids: Ids, param_count: usize) -> Self {
        let steps = steps(config.blocks);
        let mut first_step = vec![usize::MAX; param_count];
        let pos = |s: Step| steps.iter().position(|&x| x == s).expect("step exists");
        let mut mark = |id: ParamId, s: Step| first_step[id.0] = first_step[id.0].min(pos(s));
        mark(ids.scene_w, Step::SceneEmbed);
        mark(ids.scene_b, Step::SceneEmbed);
        mark(ids.traj_w, Step::TrajEmbed);
        mark(ids.traj_b, Step::TrajEmbed);
        for (b, block) in ids.blocks.iter().enumerate() {
            let sa = &block.self_attn;
            for id in [sa.wq, sa.wk, sa.wv, sa.wo] {
                mark(id, Step::SelfAttn(b));
            }
            let ca = &block.cross_attn;
            mark(ca.wk, Step::SceneKv(b));
            mark(ca.wv, Step::SceneKv(b));
            mark(ca.wq, Step::CrossAttn(b));
            mark(ca.wo, Step::CrossAttn(b));
            let ffn_ids = match &block.ffn {
                FfnBlock::Moe(m) => m.ids(),
                FfnBlock::Dense(f) => f.ids().to_vec(),
            };
            for id in ffn_ids {
                mark(id, Step::Ffn(b));
            }
        }
        for id in [ids.mu_w, ids.mu_b, ids.sigma_w, ids.sigma_b] {
            mark(id, Step::Head);
        }
        debug_assert!(first_step.iter().all(|&s| s != usize::MAX));
        Self {
            config,
            ids,
            steps,
            first_step,
        }
    }

    /// Runs steps `from..` on the tape. `frozen` fixes the expert choice of
    /// every MoE layer; `snapshots` collects the state before each step.
    fn run(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        live: &mut Live,
        from: usize,
        frozen: Option<&[Vec<Vec<usize>>]>,
        mut snapshots: Option<&mut Vec<Snapshot>>,
    ) -> Result<(), ModelError> {
        let cfg = &self.config;
        let ids = &self.ids;
        for &step in &self.steps[from..] {
            if let Some(s) = snapshots.as_deref_mut() {
                s.push(live.snapshot(tape));
            }
            match step {
                Step::SceneEmbed => {
                    let s = tape.matmul(live.scene_in, vars[ids.scene_w.0])?;
                    live.scene = Some(tape.add(s, vars[ids.scene_b.0])?);
                }
                Step::SceneKv(b) => {
                    let scene = live.scene.expect("scene embedded");
                    let ca = &ids.blocks[b].cross_attn;
                    let k = tape.matmul(scene, vars[ca.wk.0])?;
                    let v = tape.matmul(scene, vars[ca.wv.0])?;
                    live.kv[b] = Some((k, v));
                }
                Step::TrajEmbed => {
                    let x = tape.matmul(live.anchors_in, vars[ids.traj_w.0])?;
                    live.x = Some(tape.add(x, vars[ids.traj_b.0])?);
                }
                Step::SelfAttn(b) => {
                    let x = live.x.expect("anchors embedded");
                    let sa = &ids.blocks[b].self_attn;
                    let h = tape.layer_norm(x, LN_EPS);
                    let q = tape.matmul(h, vars[sa.wq.0])?;
                    let k = tape.matmul(h, vars[sa.wk.0])?;
                    let v = tape.matmul(h, vars[sa.wv.0])?;
                    let o = attend(tape, q, k, v, cfg.heads, None)?;
                    let o = tape.matmul(o, vars[sa.wo.0])?;
                    live.x = Some(tape.add(x, o)?);
                }
                Step::CrossAttn(b) => {
                    let x = live.x.expect("anchors embedded");
                    let (k, v) = live.kv[b].expect("scene keys computed");
                    let ca = &ids.blocks[b].cross_attn;
                    let h = tape.layer_norm(x, LN_EPS);
                    let q = tape.matmul(h, vars[ca.wq.0])?;
                    let o = attend(tape, q, k, v, cfg.heads, Some(live.mask))?;
                    let o = tape.matmul(o, vars[ca.wo.0])?;
                    live.x = Some(tape.add(x, o)?);
                }
                Step::Ffn(b) => {
                    let x = live.x.expect("anchors embedded");
                    let h = tape.layer_norm(x, LN_EPS);
                    let out = match &ids.blocks[b].ffn {
                        FfnBlock::Dense(f) => ffn_tape(tape, vars, f, h)?,
                        FfnBlock::Moe(m) => {
                            let layer = live.routing.len();
                            let fixed = frozen.map(|f| f[layer].as_slice());
                            let r = moe_tape(tape, vars, m, h, cfg.top_k, fixed)?;
                            let bal = balance_tape(tape, r.p, &r.record)?;
                            live.balance.push(bal);
                            live.routing.push(r.record);
                            r.out
                        }
                    };
                    live.x = Some(tape.add(x, out)?);
                }
                Step::Head => {
                    let x = live.x.expect("anchors embedded");
                    let f = tape.layer_norm(x, LN_EPS);
                    let mu = tape.matmul(f, vars[ids.mu_w.0])?;
                    live.mu = Some(tape.add(mu, vars[ids.mu_b.0])?);
                    let s = tape.matmul(f, vars[ids.sigma_w.0])?;
                    let s = tape.add(s, vars[ids.sigma_b.0])?;
                    let s = tape.softplus(s);
                    live.sigma = Some(tape.add_scalar(s, cfg.sigma_min));
                }
            }
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention; `q` is `[A, d]`, `k` and `v`
/// are `[S, d]`, `mask` is an additive `[S]` bias.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> Result<Var, ModelError> {
    let d = tape.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let mut s = tape.scale(s, scale);
        if let Some(m) = mask {
            s = tape.add(s, m)?;
        }
        let a = tape.softmax(s);
        outs.push(tape.matmul(a, vh)?);
    }
    Ok(tape.concat_cols(&outs)?)
}

pub(crate) struct Recorded {
    pub mu: Var,
    pub balance: Vec<Var>,
}

/// Tape handles of the forward state.
struct Live {
    scene_in: Var,
    mask: Var,
    anchors_in: Var,
    scene: Option<Var>,
    kv: Vec<Option<(Var, Var)>>,
    x: Option<Var>,
    balance: Vec<Var>,
    routing: Vec<RoutingRecord>,
    mu: Option<Var>,
    sigma: Option<Var>,
}

/// Values of the forward state between two steps.
#[derive(Clone)]
struct Snapshot {
    scene: Option<Tensor>,
    kv: Vec<Option<(Tensor, Tensor)>>,
    x: Option<Tensor>,
    balance: Vec<f64>,
    routing: Vec<RoutingRecord>,
}

impl Live {
    fn start(tape: &mut Tape, input: &ScorerInput, blocks: usize) -> Self {
        Self {
            scene_in: tape.leaf(input.scene.clone()),
            mask: tape.leaf(input.mask.clone()),
            anchors_in: tape.leaf(input.anchors.clone()),
            scene: None,
            kv: vec![None; blocks],
            x: None,
            balance: Vec::new(),
            routing: Vec::new(),
            mu: None,
            sigma: None,
        }
    }

    fn snapshot(&self, tape: &Tape) -> Snapshot {
        let val = |v: Var| tape.value(v).clone();
        Snapshot {
            scene: self.scene.map(val),
            kv: self.kv.iter().map(|kv| kv.map(|(k, v)| (val(k), val(v)))).collect(),
            x: self.x.map(val),
            balance: self.balance.iter().map(|&b| tape.value(b).data()[0]).collect(),
            routing: self.routing.clone(),
        }
    }

    /// Resumes from a snapshot; cached values enter as constants.
    fn resume(tape: &mut Tape, input: &ScorerInput, snap: &Snapshot) -> Self {
        let mut live = Live::start(tape, input, snap.kv.len());
        live.scene = snap.scene.clone().map(|t| tape.leaf(t));
        live.kv = snap
            .kv
            .iter()
            .map(|kv| kv.clone().map(|(k, v)| (tape.leaf(k), tape.leaf(v))))
            .collect();
        live.x = snap.x.clone().map(|t| tape.leaf(t));
        live.balance = snap.balance.iter().map(|&b| tape.constant_scalar(b)).collect();
        live.routing = snap.routing.clone();
        live
    }

    fn finish(self, tape: &Tape) -> Result<ScoreOutput, ModelError> {
        Ok(ScoreOutput {
            mu: tape.value(self.mu.expect("head ran")).clone(),
            sigma: tape.value(self.sigma.expect("head ran")).clone(),
            balance: self.balance.iter().map(|&b| tape.value(b).data()[0]).collect(),
            routing: self.routing,
        })
    }
}

/// Records `Σ_m mean_k BCE(sigmoid(μ_km), y_km) + w_bal · Σ balance` given
/// the μ logits `[K, M]`.
pub(crate) fn supervised_loss_tape(
    tape: &mut Tape,
    mu: Var,
    targets: &Tensor,
    balance: &[Var],
    w_bal: f64,
) -> Result<Var, ModelError> {
    check_targets(targets)?;
    let k = targets.rows();
    let y = tape.leaf(targets.clone());
    let sp = tape.softplus(mu);
    let ym = tape.mul(y, mu)?;
    let bce = tape.sub(sp, ym)?;
    let total = tape.sum(bce);
    let mut loss = tape.scale(total, 1.0 / k as f64);
    if !balance.is_empty() {
        let mut bal = balance[0];
        for &b in &balance[1..] {
            bal = tape.add(bal, b)?;
        }
        let weighted = tape.scale(bal, w_bal);
        loss = tape.add(loss, weighted)?;
    }
    Ok(loss)
}

pub(crate) fn check_targets(targets: &Tensor) -> Result<(), ModelError> {
    let m = targets.cols();
    for (i, &v) in targets.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(ModelError::TargetRange {
                anchor: i / m,
                metric: i % m,
                value: v,
            });
        }
    }
    Ok(())
}

/// Supervised loss of one scenario as a function of the scorer parameters,
/// with the expert selection of every MoE layer frozen at its value for the
/// parameters given at construction.
///
/// [`Objective::evaluate_changed`] restarts the forward pass at the first
/// step that reads the changed parameter, so the parameters passed to it
/// must differ from the construction-time ones in that parameter only.
pub struct SupervisedObjective {
    layout: Layout,
    input: ScorerInput,
    targets: Tensor,
    frozen: Vec<Vec<Vec<usize>>>,
    snapshots: Vec<Snapshot>,
}

impl SupervisedObjective {
    pub fn new(scorer: &Scorer, input: ScorerInput, targets: Tensor) -> Result<Self, ModelError> {
        check_targets(&targets)?;
        let layout = scorer.layout.clone();
        let mut tape = Tape::new();
        let vars = scorer.params.register(&mut tape);
        let mut live = Live::start(&mut tape, &input, layout.config.blocks);
        let mut snapshots = Vec::new();
        layout.run(&mut tape, &vars, &mut live, 0, None, Some(&mut snapshots))?;
        let frozen = live.routing.iter().map(|r| r.selected.clone()).collect();
        Ok(Self {
            layout,
            input,
            targets,
            frozen,
            snapshots,
        })
    }

    fn record_from(&self, tape: &mut Tape, vars: &[Var], from: usize) -> Result<Var, ModelError> {
        let mut live = if from == 0 {
            Live::start(tape, &self.input, self.layout.config.blocks)
        } else {
            Live::resume(tape, &self.input, &self.snapshots[from])
        };
        self.layout.run(tape, vars, &mut live, from, Some(&self.frozen), None)?;
        supervised_loss_tape(tape, live.mu.expect("head ran"), &self.targets, &live.balance, self.layout.config.w_bal)
    }
}

fn to_numerics(e: ModelError) -> NumericsError {
    match e {
        ModelError::Numerics(n) => n,
        other => NumericsError::Objective(other.to_string()),
    }
}

impl Objective for SupervisedObjective {
    fn record(&self, tape: &mut Tape, _: &ParamStore, vars: &[Var]) -> Result<Var, NumericsError> {
        self.record_from(tape, vars, 0).map_err(to_numerics)
    }

    fn evaluate_changed(&self, params: &ParamStore, changed: ParamId) -> Result<Evaluation, NumericsError> {
        let from = self.layout.first_step[changed.0];
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let out = self.record_from(&mut tape, &vars, from).map_err(to_numerics)?;
        Ok(Evaluation {
            value: tape.scalar_value(out)?,
            signature: tape.branch_signature(),
        })
    }
}

/// Index of the anchor with the highest composite
/// `σ(nc)·σ(dac)·(w_ep σ(ep) + w_ttc σ(ttc) + w_hc σ(hc))` of its μ logits;
/// ties go to the lowest index.
pub fn select_trajectory(mu: &Tensor, weights: [f64; 3]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..mu.rows() {
        let c = composite(mu.row(k), weights);
        if c > best.1 {
            best = (k, c);
        }
    }
    best.0
}

/// Selection composite of one anchor's μ logits.
pub fn composite(mu: &[f64], weights: [f64; 3]) -> f64 {
    let s: Vec<f64> = mu.iter().map(|&m| sigmoid(m)).collect();
    s[0] * s[1] * (weights[0] * s[2] + weights[1] * s[3] + weights[2] * s[4])
}
