//! The `trajmoe` command-line pipeline.
//!
//! Exit codes: 0 success, 1 validation, 2 IO, 3 numeric divergence. Every
//! command that writes an output also writes `<out>.resolved.cfg` with the
//! full configuration it ran under.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use config::{RunConfig, SEED_ENV};

use crate::ensemble::{ensemble_plan, Ensemble, EnsembleError, EnsembleSpec};
use crate::grpo::{finetune_checkpoint, write_log_csv, GrpoError};
use crate::model::{
    evaluate_selection, train_supervised, Checkpoint, EpochLog, LabelledScene, ModelError, Scorer, Stage,
    SupervisedObjective,
};
use crate::numerics::{grad_check, GradCheckConfig, NumericsError};
use crate::vocab::{build_vocabulary, sample_trajectories, KinematicParams, TrajectoryVocabulary, VocabError};
use crate::world::{generate_dataset, generate_scenario, oracle_scores, read_dataset, write_dataset, Family, Scenario, WorldError, METRIC_NAMES};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NonFinite { .. } => CliError::Divergence(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<VocabError> for CliError {
    fn from(e: VocabError) -> Self {
        match e {
            VocabError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Io(e.to_string()),
            ModelError::Diverged(_) => CliError::Divergence(e.to_string()),
            ModelError::Numerics(n) => n.into(),
            ModelError::World(w) => w.into(),
            ModelError::Vocab(v) => v.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<GrpoError> for CliError {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::NonFinite(_) | GrpoError::NonFiniteRatio { .. } | GrpoError::RatioClamped { .. } => {
                CliError::Divergence(e.to_string())
            }
            GrpoError::Model(m) => m.into(),
            GrpoError::Numerics(n) => n.into(),
            GrpoError::Csv(c) => c.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::Io(_) => CliError::Io(e.to_string()),
            EnsembleError::Member { index, path, source } => {
                let inner = CliError::from(source);
                let msg = format!("member {index} ({path}): {inner}");
                match inner {
                    CliError::Io(_) => CliError::Io(msg),
                    CliError::Divergence(_) => CliError::Divergence(msg),
                    CliError::Validation(_) => CliError::Validation(msg),
                }
            }
            EnsembleError::Model(m) => m.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "trajmoe", version, about = "Trajectory-vocabulary planning with a sparse MoE scorer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded scenario dataset (JSON lines).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster sampled kinematic trajectories into a vocabulary.
    BuildVocab {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training against oracle sub-scores.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// GRPO fine-tuning of the score heads of a supervised checkpoint.
    GrpoFinetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Selection quality of a checkpoint or ensemble against a random baseline.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "ensemble", required_unless_present = "ensemble")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Ensemble plans for every scenario of a dataset (JSON lines).
    Ensemble {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the supervised-loss gradient.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Anchors scored in the checked loss.
        #[arg(long, default_value_t = 2)]
        anchors: usize,
        /// Scenario seed.
        #[arg(long, default_value_t = 0)]
        scenario: u64,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|errs| CliError::Validation(format!("{}:\n  {}", p.display(), errs.join("\n  "))))?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env().map_err(CliError::Validation)?;
    Ok(cfg)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let mut w = create(&with_suffix(out, ".resolved.cfg"))?;
    w.write_all(cfg.render().as_bytes())?;
    w.flush()?;
    Ok(())
}

fn load_data(path: &Path) -> Result<Vec<Scenario>, CliError> {
    Ok(read_dataset(open(path)?)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| {
        let inner = CliError::from(e);
        let msg = format!("{}: {inner}", path.display());
        match inner {
            CliError::Io(_) => CliError::Io(msg),
            _ => CliError::Validation(msg),
        }
    })
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { config, seed, count, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.world.seed = s;
            }
            if let Some(c) = count {
                cfg.world.count = c;
            }
            let scenarios = generate_dataset(cfg.world.seed, cfg.world.count);
            write_dataset(create(&out)?, &scenarios)?;
            write_resolved(&out, &cfg)?;
            for family in Family::ALL {
                let n = scenarios.iter().filter(|s| s.family == family).count();
                println!("{:<11} {n}", family.name());
            }
            Ok(())
        }
        Command::BuildVocab {
            config,
            k,
            iters,
            samples,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let v = &mut cfg.vocab;
            v.k = k.unwrap_or(v.k);
            v.iters = iters.unwrap_or(v.iters);
            v.samples = samples.unwrap_or(v.samples);
            v.seed = seed.unwrap_or(v.seed);
            cfg.validate().map_err(|e| CliError::Validation(e.join("; ")))?;
            let params = KinematicParams::default();
            let trajs = sample_trajectories(cfg.vocab.seed, cfg.vocab.samples, &params)?;
            let vocab = build_vocabulary(&trajs, cfg.vocab.k, cfg.vocab.iters, cfg.vocab.seed, params.dt)?;
            let mut w = create(&out)?;
            vocab.write_json(&mut w)?;
            w.flush()?;
            write_resolved(&out, &cfg)?;
            println!("anchors {} inertia {:.6}", vocab.k(), vocab.source.inertia);
            Ok(())
        }
        Command::Train {
            config,
            data,
            vocab,
            out,
            epochs,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.override_seed(s);
            }
            cfg.validate().map_err(|e| CliError::Validation(e.join("; ")))?;
            let vocab = TrajectoryVocabulary::read_json(open(&vocab)?)?;
            if vocab.horizon != cfg.model.horizon {
                return Err(ModelError::HorizonMismatch {
                    expected: cfg.model.horizon,
                    got: vocab.horizon,
                }
                .into());
            }
            let scenarios = load_data(&data)?;
            let scenes = LabelledScene::label_all(&scenarios, &vocab)?;
            let held = ((scenes.len() as f64) * cfg.heldout_fraction).round() as usize;
            let (train, heldout) = scenes.split_at(scenes.len() - held);
            let mut scorer = Scorer::init(&cfg.model, cfg.model_seed)?;
            let logs = train_supervised(&mut scorer, train, heldout, &cfg.train)?;
            Checkpoint::new(Stage::Sup, cfg.model_seed, vocab, scorer)?.save(&out)?;
            write_epoch_log(&with_suffix(&out, ".log.csv"), &logs)?;
            write_resolved(&out, &cfg)?;
            if let Some(last) = logs.last() {
                println!(
                    "epoch {} loss {:.6} balance {:.6} heldout aggregate {:.6}",
                    last.epoch, last.loss, last.balance_loss, last.heldout_aggregate
                );
            }
            Ok(())
        }
        Command::GrpoFinetune {
            config,
            checkpoint,
            data,
            out,
            iterations,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(i) = iterations {
                cfg.grpo.iterations = i;
            }
            if let Some(s) = seed {
                cfg.grpo.seed = s;
            }
            let ck = load_checkpoint(&checkpoint)?;
            let scenes = LabelledScene::label_all(&load_data(&data)?, &ck.vocabulary)?;
            let (tuned, logs) = finetune_checkpoint(&ck, &scenes, &cfg.grpo)?;
            tuned.save(&out)?;
            write_log_csv(create(&with_suffix(&out, ".log.csv"))?, &logs)?;
            write_resolved(&out, &cfg)?;
            if let Some(last) = logs.last() {
                println!("iteration {} loss {:.6} KL {:.6} mean |mu - s*| {:.6}", last.iteration, last.loss, last.kl, last.mean_abs_err);
            }
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            ensemble,
            data,
            report,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            let scenarios = load_data(&data)?;
            let rows = match (checkpoint, ensemble) {
                (Some(path), _) => eval_checkpoint(&load_checkpoint(&path)?, &scenarios, cfg.eval.seed)?,
                (None, Some(path)) => {
                    let spec = EnsembleSpec::load(&path)?;
                    let base = path.parent().unwrap_or(Path::new("."));
                    eval_ensemble(&Ensemble::load(&spec, base)?, &scenarios, cfg.eval.seed)?
                }
                (None, None) => return Err(CliError::Validation("eval needs --checkpoint or --ensemble".into())),
            };
            let mut csv = csv::Writer::from_writer(create(&report)?);
            for row in &rows {
                csv.serialize(row)?;
            }
            csv.flush()?;
            let table = render_table(&rows);
            let mut w = create(&with_suffix(&report, ".txt"))?;
            w.write_all(table.as_bytes())?;
            w.flush()?;
            write_resolved(&report, &cfg)?;
            print!("{table}");
            Ok(())
        }
        Command::Ensemble { spec, data, out } => {
            let loaded = EnsembleSpec::load(&spec)?;
            let base = spec.parent().unwrap_or(Path::new("."));
            let ensemble = Ensemble::load(&loaded, base)?;
            let scenarios = load_data(&data)?;
            let mut w = create(&out)?;
            let mut total = 0.0;
            for s in &scenarios {
                let plan = ensemble_plan(s, &ensemble)?;
                let metrics = oracle_scores(&plan.trajectory.transformed(&s.ego_transform()), s)?;
                total += metrics.aggregate;
                let line = PlanLine {
                    seed: s.seed,
                    waypoints: plan.trajectory.positions().iter().map(|p| [p.x, p.y]).collect(),
                    members: &plan.members,
                    aggregate: metrics.aggregate,
                };
                serde_json::to_writer(&mut w, &line).map_err(|e| CliError::Io(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            println!("scenarios {} mean aggregate {:.6}", scenarios.len(), total / scenarios.len().max(1) as f64);
            Ok(())
        }
        Command::Gradcheck {
            config,
            checkpoint,
            anchors,
            scenario,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (scorer, vocab) = match checkpoint {
                Some(p) => {
                    let ck = load_checkpoint(&p)?;
                    (ck.scorer, ck.vocabulary)
                }
                None => {
                    cfg.validate().map_err(|e| CliError::Validation(e.join("; ")))?;
                    let params = KinematicParams::default();
                    let trajs = sample_trajectories(cfg.vocab.seed, cfg.vocab.samples, &params)?;
                    let vocab = build_vocabulary(&trajs, cfg.vocab.k, cfg.vocab.iters, cfg.vocab.seed, params.dt)?;
                    (Scorer::init(&cfg.model, cfg.model_seed)?, vocab)
                }
            };
            if anchors == 0 || anchors > vocab.k() {
                return Err(CliError::Validation(format!("--anchors must lie in 1..={}", vocab.k())));
            }
            let small = TrajectoryVocabulary::new(vocab.horizon, vocab.dt, vocab.anchors[..anchors].to_vec(), vocab.source.clone())?;
            let scene = LabelledScene::new(&generate_scenario(scenario), &small, &crate::model::anchor_features(&small))?;
            let objective = SupervisedObjective::new(&scorer, scene.input, scene.targets)?;
            let mut params = scorer.params.clone();
            let report = grad_check(&objective, &mut params, &GradCheckConfig::default())?;
            println!(
                "checked {} entries, skipped {} at kinks, max relative error {:.3e}",
                report.checked, report.skipped_kinks, report.max_relative_error
            );
            if report.passed() {
                Ok(())
            } else {
                for f in report.failures.iter().take(10) {
                    println!("  {}[{}]: analytic {:.6e} numeric {:.6e}", f.param, f.index, f.analytic, f.numeric);
                }
                Err(CliError::Divergence(format!("{} gradient entries exceed tolerance", report.failures.len())))
            }
        }
    }
}

#[derive(Serialize)]
struct PlanLine<'a> {
    seed: u64,
    waypoints: Vec<[f64; 2]>,
    members: &'a [crate::ensemble::MemberReport],
    aggregate: f64,
}

fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<(), CliError> {
    let mut csv = csv::Writer::from_writer(create(path)?);
    for row in logs {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub selector: String,
    pub scenes: usize,
    pub aggregate: f64,
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub hc: f64,
    /// Mean `|sigmoid(μ) − oracle|`; absent for selectors without scores.
    pub mean_abs_err: Option<f64>,
}

fn row(selector: &str, scenes: usize, aggregate: f64, metrics: [f64; 5], mae: Option<f64>) -> ReportRow {
    ReportRow {
        selector: selector.into(),
        scenes,
        aggregate,
        nc: metrics[0],
        dac: metrics[1],
        ep: metrics[2],
        ttc: metrics[3],
        hc: metrics[4],
        mean_abs_err: mae,
    }
}

/// Uniformly random anchor per scene, drawn with `seed`.
fn random_row(vocab: &TrajectoryVocabulary, scenarios: &[Scenario], seed: u64) -> Result<ReportRow, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut agg, mut metrics) = (0.0, [0.0; 5]);
    for s in scenarios {
        let k = rng.random_range(0..vocab.k());
        let m = oracle_scores(&vocab.anchors[k].transformed(&s.ego_transform()), s)?;
        agg += m.aggregate;
        for (a, v) in metrics.iter_mut().zip(m.to_array()) {
            *a += v;
        }
    }
    let n = scenarios.len().max(1) as f64;
    Ok(row("random", scenarios.len(), agg / n, metrics.map(|m| m / n), None))
}

pub fn eval_checkpoint(ck: &Checkpoint, scenarios: &[Scenario], seed: u64) -> Result<Vec<ReportRow>, CliError> {
    let scenes = LabelledScene::label_all(scenarios, &ck.vocabulary)?;
    let r = evaluate_selection(&ck.scorer, &scenes)?;
    Ok(vec![
        row(ck.stage.tag(), r.scenes, r.selected_aggregate, r.selected_metrics, Some(r.mean_abs_err)),
        random_row(&ck.vocabulary, scenarios, seed)?,
    ])
}

pub fn eval_ensemble(ensemble: &Ensemble, scenarios: &[Scenario], seed: u64) -> Result<Vec<ReportRow>, CliError> {
    let (mut agg, mut metrics) = (0.0, [0.0; 5]);
    for s in scenarios {
        let plan = ensemble_plan(s, ensemble)?;
        let m = oracle_scores(&plan.trajectory.transformed(&s.ego_transform()), s)?;
        agg += m.aggregate;
        for (a, v) in metrics.iter_mut().zip(m.to_array()) {
            *a += v;
        }
    }
    let n = scenarios.len().max(1) as f64;
    Ok(vec![
        row("ensemble", scenarios.len(), agg / n, metrics.map(|m| m / n), None),
        random_row(&ensemble.members[0].vocabulary, scenarios, seed)?,
    ])
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = format!("{:<10} {:>6} {:>9}", "selector", "scenes", "aggregate");
    for name in METRIC_NAMES {
        out.push_str(&format!(" {name:>7}"));
    }
    out.push_str(&format!(" {:>12}\n", "mean|mu-s*|"));
    for r in rows {
        out.push_str(&format!("{:<10} {:>6} {:>9.4}", r.selector, r.scenes, r.aggregate));
        for v in [r.nc, r.dac, r.ep, r.ttc, r.hc] {
            out.push_str(&format!(" {v:>7.4}"));
        }
        match r.mean_abs_err {
            Some(e) => out.push_str(&format!(" {e:>12.4}\n")),
            None => out.push_str(&format!(" {:>12}\n", "-")),
        }
    }
    out
}
