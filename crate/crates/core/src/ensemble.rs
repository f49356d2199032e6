//! Weighted trajectory averaging across checkpoints.
//!
//! Each member selects an anchor for the scene; the ensemble plan is the
//! waypoint-wise convex combination of those anchors with normalised
//! weights. Headings are rebuilt from the averaged waypoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;
use crate::model::{composite, select_trajectory, Checkpoint, ModelError, ScorerInput, SELECTION_WEIGHTS};
use crate::vocab::Trajectory;
use crate::world::Scenario;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble has no members")]
    Empty,
    #[error("weight {weight} of member {index} must be finite and non-negative")]
    BadWeight { index: usize, weight: f64 },
    #[error("ensemble weights sum to zero")]
    ZeroWeights,
    #[error("{weights} weights for {trajectories} trajectories")]
    CountMismatch { weights: usize, trajectories: usize },
    #[error("horizon mismatch: member {index} has {got} waypoints, expected {expected}")]
    HorizonMismatch { index: usize, expected: usize, got: usize },
    #[error("member {index} ({path}): {source}")]
    Member {
        index: usize,
        path: String,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn normalised(weights: &[f64]) -> Result<Vec<f64>, EnsembleError> {
    if weights.is_empty() {
        return Err(EnsembleError::Empty);
    }
    for (index, &weight) in weights.iter().enumerate() {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(EnsembleError::BadWeight { index, weight });
        }
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(EnsembleError::ZeroWeights);
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Convex combination of one coordinate, kept inside the members' range so
/// rounding cannot push it out.
fn combine(values: impl Iterator<Item = f64> + Clone, weights: &[f64]) -> f64 {
    let (lo, hi) = values
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let mut acc = 0.0;
    for (v, w) in values.zip(weights) {
        acc += w * v;
    }
    acc.clamp(lo, hi)
}

/// Waypoint-wise weighted mean of `(x, y)`; weights need not be normalised.
pub fn weighted_average(trajectories: &[Trajectory], weights: &[f64]) -> Result<Trajectory, EnsembleError> {
    if trajectories.len() != weights.len() {
        return Err(EnsembleError::CountMismatch {
            weights: weights.len(),
            trajectories: trajectories.len(),
        });
    }
    let w = normalised(weights)?;
    let horizon = trajectories[0].horizon();
    for (index, t) in trajectories.iter().enumerate() {
        if t.horizon() != horizon {
            return Err(EnsembleError::HorizonMismatch {
                index,
                expected: horizon,
                got: t.horizon(),
            });
        }
    }
    let points: Vec<Vec2> = (0..horizon)
        .map(|i| {
            let x = combine(trajectories.iter().map(|t| t.poses()[i].x), &w);
            let y = combine(trajectories.iter().map(|t| t.poses()[i].y), &w);
            Vec2::new(x, y)
        })
        .collect();
    Ok(Trajectory::from_xy(&points))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub checkpoint: PathBuf,
    pub weight: f64,
}

/// `{"members": [{"checkpoint": path, "weight": w}, ...]}`. Relative
/// checkpoint paths resolve against the spec file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
}

impl EnsembleSpec {
    /// Equal weights over the given checkpoints.
    pub fn uniform(paths: impl IntoIterator<Item = PathBuf>) -> Self {
        Self {
            members: paths
                .into_iter()
                .map(|checkpoint| EnsembleMember { checkpoint, weight: 1.0 })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        normalised(&self.members.iter().map(|m| m.weight).collect::<Vec<_>>()).map(|_| ())
    }

    pub fn read<R: Read>(r: R) -> Result<Self, EnsembleError> {
        let spec: Self = serde_json::from_reader(r)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), EnsembleError> {
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnsembleError> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), EnsembleError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Checkpoints of an ensemble, loaded and checked for a common horizon.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<Checkpoint>,
    pub weights: Vec<f64>,
}

impl Ensemble {
    pub fn new(members: Vec<Checkpoint>, weights: Vec<f64>) -> Result<Self, EnsembleError> {
        if members.len() != weights.len() {
            return Err(EnsembleError::CountMismatch {
                weights: weights.len(),
                trajectories: members.len(),
            });
        }
        normalised(&weights)?;
        let horizon = members[0].vocabulary.horizon;
        for (index, m) in members.iter().enumerate() {
            if m.vocabulary.horizon != horizon {
                return Err(EnsembleError::HorizonMismatch {
                    index,
                    expected: horizon,
                    got: m.vocabulary.horizon,
                });
            }
        }
        Ok(Self { members, weights })
    }

    /// Loads every member of `spec`; `base` resolves relative paths.
    pub fn load(spec: &EnsembleSpec, base: &Path) -> Result<Self, EnsembleError> {
        spec.validate()?;
        let mut members = Vec::with_capacity(spec.members.len());
        for (index, m) in spec.members.iter().enumerate() {
            let path = base.join(&m.checkpoint);
            let ck = Checkpoint::load(&path).map_err(|source| EnsembleError::Member {
                index,
                path: path.display().to_string(),
                source,
            })?;
            members.push(ck);
        }
        Self::new(members, spec.members.iter().map(|m| m.weight).collect())
    }

    pub fn horizon(&self) -> usize {
        self.members[0].vocabulary.horizon
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemberReport {
    pub member: usize,
    pub selected: usize,
    pub composite: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePlan {
    /// Ego-frame trajectory.
    pub trajectory: Trajectory,
    pub members: Vec<MemberReport>,
}

pub fn ensemble_plan(scenario: &Scenario, ensemble: &Ensemble) -> Result<EnsemblePlan, EnsembleError> {
    let mut picks = Vec::with_capacity(ensemble.members.len());
    let mut members = Vec::with_capacity(ensemble.members.len());
    for (member, ck) in ensemble.members.iter().enumerate() {
        let anchors = crate::model::anchor_features(&ck.vocabulary);
        let out = ck.scorer.score(&ScorerInput::new(scenario, &anchors)?)?;
        let selected = select_trajectory(&out.mu, SELECTION_WEIGHTS);
        members.push(MemberReport {
            member,
            selected,
            composite: composite(out.mu.row(selected), SELECTION_WEIGHTS),
        });
        picks.push(ck.vocabulary.anchors[selected].clone());
    }
    Ok(EnsemblePlan {
        trajectory: weighted_average(&picks, &ensemble.weights)?,
        members,
    })
}
