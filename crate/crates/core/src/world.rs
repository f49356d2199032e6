//! Seeded synthetic driving scenarios and the geometric oracle that scores
//! trajectories in them.
//!
//! A scenario lives in a world frame. Trajectories handed to
//! [`oracle_scores`] are in that same frame; vocabulary anchors are ego-local
//! and get moved into the world frame by [`label_vocabulary`].

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Polyline, RigidTransform, Vec2};
use crate::vocab::{Pose, Trajectory, TrajectoryVocabulary};

pub const SCHEMA_VERSION: u32 = 1;
pub const SCENE_TOKENS: usize = 16;
pub const SCENE_DIM: usize = 10;
pub const MAX_OBSTACLES: usize = 12;
const CORRIDOR_TOKENS: usize = 3;
const CORRIDOR_LOOKAHEAD: [f64; CORRIDOR_TOKENS] = [10.0, 25.0, 45.0];

pub const W_EP: f64 = 0.5;
pub const W_TTC: f64 = 0.3;
pub const W_HC: f64 = 0.2;
/// Clearance at which the time-to-collision score saturates, metres.
pub const D_SAFE: f64 = 2.0;
/// Per-step heading change that zeroes the comfort score, radians.
pub const DELTA_MAX: f64 = 0.3;

pub const METRIC_NAMES: [&str; 5] = ["nc", "dac", "ep", "ttc", "hc"];

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("horizon mismatch: scenario has {expected} steps, trajectory has {got}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("{count} obstacles exceed the token budget of {MAX_OBSTACLES}")]
    TooManyObstacles { count: usize },
    #[error("line {line}: unsupported schema version {version}")]
    Version { line: usize, version: u32 },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Straight,
    LeftTurn,
    RightTurn,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Straight, Family::LeftTurn, Family::RightTurn];

    pub fn name(self) -> &'static str {
        match self {
            Family::Straight => "straight",
            Family::LeftTurn => "left_turn",
            Family::RightTurn => "right_turn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ego {
    pub pose: Pose,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub center: Polyline,
    pub half_width: f64,
}

/// A disc moving with constant velocity; `center` is its position at t = 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec2,
    pub radius: f64,
    pub velocity: Vec2,
}

impl Obstacle {
    pub fn position_at(&self, t: f64) -> Vec2 {
        self.center.add(self.velocity.scale(t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub family: Family,
    pub horizon: usize,
    pub dt: f64,
    pub ego: Ego,
    pub corridor: Corridor,
    pub obstacles: Vec<Obstacle>,
    /// Distance along the corridor center, measured from the ego's
    /// projection, that counts as full progress.
    pub goal_arclength: f64,
}

impl Scenario {
    /// Maps ego-local coordinates into the world frame.
    pub fn ego_transform(&self) -> RigidTransform {
        RigidTransform::new(self.ego.pose.x, self.ego.pose.y, self.ego.pose.heading)
    }

    /// The same scenario under a rigid motion of the world frame.
    pub fn transformed(&self, tf: &RigidTransform) -> Scenario {
        let p = tf.apply(self.ego.pose.position());
        Scenario {
            ego: Ego {
                pose: Pose {
                    x: p.x,
                    y: p.y,
                    heading: tf.apply_heading(self.ego.pose.heading),
                },
                speed: self.ego.speed,
            },
            corridor: Corridor {
                center: self.corridor.center.transformed(tf),
                half_width: self.corridor.half_width,
            },
            obstacles: self
                .obstacles
                .iter()
                .map(|o| Obstacle {
                    center: tf.apply(o.center),
                    radius: o.radius,
                    velocity: tf.rotate(o.velocity),
                })
                .collect(),
            ..self.clone()
        }
    }
}

/// Per-trajectory sub-scores, all in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub hc: f64,
    pub aggregate: f64,
}

impl MetricVector {
    pub fn new(nc: f64, dac: f64, ep: f64, ttc: f64, hc: f64) -> Self {
        Self {
            nc,
            dac,
            ep,
            ttc,
            hc,
            aggregate: nc * dac * (W_EP * ep + W_TTC * ttc + W_HC * hc),
        }
    }

    /// Sub-scores in [`METRIC_NAMES`] order.
    pub fn to_array(&self) -> [f64; 5] {
        [self.nc, self.dac, self.ep, self.ttc, self.hc]
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Builds the corridor centre line in the scenario's local frame, where the
/// ego starts near the origin facing +x.
fn corridor_centre(family: Family, rng: &mut ChaCha8Rng) -> Vec<Vec2> {
    let mut pts = vec![Vec2::new(-10.0, 0.0)];
    match family {
        Family::Straight => pts.push(Vec2::new(150.0, 0.0)),
        Family::LeftTurn | Family::RightTurn => {
            let side = if family == Family::LeftTurn { 1.0 } else { -1.0 };
            let turn_start = uniform(rng, 2.0, 15.0);
            let radius = uniform(rng, 12.0, 25.0);
            const ARC_STEPS: usize = 12;
            for i in 0..=ARC_STEPS {
                let phi = FRAC_PI_2 * i as f64 / ARC_STEPS as f64;
                pts.push(Vec2::new(turn_start + radius * phi.sin(), side * radius * (1.0 - phi.cos())));
            }
            pts.push(Vec2::new(turn_start + radius, side * (radius + 100.0)));
        }
    }
    pts
}

/// Deterministic scenario for a seed. Families are drawn uniformly.
pub fn generate_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = Family::ALL[rng.random_range(0..3)];
    let centre = Polyline::new(corridor_centre(family, &mut rng)).expect("corridor has vertices");
    let half_width = uniform(&mut rng, 2.5, 4.0);
    let speed = uniform(&mut rng, 4.0, 12.0);
    let ego_local = Pose {
        x: 0.0,
        y: uniform(&mut rng, -0.5, 0.5),
        heading: uniform(&mut rng, -0.1, 0.1),
    };
    let horizon = 8;
    let dt = 0.5;
    let goal_arclength = speed * horizon as f64 * dt * uniform(&mut rng, 0.9, 1.4);

    let s_ego = centre.project(ego_local.position()).arclength;
    let count = rng.random_range(0..=4);
    let obstacles = (0..count)
        .map(|_| {
            let s = s_ego + uniform(&mut rng, 8.0, 50.0);
            let (p, tangent) = centre.sample(s);
            let normal = Vec2::new(-tangent.y, tangent.x);
            let lateral = uniform(&mut rng, -0.8, 0.8) * half_width;
            let radius = uniform(&mut rng, 0.5, 1.5);
            let moving = rng.random_bool(0.5);
            let v = if moving { uniform(&mut rng, 0.0, 8.0) } else { 0.0 };
            Obstacle {
                center: p.add(normal.scale(lateral)),
                radius,
                velocity: tangent.scale(v),
            }
        })
        .collect();

    let local = Scenario {
        seed,
        family,
        horizon,
        dt,
        ego: Ego { pose: ego_local, speed },
        corridor: Corridor {
            center: centre,
            half_width,
        },
        obstacles,
        goal_arclength,
    };
    let world = RigidTransform::new(
        uniform(&mut rng, -100.0, 100.0),
        uniform(&mut rng, -100.0, 100.0),
        uniform(&mut rng, -PI, PI),
    );
    local.transformed(&world)
}

/// Scores a world-frame trajectory against a scenario.
pub fn oracle_scores(traj: &Trajectory, scenario: &Scenario) -> Result<MetricVector, WorldError> {
    if traj.horizon() != scenario.horizon {
        return Err(WorldError::HorizonMismatch {
            expected: scenario.horizon,
            got: traj.horizon(),
        });
    }
    let centre = &scenario.corridor.center;
    let mut nc = 1.0;
    let mut ttc: f64 = 1.0;
    let mut dac = 1.0;
    for (t, pose) in traj.poses().iter().enumerate() {
        let p = pose.position();
        let time = (t + 1) as f64 * scenario.dt;
        for o in &scenario.obstacles {
            let d = p.distance(o.position_at(time));
            if d <= o.radius {
                nc = 0.0;
            }
            ttc = ttc.min(((d - o.radius) / D_SAFE).clamp(0.0, 1.0));
        }
        if centre.project(p).distance > scenario.corridor.half_width {
            dac = 0.0;
        }
    }

    let ego_s = centre.project(scenario.ego.pose.position()).arclength;
    let ep = match traj.poses().last() {
        Some(last) => ((centre.project(last.position()).arclength - ego_s) / scenario.goal_arclength).clamp(0.0, 1.0),
        None => 0.0,
    };

    let mut prev = scenario.ego.pose.heading;
    let mut max_turn: f64 = 0.0;
    for pose in traj.poses() {
        max_turn = max_turn.max(wrap_angle(pose.heading - prev).abs());
        prev = pose.heading;
    }
    let hc = 1.0 - (max_turn / DELTA_MAX).clamp(0.0, 1.0);
    Ok(MetricVector::new(nc, dac, ep, ttc, hc))
}

/// Oracle scores of every anchor after moving it into the scenario's world
/// frame, in vocabulary order.
pub fn label_vocabulary(vocab: &TrajectoryVocabulary, scenario: &Scenario) -> Result<Vec<MetricVector>, WorldError> {
    let tf = scenario.ego_transform();
    vocab
        .anchors
        .iter()
        .map(|a| oracle_scores(&a.transformed(&tf), scenario))
        .collect()
}

/// Distance from the centre line, positive to the left of travel.
fn signed_offset(centre: &Polyline, p: Vec2) -> f64 {
    let proj = centre.project(p);
    let (_, tangent) = centre.sample(proj.arclength);
    let rel = p.sub(proj.point);
    tangent.x * rel.y - tangent.y * rel.x
}

/// Fixed-size ego-frame encoding of a scenario.
///
/// Token layout (row index):
/// - 0: ego
/// - 1..=3: corridor centre samples 10, 25 and 45 m ahead of the ego
/// - 4..=15: obstacles in scenario order, then padding
///
/// Channel layout: `[mask, is_ego, is_corridor, is_obstacle, x/20, y/20,
/// dir_x, dir_y, a, b]` where `dir` is the ego heading, the corridor tangent
/// or the obstacle velocity / 10, and `(a, b)` is `(speed/10, goal/50)` for
/// the ego, `(half_width/4, lateral offset of the ego / half_width)` for
/// corridor samples and `(radius, lateral offset / half_width)` for
/// obstacles. Padding rows are all zero.
pub fn scene_features(scenario: &Scenario) -> Result<Vec<f64>, WorldError> {
    if scenario.obstacles.len() > MAX_OBSTACLES {
        return Err(WorldError::TooManyObstacles {
            count: scenario.obstacles.len(),
        });
    }
    let to_ego = scenario.ego_transform().inverse();
    let mut out = vec![0.0; SCENE_TOKENS * SCENE_DIM];
    let ego = &scenario.ego;
    out[..SCENE_DIM].copy_from_slice(&[
        1.0,
        1.0,
        0.0,
        0.0,
        0.0,
        0.0,
        1.0,
        0.0,
        ego.speed / 10.0,
        scenario.goal_arclength / 50.0,
    ]);

    let centre = &scenario.corridor.center;
    let hw = scenario.corridor.half_width;
    let proj = centre.project(ego.pose.position());
    // Signed lateral offset of the ego from the centre line.
    let lateral = signed_offset(centre, ego.pose.position());
    for (i, ahead) in CORRIDOR_LOOKAHEAD.iter().enumerate() {
        let (p, t) = centre.sample(proj.arclength + ahead);
        let p = to_ego.apply(p);
        let t = to_ego.rotate(t);
        let row = &mut out[(1 + i) * SCENE_DIM..(2 + i) * SCENE_DIM];
        row.copy_from_slice(&[1.0, 0.0, 1.0, 0.0, p.x / 20.0, p.y / 20.0, t.x, t.y, hw / 4.0, lateral / hw]);
    }

    for (i, o) in scenario.obstacles.iter().enumerate() {
        let p = to_ego.apply(o.center);
        let v = to_ego.rotate(o.velocity);
        let row = &mut out[(1 + CORRIDOR_TOKENS + i) * SCENE_DIM..(2 + CORRIDOR_TOKENS + i) * SCENE_DIM];
        row.copy_from_slice(&[1.0, 0.0, 0.0, 1.0, p.x / 20.0, p.y / 20.0, v.x / 10.0, v.y / 10.0, o.radius, signed_offset(centre, o.center) / hw]);
    }
    Ok(out)
}

/// Seed of the `index`-th scenario of a dataset generated from `seed`.
pub fn scenario_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a Weyl sequence keeps neighbouring datasets
    // from sharing scenarios.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(seed: u64, count: usize) -> Vec<Scenario> {
    (0..count as u64).map(|i| generate_scenario(scenario_seed(seed, i))).collect()
}

#[derive(Serialize)]
struct RecordOut<'a> {
    v: u32,
    #[serde(flatten)]
    scenario: &'a Scenario,
}

#[derive(Deserialize)]
struct RecordIn {
    v: u32,
    #[serde(flatten)]
    scenario: Scenario,
}

/// Writes one JSON object per line, each tagged with the schema version.
pub fn write_dataset<W: Write>(mut w: W, scenarios: &[Scenario]) -> Result<(), WorldError> {
    for scenario in scenarios {
        serde_json::to_writer(&mut w, &RecordOut { v: SCHEMA_VERSION, scenario })
            .map_err(|e| WorldError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Scenario>, WorldError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordIn = serde_json::from_str(&line).map_err(|source| WorldError::Parse { line: i + 1, source })?;
        if rec.v != SCHEMA_VERSION {
            return Err(WorldError::Version {
                line: i + 1,
                version: rec.v,
            });
        }
        out.push(rec.scenario);
    }
    Ok(out)
}

#[derive(Serialize)]
struct MetricRow {
    scenario: u64,
    anchor: usize,
    nc: f64,
    dac: f64,
    ep: f64,
    ttc: f64,
    hc: f64,
    aggregate: f64,
}

/// Metric report with one row per `(scenario, anchor)`.
pub fn write_metric_csv<W: Write>(w: W, rows: &[(u64, Vec<MetricVector>)]) -> Result<(), WorldError> {
    let mut csv = csv::Writer::from_writer(w);
    for (seed, metrics) in rows {
        for (anchor, m) in metrics.iter().enumerate() {
            csv.serialize(MetricRow {
                scenario: *seed,
                anchor,
                nc: m.nc,
                dac: m.dac,
                ep: m.ep,
                ttc: m.ttc,
                hc: m.hc,
                aggregate: m.aggregate,
            })?;
        }
    }
    csv.flush()?;
    Ok(())
}
