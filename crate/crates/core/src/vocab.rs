//! Trajectories, kinematic trajectory sampling, and the k-means trajectory
//! vocabulary the scorer chooses from.
//!
//! Trajectories are expressed in the ego frame: the vehicle starts at the
//! origin with heading 0 and the `T` stored poses are the waypoints at
//! `dt, 2·dt, …, T·dt`. Headings are always reconstructed from consecutive
//! waypoints, so two trajectories with equal `(x, y)` are equal.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, RigidTransform, Vec2};
use crate::sig17::Sig17;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("invalid kinematic parameters: {0}")]
    InvalidKinematics(String),
    #[error("cannot build {k} anchors from {distinct} distinct trajectories")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("vocabulary needs at least {min} anchors, got {k}")]
    TooFewAnchors { k: usize, min: usize },
    #[error("k-means needs at least one iteration")]
    NoIterations,
    #[error("horizon mismatch: expected {expected} waypoints, got {got}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("vocabulary contains duplicate anchors {0} and {1}")]
    DuplicateAnchor(usize, usize),
    #[error("malformed vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    /// Builds a trajectory from waypoints; headings point along the
    /// displacement from the previous waypoint (the origin for the first one)
    /// and are carried over across zero-length steps.
    pub fn from_xy(points: &[Vec2]) -> Self {
        Self::from_xy_with_start(points, Vec2::new(0.0, 0.0), 0.0)
    }

    /// Like [`Trajectory::from_xy`] for a vehicle starting at `start` with
    /// `start_heading`.
    pub fn from_xy_with_start(points: &[Vec2], start: Vec2, start_heading: f64) -> Self {
        let mut prev = start;
        let mut heading = wrap_angle(start_heading);
        let poses = points
            .iter()
            .map(|&p| {
                let d = p.sub(prev);
                if d.norm() > 1e-9 {
                    heading = wrap_angle(d.y.atan2(d.x));
                }
                prev = p;
                Pose {
                    x: p.x,
                    y: p.y,
                    heading,
                }
            })
            .collect();
        Self { poses }
    }

    /// Uses the given poses verbatim apart from wrapping headings.
    pub fn from_poses(poses: Vec<Pose>) -> Self {
        Self {
            poses: poses
                .into_iter()
                .map(|p| Pose {
                    heading: wrap_angle(p.heading),
                    ..p
                })
                .collect(),
        }
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn horizon(&self) -> usize {
        self.poses.len()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.poses.iter().map(Pose::position).collect()
    }

    /// Flattened `(x, y)` waypoints, the space vocabulary clustering works in.
    pub fn flat_xy(&self) -> Vec<f64> {
        self.poses.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn transformed(&self, tf: &RigidTransform) -> Trajectory {
        Trajectory {
            poses: self
                .poses
                .iter()
                .map(|p| {
                    let q = tf.apply(p.position());
                    Pose {
                        x: q.x,
                        y: q.y,
                        heading: tf.apply_heading(p.heading),
                    }
                })
                .collect(),
        }
    }

    /// Largest distance between consecutive waypoints, starting from the
    /// origin.
    pub fn max_spacing(&self) -> f64 {
        let mut prev = Vec2::new(0.0, 0.0);
        let mut max: f64 = 0.0;
        for p in &self.poses {
            max = max.max(p.position().distance(prev));
            prev = p.position();
        }
        max
    }

    pub fn squared_distance(&self, other: &Trajectory) -> Result<f64, VocabError> {
        if self.horizon() != other.horizon() {
            return Err(VocabError::HorizonMismatch {
                expected: other.horizon(),
                got: self.horizon(),
            });
        }
        Ok(self
            .poses
            .iter()
            .zip(&other.poses)
            .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
            .sum())
    }
}

/// Bounds for the seeded bicycle-model trajectory sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicParams {
    pub horizon: usize,
    pub dt: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub accel_max: f64,
    /// Path curvature bound, 1/m.
    pub curvature_max: f64,
    /// Curvature change bound, 1/(m·s).
    pub curvature_rate_max: f64,
}

impl Default for KinematicParams {
    fn default() -> Self {
        Self {
            horizon: 8,
            dt: 0.5,
            v_min: 0.0,
            v_max: 15.0,
            accel_max: 3.0,
            curvature_max: 0.12,
            curvature_rate_max: 0.04,
        }
    }
}

impl KinematicParams {
    pub fn validate(&self) -> Result<(), VocabError> {
        let bad = |m: &str| Err(VocabError::InvalidKinematics(m.to_string()));
        if !(self.v_max > 0.0) {
            return bad("v_max must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.v_min >= 0.0 && self.v_min <= self.v_max) {
            return bad("v_min must lie in [0, v_max]");
        }
        if !(self.accel_max >= 0.0 && self.curvature_max >= 0.0 && self.curvature_rate_max >= 0.0) {
            return bad("bounds must be non-negative");
        }
        Ok(())
    }

    /// Upper bound on the distance between consecutive waypoints.
    pub fn max_step(&self) -> f64 {
        self.v_max * self.dt
    }
}

/// Integrates a kinematic bicycle model from the origin: during step `t` the
/// vehicle moves `speeds[t]·dt` along its heading, then turns by
/// `speeds[t]·curvatures[t]·dt`.
pub fn rollout(speeds: &[f64], curvatures: &[f64], dt: f64) -> Trajectory {
    let mut pos = Vec2::new(0.0, 0.0);
    let mut heading: f64 = 0.0;
    let points: Vec<Vec2> = speeds
        .iter()
        .zip(curvatures)
        .map(|(&v, &k)| {
            let (s, c) = heading.sin_cos();
            pos = pos.add(Vec2::new(c, s).scale(v * dt));
            heading += v * k * dt;
            pos
        })
        .collect();
    Trajectory::from_xy(&points)
}

/// Seeded random speed and curvature profiles rolled out with [`rollout`].
pub fn sample_trajectories(seed: u64, count: usize, params: &KinematicParams) -> Result<Vec<Trajectory>, VocabError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = uniform(&mut rng, params.v_min, params.v_max);
        let accel = uniform(&mut rng, -params.accel_max, params.accel_max);
        let mut k = uniform(&mut rng, -params.curvature_max, params.curvature_max);
        let k_rate = uniform(&mut rng, -params.curvature_rate_max, params.curvature_rate_max);
        let mut speeds = Vec::with_capacity(params.horizon);
        let mut curvatures = Vec::with_capacity(params.horizon);
        for _ in 0..params.horizon {
            speeds.push(v);
            curvatures.push(k);
            v = (v + accel * params.dt).clamp(params.v_min, params.v_max);
            k = (k + k_rate * params.dt).clamp(-params.curvature_max, params.curvature_max);
        }
        out.push(rollout(&speeds, &curvatures, params.dt));
    }
    Ok(out)
}

/// Provenance of a vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSource {
    pub seed: u64,
    pub sample_count: usize,
    pub iterations: usize,
    /// Sum of squared distances from each sample to its nearest anchor.
    pub inertia: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryVocabulary {
    pub horizon: usize,
    pub dt: f64,
    pub anchors: Vec<Trajectory>,
    pub source: VocabSource,
}

impl TrajectoryVocabulary {
    pub fn new(horizon: usize, dt: f64, anchors: Vec<Trajectory>, source: VocabSource) -> Result<Self, VocabError> {
        let vocab = Self {
            horizon,
            dt,
            anchors,
            source,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn k(&self) -> usize {
        self.anchors.len()
    }

    pub fn validate(&self) -> Result<(), VocabError> {
        if self.anchors.len() < 2 {
            return Err(VocabError::TooFewAnchors {
                k: self.anchors.len(),
                min: 2,
            });
        }
        if let Some(bad) = self.anchors.iter().find(|a| a.horizon() != self.horizon) {
            return Err(VocabError::HorizonMismatch {
                expected: self.horizon,
                got: bad.horizon(),
            });
        }
        let mut seen = std::collections::HashMap::new();
        for (i, a) in self.anchors.iter().enumerate() {
            let key: Vec<u64> = a.flat_xy().iter().map(|v| v.to_bits()).collect();
            if let Some(j) = seen.insert(key, i) {
                return Err(VocabError::DuplicateAnchor(j, i));
            }
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<(), VocabError> {
        serde_json::to_writer(&mut w, &VocabFileOut::from(self))?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&VocabFileOut::from(self)).expect("vocabulary serialises")
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self, VocabError> {
        let file: VocabFileIn = serde_json::from_reader(r)?;
        Self::try_from(file)
    }

    pub fn from_json_str(s: &str) -> Result<Self, VocabError> {
        let file: VocabFileIn = serde_json::from_str(s)?;
        Self::try_from(file)
    }
}

#[derive(Serialize)]
pub(crate) struct SourceOut {
    seed: u64,
    sample_count: usize,
    iterations: usize,
    inertia: Sig17,
}

#[derive(Serialize)]
pub(crate) struct VocabFileOut {
    horizon: usize,
    dt: Sig17,
    k: usize,
    anchors: Vec<Vec<[Sig17; 3]>>,
    source: SourceOut,
}

impl From<&TrajectoryVocabulary> for VocabFileOut {
    fn from(v: &TrajectoryVocabulary) -> Self {
        Self {
            horizon: v.horizon,
            dt: Sig17(v.dt),
            k: v.k(),
            anchors: v
                .anchors
                .iter()
                .map(|a| a.poses().iter().map(|p| [Sig17(p.x), Sig17(p.y), Sig17(p.heading)]).collect())
                .collect(),
            source: SourceOut {
                seed: v.source.seed,
                sample_count: v.source.sample_count,
                iterations: v.source.iterations,
                inertia: Sig17(v.source.inertia),
            },
        }
    }
}

#[derive(Deserialize)]
pub(crate) struct VocabFileIn {
    horizon: usize,
    dt: f64,
    k: usize,
    anchors: Vec<Vec<[f64; 3]>>,
    source: VocabSource,
}

impl TryFrom<VocabFileIn> for TrajectoryVocabulary {
    type Error = VocabError;

    fn try_from(f: VocabFileIn) -> Result<Self, VocabError> {
        if f.k != f.anchors.len() {
            return Err(VocabError::Format(format!("k = {} but {} anchors", f.k, f.anchors.len())));
        }
        let anchors = f
            .anchors
            .into_iter()
            .map(|a| {
                Trajectory::from_poses(
                    a.into_iter()
                        .map(|[x, y, heading]| Pose { x, y, heading })
                        .collect(),
                )
            })
            .collect();
        TrajectoryVocabulary::new(f.horizon, f.dt, anchors, f.source)
    }
}

/// Output of [`kmeans`].
#[derive(Clone, Debug)]
pub struct KMeansResult {
    /// `k` centroids of dimension `dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Inertia after each assignment step; the last entry belongs to the
    /// returned centroids.
    pub inertia_history: Vec<f64>,
    pub iterations_run: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Assigns every point to its nearest centroid (lowest index on ties) and
/// returns per-point squared distances.
fn assign(points: &[f64], dim: usize, centroids: &[f64], assignment: &mut [usize], dist: &mut [f64]) {
    for (i, p) in points.chunks(dim).enumerate() {
        let mut best = (0, f64::INFINITY);
        for (c, centre) in centroids.chunks(dim).enumerate() {
            let d = sq_dist(p, centre);
            if d < best.1 {
                best = (c, d);
            }
        }
        assignment[i] = best.0;
        dist[i] = best.1;
    }
}

/// Number of bitwise-distinct points.
pub fn distinct_count(points: &[f64], dim: usize) -> usize {
    points
        .chunks(dim)
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

/// Lloyd's algorithm with seeded k-means++ initialisation.
///
/// Stops early once an assignment step changes nothing. Empty clusters are
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans(points: &[f64], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeansResult, VocabError> {
    if iters == 0 {
        return Err(VocabError::NoIterations);
    }
    let distinct = distinct_count(points, dim);
    if k == 0 || k > distinct {
        return Err(VocabError::TooFewDistinct { k, distinct });
    }
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("k <= distinct leaves a point with positive distance");
        let start = centroids.len();
        centroids.extend_from_slice(point(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &centroids[start..start + dim]));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut next = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations_run = 0;
    for _ in 0..iters {
        assign(points, dim, &centroids, &mut next, &mut dist);
        history.push(dist.iter().sum::<f64>());
        if next == assignment {
            break;
        }
        assignment.copy_from_slice(&next);
        iterations_run += 1;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .fold(0, |best, i| if dist[i] > dist[best] { i } else { best });
                centroids[c * dim..(c + 1) * dim].copy_from_slice(point(far));
                dist[far] = 0.0;
            }
        }
    }
    assign(points, dim, &centroids, &mut assignment, &mut dist);
    let final_inertia = dist.iter().sum::<f64>();
    if history.last().map(|v| v.to_bits()) != Some(final_inertia.to_bits()) {
        history.push(final_inertia);
    }
    Ok(KMeansResult {
        centroids,
        assignment,
        inertia_history: history,
        iterations_run,
    })
}

/// k-means++ restarts per vocabulary build.
pub const KMEANS_RESTARTS: usize = 10;

/// Runs [`kmeans`] `restarts` times with seeds derived from `seed` and keeps
/// the lowest final inertia (the earliest run on ties).
pub fn kmeans_best_of(
    points: &[f64],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
    restarts: usize,
) -> Result<KMeansResult, VocabError> {
    let mut best = kmeans(points, dim, k, iters, seed)?;
    for r in 1..restarts as u64 {
        let run = kmeans(points, dim, k, iters, seed ^ r.wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
        if run.inertia() < best.inertia() {
            best = run;
        }
    }
    Ok(best)
}

/// Clusters trajectories in flattened `(x, y)` space; each centroid becomes
/// an anchor whose headings are reconstructed from its waypoints.
pub fn build_vocabulary(trajs: &[Trajectory], k: usize, iters: usize, seed: u64, dt: f64) -> Result<TrajectoryVocabulary, VocabError> {
    let horizon = trajs.first().map(Trajectory::horizon).unwrap_or(0);
    if let Some(bad) = trajs.iter().find(|t| t.horizon() != horizon) {
        return Err(VocabError::HorizonMismatch {
            expected: horizon,
            got: bad.horizon(),
        });
    }
    let dim = 2 * horizon;
    let points: Vec<f64> = trajs.iter().flat_map(Trajectory::flat_xy).collect();
    let result = kmeans_best_of(&points, dim, k, iters, seed, KMEANS_RESTARTS)?;
    let anchors = result
        .centroids
        .chunks(dim)
        .map(|c| {
            let pts: Vec<Vec2> = c.chunks(2).map(|p| Vec2::new(p[0], p[1])).collect();
            Trajectory::from_xy(&pts)
        })
        .collect();
    let vocab = TrajectoryVocabulary {
        horizon,
        dt,
        anchors,
        source: VocabSource {
            seed,
            sample_count: trajs.len(),
            iterations: iters,
            inertia: result.inertia(),
        },
    };
    // A single anchor is a valid clustering result but not a usable vocabulary.
    if k >= 2 {
        vocab.validate()?;
    }
    Ok(vocab)
}

/// Index of the anchor with the smallest squared `(x, y)` distance; ties go
/// to the lowest index.
pub fn nearest_anchor(traj: &Trajectory, vocab: &TrajectoryVocabulary) -> Result<usize, VocabError> {
    if traj.horizon() != vocab.horizon {
        return Err(VocabError::HorizonMismatch {
            expected: vocab.horizon,
            got: traj.horizon(),
        });
    }
    let mut best = (0, f64::INFINITY);
    for (i, a) in vocab.anchors.iter().enumerate() {
        let d = traj.squared_distance(a)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_rollout_has_zero_headings() {
        let t = rollout(&[2.0; 4], &[0.0; 4], 0.5);
        assert_eq!(t.positions()[3], Vec2::new(4.0, 0.0));
        assert!(t.poses().iter().all(|p| p.heading == 0.0));
    }

    #[test]
    fn stationary_steps_keep_previous_heading() {
        let t = Trajectory::from_xy(&[Vec2::new(0.0, 1.0), Vec2::new(0.0, 1.0), Vec2::new(-1.0, 1.0)]);
        let h: Vec<f64> = t.poses().iter().map(|p| p.heading).collect();
        assert!((h[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(h[0], h[1]);
        assert_eq!(h[2], std::f64::consts::PI);
    }

    #[test]
    fn invalid_kinematics_are_rejected() {
        let p = KinematicParams {
            v_max: 0.0,
            ..Default::default()
        };
        assert!(matches!(sample_trajectories(0, 4, &p), Err(VocabError::InvalidKinematics(_))));
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let t = rollout(&[1.0; 3], &[0.0; 3], 0.5);
        let trajs = vec![t.clone(), t.clone(), t];
        assert!(matches!(
            build_vocabulary(&trajs, 2, 10, 0, 0.5),
            Err(VocabError::TooFewDistinct { k: 2, distinct: 1 })
        ));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let trajs = sample_trajectories(5, 200, &KinematicParams::default()).unwrap();
        let v = build_vocabulary(&trajs, 6, 50, 1, 0.5).unwrap();
        let back = TrajectoryVocabulary::from_json_str(&v.to_json_string()).unwrap();
        assert_eq!(back, v);
        for (a, b) in v.anchors.iter().zip(&back.anchors) {
            for (p, q) in a.poses().iter().zip(b.poses()) {
                assert_eq!(p.x.to_bits(), q.x.to_bits());
                assert_eq!(p.heading.to_bits(), q.heading.to_bits());
            }
        }
    }
}
