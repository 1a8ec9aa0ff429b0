//! Trajectories, finite-difference kinematics, and the prototype bank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Waypoints per trajectory.
pub const WAYPOINTS: usize = 8;
/// Seconds between consecutive waypoints.
pub const TICK_S: f64 = 0.5;
/// Planning horizon in seconds.
pub const HORIZON_S: f64 = WAYPOINTS as f64 * TICK_S;
/// Displacement (m) below which a waypoint keeps the previous heading.
pub const MIN_HEADING_STEP: f64 = 0.25;

pub const PROTOS_SCHEMA: &str = "cophy-protos/1";

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("waypoint count mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("need at least {needed} distinct expert trajectories, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("prototype bank schema `{found}` is not supported (expected `{expected}`)")]
    Schema { found: String, expected: String },
    #[error("prototype bank parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },
}

/// Pose in meters and radians; `x` forward, `y` to the left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub const ORIGIN: Pose = Pose { x: 0.0, y: 0.0, heading: 0.0 };

    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    /// Expresses a point given in this pose's local frame in the parent frame.
    pub fn to_parent(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.x + lx * c - ly * s, self.y + lx * s + ly * c)
    }

    /// Expresses a parent-frame point in this pose's local frame.
    pub fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        (dx * c + dy * s, -dx * s + dy * c)
    }

    /// Composes a pose expressed in this frame into the parent frame.
    pub fn compose(&self, local: &Pose) -> Pose {
        let (x, y) = self.to_parent(local.x, local.y);
        Pose { x, y, heading: wrap_angle(self.heading + local.heading) }
    }
}

/// Maps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// `WAYPOINTS` ego-frame poses at `TICK_S` spacing, starting one tick ahead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Pose>,
}

impl Trajectory {
    /// Builds a trajectory from positions, deriving headings from the
    /// direction of travel. The heading is only updated once the path has
    /// moved at least [`MIN_HEADING_STEP`] from the point of the last update
    /// (zero before that), so centimetre jitter at standstill cannot swing
    /// the footprint.
    pub fn from_xy(points: &[(f64, f64)]) -> Self {
        let mut prev = (0.0, 0.0);
        let mut heading = 0.0;
        let waypoints = points
            .iter()
            .map(|&(x, y)| {
                let (dx, dy) = (x - prev.0, y - prev.1);
                if dx.hypot(dy) >= MIN_HEADING_STEP {
                    heading = wrap_angle(dy.atan2(dx));
                    prev = (x, y);
                }
                Pose { x, y, heading }
            })
            .collect();
        Self { waypoints }
    }

    /// Inverse of [`Trajectory::flat_xy`].
    pub fn from_flat(values: &[f64]) -> Self {
        let pts: Vec<(f64, f64)> = values.chunks(2).map(|c| (c[0], c[1])).collect();
        Self::from_xy(&pts)
    }

    /// `[x0, y0, x1, y1, ...]`.
    pub fn flat_xy(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn last(&self) -> Pose {
        *self.waypoints.last().expect("non-empty trajectory")
    }

    /// Pose at `t` seconds, linearly interpolated; `t = 0` is the origin.
    pub fn pose_at(&self, t: f64) -> Pose {
        let u = (t / TICK_S).max(0.0);
        let i = u.floor() as usize;
        let frac = u - i as f64;
        let at = |k: usize| -> Pose {
            if k == 0 {
                Pose::ORIGIN
            } else {
                self.waypoints[(k - 1).min(self.waypoints.len() - 1)]
            }
        };
        let (a, b) = (at(i), at(i + 1));
        if frac == 0.0 || i >= self.waypoints.len() {
            return a;
        }
        let dh = wrap_angle(b.heading - a.heading);
        Pose {
            x: a.x + frac * (b.x - a.x),
            y: a.y + frac * (b.y - a.y),
            heading: wrap_angle(a.heading + frac * dh),
        }
    }

    pub fn mean_lateral(&self) -> f64 {
        self.waypoints.iter().map(|p| p.y).sum::<f64>() / self.waypoints.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.waypoints.iter().all(|p| p.x.is_finite() && p.y.is_finite() && p.heading.is_finite())
    }
}

/// Sum of absolute x/y differences over all waypoints.
pub fn l1_loss(pred: &Trajectory, target: &Trajectory) -> Result<f64, TrajectoryError> {
    if pred.len() != target.len() {
        return Err(TrajectoryError::Shape(pred.len(), target.len()));
    }
    Ok(pred
        .waypoints
        .iter()
        .zip(&target.waypoints)
        .map(|(a, b)| (a.x - b.x).abs() + (a.y - b.y).abs())
        .sum())
}

/// Mean Euclidean waypoint distance.
pub fn mean_l2(a: &Trajectory, b: &Trajectory) -> f64 {
    a.waypoints
        .iter()
        .zip(&b.waypoints)
        .map(|(p, q)| (p.x - q.x).hypot(p.y - q.y))
        .sum::<f64>()
        / a.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicProfile {
    /// `v0` followed by the speed of each inter-waypoint segment.
    pub speeds: Vec<f64>,
    pub accelerations: Vec<f64>,
    pub jerks: Vec<f64>,
    pub mean_abs_accel: f64,
    pub mean_abs_jerk: f64,
    /// Longitudinal coordinate of the last waypoint.
    pub final_x: f64,
}

impl KinematicProfile {
    pub fn final_speed(&self) -> f64 {
        *self.speeds.last().unwrap_or(&0.0)
    }
}

/// Finite-difference kinematics. Segment speeds come from consecutive
/// waypoint displacements, with `v0` prepended as the speed at the origin.
pub fn kinematics(traj: &Trajectory, v0: f64) -> KinematicProfile {
    let mut speeds = vec![v0];
    for w in traj.waypoints.windows(2) {
        speeds.push((w[1].x - w[0].x).hypot(w[1].y - w[0].y) / TICK_S);
    }
    let accelerations: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / TICK_S).collect();
    let jerks: Vec<f64> = accelerations.windows(2).map(|w| (w[1] - w[0]) / TICK_S).collect();
    let mean_abs = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64 };
    KinematicProfile {
        mean_abs_accel: mean_abs(&accelerations),
        mean_abs_jerk: mean_abs(&jerks),
        final_x: traj.waypoints.last().map_or(0.0, |p| p.x),
        speeds,
        accelerations,
        jerks,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub schema: String,
    pub seed: u64,
    /// SHA-256 over the flattened source corpus.
    pub corpus_digest: String,
    pub prototypes: Vec<Trajectory>,
}

/// Outcome of a clustering run, including the objective after each pass.
#[derive(Clone, Debug)]
pub struct ClusterReport {
    pub bank: PrototypeBank,
    pub objective_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn corpus_digest(experts: &[Trajectory]) -> String {
    let mut h = Sha256::new();
    for t in experts {
        for v in t.flat_xy() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrajectoryError> {
        #[derive(Deserialize)]
        struct Tag {
            schema: String,
        }
        let to_err = |e: serde_json::Error| TrajectoryError::Parse {
            offset: crate::scenario::byte_offset(text, e.line(), e.column()),
            detail: e.to_string(),
        };
        let tag: Tag = serde_json::from_str(text).map_err(to_err)?;
        if tag.schema != PROTOS_SCHEMA {
            return Err(TrajectoryError::Schema { found: tag.schema, expected: PROTOS_SCHEMA.into() });
        }
        serde_json::from_str(text).map_err(to_err)
    }

    /// Index of the prototype nearest (mean L2) to `traj`.
    pub fn nearest(&self, traj: &Trajectory) -> (usize, f64) {
        self.prototypes
            .iter()
            .enumerate()
            .map(|(i, p)| (i, mean_l2(p, traj)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
    }
}

/// k-means over flattened waypoint vectors with k-means++ seeding.
pub fn cluster_prototypes(experts: &[Trajectory], n: usize, seed: u64) -> Result<ClusterReport, TrajectoryError> {
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(experts.len());
    for t in experts {
        let p = t.flat_xy();
        if !points.contains(&p) {
            points.push(p);
        }
    }
    if n == 0 || points.len() < n {
        return Err(TrajectoryError::InsufficientData { needed: n.max(1), got: points.len() });
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut best: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < n {
        let total: f64 = best.iter().sum();
        let pick = if total <= 0.0 {
            best.iter().position(|d| *d > 0.0).unwrap_or(0)
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, d) in best.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        };
        let c = points[pick].clone();
        for (b, p) in best.iter_mut().zip(&points) {
            *b = b.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let mut assign = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..200 {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(&points) {
            let k = nearest_centroid(p, &centroids);
            if *a != k {
                *a = k;
                changed = true;
            }
        }
        // Reseed empty clusters from the point farthest from its centroid.
        for k in 0..n {
            if assign.contains(&k) {
                continue;
            }
            let (far, _) = points
                .iter()
                .enumerate()
                .filter(|(i, _)| assign.iter().filter(|a| **a == assign[*i]).count() > 1)
                .map(|(i, p)| (i, sq_dist(p, &centroids[assign[i]])))
                .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            assign[far] = k;
            centroids[k] = points[far].clone();
            changed = true;
        }
        let mut sums = vec![vec![0.0; dim]; n];
        let mut counts = vec![0usize; n];
        for (a, p) in assign.iter().zip(&points) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for k in 0..n {
            for (c, s) in centroids[k].iter_mut().zip(&sums[k]) {
                *c = s / counts[k] as f64;
            }
        }
        let objective: f64 = assign.iter().zip(&points).map(|(a, p)| sq_dist(p, &centroids[*a])).sum();
        history.push(objective);
        if !changed {
            break;
        }
    }

    let bank = PrototypeBank {
        schema: PROTOS_SCHEMA.into(),
        seed,
        corpus_digest: corpus_digest(experts),
        prototypes: centroids.iter().map(|c| Trajectory::from_flat(c)).collect(),
    };
    Ok(ClusterReport { bank, objective_history: history })
}

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy};

    fn straight(speed: f64, lateral: f64) -> Trajectory {
        let pts: Vec<_> = (1..=WAYPOINTS).map(|i| (speed * TICK_S * i as f64, lateral)).collect();
        Trajectory::from_xy(&pts)
    }

    #[test]
    fn l1_identity_and_shift() {
        let t = straight(4.0, 0.0);
        assert_eq!(l1_loss(&t, &t).unwrap(), 0.0);
        let shifted = Trajectory::from_xy(&t.waypoints.iter().map(|p| (p.x + 1.0, p.y)).collect::<Vec<_>>());
        assert_eq!(l1_loss(&shifted, &t).unwrap(), 8.0);
    }

    #[test]
    fn standstill_jitter_keeps_heading() {
        let t = Trajectory::from_xy(&[(2.0, 0.0), (4.0, 0.0), (4.03, 0.05), (4.01, 0.09), (4.02, 0.02)]);
        assert!(t.waypoints.iter().all(|p| p.heading == 0.0));
        // Slow creep along +y turns the heading once the accumulated move is long enough.
        let creep = Trajectory::from_xy(&[(1.0, 0.0), (1.0, 0.15), (1.0, 0.3)]);
        assert_eq!(creep.waypoints[1].heading, 0.0);
        assert!((creep.waypoints[2].heading - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn l1_rejects_mismatched_lengths() {
        let a = straight(3.0, 0.0);
        let b = Trajectory::from_xy(&[(1.0, 0.0)]);
        assert!(matches!(l1_loss(&a, &b), Err(TrajectoryError::Shape(8, 1))));
    }

    #[test]
    fn uniform_motion_has_no_acceleration_or_jerk() {
        let k = kinematics(&straight(4.0, 1.0), 4.0);
        assert!(k.mean_abs_accel.abs() < 1e-12);
        assert!(k.mean_abs_jerk.abs() < 1e-12);
        assert_eq!(k.final_x, 16.0);
    }

    #[test]
    fn growing_segments_match_hand_differences() {
        // Segment lengths 1, 2, ..., 8 m: positions are triangular numbers.
        let mut x = 0.0;
        let pts: Vec<_> = (1..=8)
            .map(|i| {
                x += i as f64;
                (x, 0.0)
            })
            .collect();
        let k = kinematics(&Trajectory::from_xy(&pts), 2.0);
        // Speeds: v0 = 2, then (3-1)/0.5 = 4, 6, ..., 16.
        let want_speeds: Vec<f64> = std::iter::once(2.0).chain((2..=8).map(|i| 2.0 * i as f64)).collect();
        assert_eq!(k.speeds, want_speeds);
        // Every speed step is 2 m/s over 0.5 s.
        assert!(k.accelerations.iter().all(|a| (a - 4.0).abs() < 1e-12));
        assert!((k.mean_abs_accel - 4.0).abs() < 1e-12);
        assert!(k.mean_abs_jerk.abs() < 1e-12);
        assert_eq!(k.final_x, 36.0);
    }

    #[test]
    fn single_cluster_is_corpus_mean() {
        let corpus: Vec<_> = (0..5).map(|i| straight(3.0 + i as f64 * 0.3, i as f64 * 0.2)).collect();
        let report = cluster_prototypes(&corpus, 1, 3).unwrap();
        let mean: Vec<f64> = (0..16)
            .map(|j| corpus.iter().map(|t| t.flat_xy()[j]).sum::<f64>() / corpus.len() as f64)
            .collect();
        for (a, b) in report.bank.prototypes[0].flat_xy().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_equals_corpus_when_sizes_match() {
        let corpus: Vec<_> = (0..6).map(|i| straight(2.0 + i as f64, (i % 3) as f64)).collect();
        let bank = cluster_prototypes(&corpus, 6, 11).unwrap().bank;
        for t in &corpus {
            assert!(bank.prototypes.iter().any(|p| mean_l2(p, t) < 1e-12));
        }
    }

    #[test]
    fn too_few_experts_is_an_error() {
        let corpus = vec![straight(3.0, 0.0), straight(3.0, 0.0)];
        let err = cluster_prototypes(&corpus, 2, 0).unwrap_err();
        assert!(matches!(err, TrajectoryError::InsufficientData { needed: 2, got: 1 }));
    }

    #[test]
    fn two_separated_arcs_recover_their_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arc = |side: f64, jitter: f64| {
            let pts: Vec<_> = (1..=8)
                .map(|i| {
                    let t = i as f64 / 8.0;
                    (16.0 * t + jitter, side * 6.0 * t * t + jitter)
                })
                .collect();
            Trajectory::from_xy(&pts)
        };
        let mut left = Vec::new();
        let mut right = Vec::new();
        for _ in 0..20 {
            left.push(arc(1.0, rng.gen_range(-0.2..0.2)));
            right.push(arc(-1.0, rng.gen_range(-0.2..0.2)));
        }
        let corpus: Vec<_> = left.iter().chain(&right).cloned().collect();
        let bank = cluster_prototypes(&corpus, 2, 1).unwrap().bank;
        // Brute-force oracle: with two well-separated groups, the optimal
        // partition is the two groups; compare against each group's mean.
        for group in [&left, &right] {
            let mean: Vec<f64> = (0..16)
                .map(|j| group.iter().map(|t| t.flat_xy()[j]).sum::<f64>() / group.len() as f64)
                .collect();
            let mean_t = Trajectory::from_flat(&mean);
            let (_, d) = bank.nearest(&mean_t);
            assert!(d < 0.1, "centroid {d} m from its arc mean");
        }
    }

    #[test]
    fn kmeans_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let corpus: Vec<_> = (0..120)
            .map(|_| {
                let v = rng.gen_range(1.0..6.0);
                let lat = rng.gen_range(-3.5..3.5);
                let pts: Vec<_> = (1..=8).map(|i| (v * 0.5 * i as f64, lat * i as f64 / 8.0)).collect();
                Trajectory::from_xy(&pts)
            })
            .collect();
        let report = cluster_prototypes(&corpus, 12, 4).unwrap();
        for w in report.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", report.objective_history);
        }
        let again = cluster_prototypes(&corpus, 12, 4).unwrap();
        assert_eq!(report.bank, again.bank);
    }

    #[test]
    fn bank_json_round_trip_and_schema_check() {
        let corpus: Vec<_> = (0..4).map(|i| straight(2.0 + i as f64, 0.0)).collect();
        let bank = cluster_prototypes(&corpus, 2, 0).unwrap().bank;
        assert_eq!(PrototypeBank::from_json(&bank.to_json()).unwrap(), bank);
        let bad = bank.to_json().replace("cophy-protos/1", "cophy-protos/0");
        assert!(matches!(PrototypeBank::from_json(&bad), Err(TrajectoryError::Schema { .. })));
    }

    #[test]
    fn pose_interpolation_hits_waypoints() {
        let t = straight(4.0, 0.0);
        assert_eq!(t.pose_at(0.0), Pose::ORIGIN);
        assert_eq!(t.pose_at(2.0), t.waypoints[3]);
        assert!((t.pose_at(0.25).x - 1.0).abs() < 1e-12);
    }

    fn arb_traj() -> impl Strategy<Value = Trajectory> {
        prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), WAYPOINTS).prop_map(|v| Trajectory::from_xy(&v))
    }

    proptest! {
        #[test]
        fn l1_is_a_metric(a in arb_traj(), b in arb_traj(), c in arb_traj()) {
            let ab = l1_loss(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, l1_loss(&b, &a).unwrap());
            prop_assert!(l1_loss(&a, &c).unwrap() <= ab + l1_loss(&b, &c).unwrap() + 1e-9);
            prop_assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
            if a != b { prop_assert!(ab > 0.0); }
        }

        #[test]
        fn lateral_shift_preserves_comfort_terms(a in arb_traj(), dy in -5.0..5.0f64, v0 in 0.0..8.0f64) {
            let shifted = Trajectory::from_xy(&a.waypoints.iter().map(|p| (p.x, p.y + dy)).collect::<Vec<_>>());
            let (k1, k2) = (kinematics(&a, v0), kinematics(&shifted, v0));
            prop_assert!((k1.mean_abs_accel - k2.mean_abs_accel).abs() < 1e-9);
            prop_assert!((k1.mean_abs_jerk - k2.mean_abs_jerk).abs() < 1e-9);
        }

        #[test]
        fn flat_round_trip(a in arb_traj()) {
            let b = Trajectory::from_flat(&a.flat_xy());
            prop_assert_eq!(a.flat_xy(), b.flat_xy());
        }
    }
}
