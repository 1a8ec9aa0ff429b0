//! Ground-truth sub-metrics, PDMS/EPDMS aggregation, and reports.

mod report;

use serde::{Deserialize, Serialize};

use crate::rewards::{contained, footprint_cells, overlaps};
use crate::scenario::{Scenario, ScenarioError, CH_DRIVABLE, CH_OBSTACLE, CH_STOP_ZONE};
use crate::trajectory::{kinematics, wrap_angle, Pose, Trajectory, TICK_S, WAYPOINTS};

pub use report::{
    evaluate_expert, evaluate_policy, evaluate_scenario, CognitiveMode, EvalOptions, Report, ScenarioRow, Summary,
    TemplateSummary, REPORT_SCHEMA,
};

/// Time-to-contact threshold in seconds.
pub const TTC_HORIZON_S: f64 = 1.0;
pub const COMFORT_MAX_ACCEL: f64 = 3.0;
pub const COMFORT_MAX_JERK: f64 = 6.0;
/// Lateral offset at which lane keeping reaches zero.
pub const LK_NORMALIZER: f64 = 1.0;
/// Expert progress below this counts as "expert did not move".
pub const EP_MIN_PROGRESS: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("trajectory has {got} waypoints but the scenario horizon is {expected}")]
    Horizon { got: usize, expected: usize },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Pipeline(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubScores {
    pub nc: f64,
    pub dac: f64,
    pub ddc: f64,
    pub tl: f64,
    pub ep: f64,
    pub ttc: f64,
    pub c: f64,
    pub lk: f64,
    pub ec: f64,
}

impl SubScores {
    pub const PERFECT: SubScores =
        SubScores { nc: 1.0, dac: 1.0, ddc: 1.0, tl: 1.0, ep: 1.0, ttc: 1.0, c: 1.0, lk: 1.0, ec: 1.0 };
}

pub fn pdms(s: &SubScores) -> f64 {
    s.nc * s.dac * (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.c) / 12.0
}

pub fn epdms(s: &SubScores) -> f64 {
    s.nc * s.dac * s.ddc * s.tl * (5.0 * s.ttc + 2.0 * s.c + 5.0 * s.ep + 2.0 * s.lk + 2.0 * s.ec) / 16.0
}

/// Half extents of a rectangle's axis-aligned bounding box after rotating it by `dh`.
fn rotated_extents(length: f64, width: f64, dh: f64) -> (f64, f64) {
    let (s, c) = dh.sin_cos();
    (0.5 * (c.abs() * length + s.abs() * width), 0.5 * (s.abs() * length + c.abs() * width))
}

/// Whether ego and any agent come into contact within the TTC horizon when
/// both are projected at constant velocity from tick `k`.
fn projected_contact(scenario: &Scenario, pose: &Pose, ego_vel: (f64, f64), k: usize) -> bool {
    let fp = scenario.ego.footprint;
    let t0 = k as f64 * TICK_S;
    let steps = 10;
    for i in 0..=steps {
        let tau = TTC_HORIZON_S * i as f64 / steps as f64;
        let ego = Pose { x: pose.x + ego_vel.0 * tau, y: pose.y + ego_vel.1 * tau, heading: pose.heading };
        for a in &scenario.agents {
            let ap = a.pose_at(t0 + tau);
            let (dx, dy) = ego.to_local(ap.x, ap.y);
            let (ex, ey) = rotated_extents(a.footprint.length, a.footprint.width, ap.heading - ego.heading);
            if dx.abs() < 0.5 * fp.length + ex && dy.abs() < 0.5 * fp.width + ey {
                return true;
            }
        }
    }
    false
}

/// Scores a planning-frame trajectory against the scenario's ground truth at
/// ticks `1..=HORIZON`.
pub fn score_trajectory(scenario: &Scenario, traj: &Trajectory) -> Result<SubScores, EvalError> {
    if traj.len() != WAYPOINTS {
        return Err(EvalError::Horizon { got: traj.len(), expected: WAYPOINTS });
    }
    let spec = scenario.grid_spec();
    let fp = scenario.ego.footprint;
    let mut s = SubScores { ec: 1.0, ..SubScores::PERFECT };
    let mut offsets = 0.0;
    let mut prev = Pose::ORIGIN;
    for (i, pose) in traj.waypoints.iter().enumerate() {
        let k = i + 1;
        let grid = scenario.oracle_step(&Pose::ORIGIN, k)?;
        let cells = footprint_cells(pose, &fp, &spec);
        if overlaps(&grid, &cells, CH_OBSTACLE, 0.5) {
            s.nc = 0.0;
        }
        if !contained(&grid, &cells, CH_DRIVABLE, 0.5) {
            s.dac = 0.0;
        }
        if overlaps(&grid, &cells, CH_STOP_ZONE, 0.5) {
            s.tl = 0.0;
        }

        // Direction compliance against the best-aligned lane under the ego center.
        let aligned = scenario
            .layout
            .lanes
            .iter()
            .filter(|l| l.offset(pose.x, pose.y).is_some())
            .map(|l| wrap_angle(pose.heading - l.heading_at(pose.x)).abs())
            .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))));
        if aligned.is_some_and(|d| d > std::f64::consts::FRAC_PI_2 + 1e-9) {
            s.ddc = 0.0;
        }
        offsets += scenario
            .layout
            .lanes
            .iter()
            .filter(|l| l.drivable)
            .filter_map(|l| l.offset(pose.x, pose.y))
            .map(f64::abs)
            .fold(LK_NORMALIZER, f64::min);

        let vel = ((pose.x - prev.x) / TICK_S, (pose.y - prev.y) / TICK_S);
        if projected_contact(scenario, pose, vel, k) {
            s.ttc = 0.0;
        }
        prev = *pose;
    }
    s.lk = 1.0 - (offsets / WAYPOINTS as f64 / LK_NORMALIZER).clamp(0.0, 1.0);

    let expert_progress = scenario.expert.last().x;
    s.ep = if expert_progress < EP_MIN_PROGRESS {
        1.0
    } else {
        (traj.last().x / expert_progress).clamp(0.0, 1.0)
    };
    let kin = kinematics(traj, scenario.ego.speed);
    s.c = if kin.mean_abs_accel <= COMFORT_MAX_ACCEL && kin.mean_abs_jerk <= COMFORT_MAX_JERK { 1.0 } else { 0.0 };
    Ok(s)
}

#[cfg(test)]
mod tests;
