//! Physical and cognitive rewards computed on rollout maps.

use serde::{Deserialize, Serialize};

use crate::neural::logistic;
use crate::scenario::{AgentTrack, Footprint, GridSpec, SemanticGrid, CH_DRIVABLE, CH_OBSTACLE};
use crate::trajectory::{kinematics, Pose, Trajectory, HORIZON_S};

/// Distances beyond this are treated as "no agent in range".
pub const D_MIN_CAP: f64 = 32.0;

/// Where the time-to-collision term measures its minimum distance from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtcSource {
    /// Centers of the scenario's agent tracks.
    #[default]
    Tracks,
    /// Thresholded obstacle cells of the rollout maps.
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub w_nc: f64,
    pub w_dac: f64,
    pub w_ep: f64,
    pub w_ttc: f64,
    pub w_comf: f64,
    /// Scale applied to the cognitive reward; 0 disables it.
    pub w_co: f64,
    pub horizon_s: f64,
    pub d_safe: f64,
    pub delta_d: f64,
    pub lambda_a: f64,
    pub lambda_j: f64,
    pub obstacle_threshold: f64,
    pub drivable_threshold: f64,
    pub ttc_source: TtcSource,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_nc: 1.0,
            w_dac: 1.0,
            w_ep: 0.4,
            w_ttc: 0.4,
            w_comf: 0.2,
            w_co: 1.0,
            horizon_s: HORIZON_S,
            d_safe: 5.0,
            delta_d: 2.0,
            lambda_a: 2.0,
            lambda_j: 5.0,
            obstacle_threshold: 0.5,
            drivable_threshold: 0.5,
            ttc_source: TtcSource::Tracks,
        }
    }
}

impl RewardConfig {
    /// Physical weights zeroed: only the cognitive term remains.
    pub fn cognitive_only(self) -> Self {
        Self { w_nc: 0.0, w_dac: 0.0, w_ep: 0.0, w_ttc: 0.0, w_comf: 0.0, ..self }
    }

    pub fn physical_only(self) -> Self {
        Self { w_co: 0.0, ..self }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub comf: f64,
    pub co: f64,
    pub total: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("rollout has no steps")]
    EmptyRollout,
}

/// Cells covered by a footprint, plus whether part of it fell off the grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FootprintCells {
    pub cells: Vec<(usize, usize)>,
    pub clipped: bool,
}

/// Rasterizes an oriented rectangle given in the grid's ego frame. A cell is
/// covered iff its center lies inside the rectangle.
pub fn footprint_cells(pose: &Pose, fp: &Footprint, spec: &GridSpec) -> FootprintCells {
    let mut out = FootprintCells::default();
    if fp.length <= 0.0 || fp.width <= 0.0 {
        return out;
    }
    let (hl, hw) = (0.5 * fp.length, 0.5 * fp.width);
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let (x, y) = pose.to_parent(sx * hl, sy * hw);
        let (r, c) = spec.point_to_cell(x, y);
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        cmin = cmin.min(c);
        cmax = cmax.max(c);
    }
    let (er, ec) = spec.ego_cell();
    for r in rmin.floor() as i64..=rmax.ceil() as i64 {
        for c in cmin.floor() as i64..=cmax.ceil() as i64 {
            let x = (er as i64 - r) as f64 * spec.resolution;
            let y = (ec as i64 - c) as f64 * spec.resolution;
            if !fp.contains(pose, x, y) {
                continue;
            }
            if r < 0 || c < 0 || r >= spec.height as i64 || c >= spec.width as i64 {
                out.clipped = true;
            } else {
                out.cells.push((r as usize, c as usize));
            }
        }
    }
    out
}

/// Whether the footprint overlaps thresholded cells of `ch`.
pub fn overlaps(grid: &SemanticGrid, cells: &FootprintCells, ch: usize, threshold: f64) -> bool {
    cells.cells.iter().any(|&(r, c)| grid.get(r, c, ch) > threshold)
}

/// Whether every footprint cell is thresholded-on in `ch` and none was clipped.
pub fn contained(grid: &SemanticGrid, cells: &FootprintCells, ch: usize, threshold: f64) -> bool {
    !cells.clipped && cells.cells.iter().all(|&(r, c)| grid.get(r, c, ch) > threshold)
}

pub fn ep_reward(x_k: f64, v_ego: f64, cfg: &RewardConfig) -> f64 {
    let mu = v_ego * cfg.horizon_s;
    let sigma = (0.3 * mu).max(2.0);
    logistic((x_k - mu) / sigma)
}

pub fn ttc_reward(d_min: f64, cfg: &RewardConfig) -> f64 {
    logistic((d_min.min(D_MIN_CAP) - cfg.d_safe) / cfg.delta_d)
}

pub fn comfort_reward(mean_abs_accel: f64, mean_abs_jerk: f64, cfg: &RewardConfig) -> f64 {
    (-mean_abs_accel / cfg.lambda_a).exp() * (-mean_abs_jerk / cfg.lambda_j).exp()
}

/// Five physical terms for one candidate. `maps[k]` is the decoded map after
/// rollout step `k + 1`, covering `(k + 1) / K` of the horizon; both maps and
/// candidate live in the planning frame.
pub fn physical_reward(
    candidate: &Trajectory,
    maps: &[SemanticGrid],
    v_ego: f64,
    footprint: &Footprint,
    agents: &[AgentTrack],
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    if maps.is_empty() {
        return Err(RewardError::EmptyRollout);
    }
    let k_steps = maps.len();
    let (mut nc, mut dac) = (1.0, 1.0);
    let mut d_min = D_MIN_CAP;
    for (k, grid) in maps.iter().enumerate() {
        let t = cfg.horizon_s * (k + 1) as f64 / k_steps as f64;
        let pose = candidate.pose_at(t);
        let cells = footprint_cells(&pose, footprint, grid.spec());
        if overlaps(grid, &cells, CH_OBSTACLE, cfg.obstacle_threshold) {
            nc = 0.0;
        }
        if !contained(grid, &cells, CH_DRIVABLE, cfg.drivable_threshold) {
            dac = 0.0;
        }
        match cfg.ttc_source {
            TtcSource::Tracks => {
                for a in agents {
                    let ap = a.pose_at(t);
                    d_min = d_min.min((ap.x - pose.x).hypot(ap.y - pose.y));
                }
            }
            TtcSource::Predicted => d_min = d_min.min(nearest_obstacle(grid, &pose, cfg.obstacle_threshold)),
        }
    }
    let kin = kinematics(candidate, v_ego);
    let mut b = RewardBreakdown {
        nc,
        dac,
        ep: ep_reward(kin.final_x, v_ego, cfg),
        ttc: ttc_reward(d_min, cfg),
        comf: comfort_reward(kin.mean_abs_accel, kin.mean_abs_jerk, cfg),
        co: 0.0,
        total: 0.0,
    };
    b.total = total_reward(&b, cfg);
    Ok(b)
}

/// Distance from `pose` to the closest obstacle cell center above `threshold`.
fn nearest_obstacle(grid: &SemanticGrid, pose: &Pose, threshold: f64) -> f64 {
    let spec = grid.spec();
    let mut best = f64::INFINITY;
    for r in 0..spec.height {
        for c in 0..spec.width {
            if grid.get(r, c, CH_OBSTACLE) > threshold {
                let (x, y) = spec.cell_center(r, c);
                best = best.min((x - pose.x).hypot(y - pose.y));
            }
        }
    }
    best
}

/// Attaches a cognitive reward to a physical breakdown and recomputes the total.
pub fn with_cognitive(mut b: RewardBreakdown, co: f64, cfg: &RewardConfig) -> RewardBreakdown {
    b.co = co;
    b.total = total_reward(&b, cfg);
    b
}

pub fn total_reward(b: &RewardBreakdown, cfg: &RewardConfig) -> f64 {
    cfg.w_nc * b.nc + cfg.w_dac * b.dac + cfg.w_ep * b.ep + cfg.w_ttc * b.ttc + cfg.w_comf * b.comf + cfg.w_co * b.co
}
