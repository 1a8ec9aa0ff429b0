//! Synthetic ground-truth driving worlds.
//!
//! A [`Scenario`] holds world-frame road geometry, constant-velocity agent
//! tracks, a traffic-light schedule, and a rule-based expert trajectory. The
//! ego starts at the world origin heading along `+x`, so the world frame and
//! the planning-time ego frame coincide.

mod generate;
mod grid;
mod layout;

use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::command::Command;
use crate::trajectory::{Pose, Trajectory, TICK_S, WAYPOINTS};

pub use generate::generate_scenario;
pub use grid::{
    GridSpec, SemanticGrid, CH_CROSSWALK, CH_DIVIDER, CH_DRIVABLE, CH_OBSTACLE, CH_STOP_ZONE, NUM_CHANNELS,
};
pub use layout::{Centerline, Divider, Lane, Rect, RoadLayout};

pub const SCN_SCHEMA: &str = "cophy-scn/1";
/// Ticks covered by a scenario after the initial state.
pub const HORIZON_TICKS: usize = WAYPOINTS;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("tick {tick} is outside the scenario horizon 0..={horizon}")]
    Horizon { tick: usize, horizon: usize },
    #[error("scenario parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },
    #[error("scenario schema `{found}` is not supported (expected `{expected}`)")]
    Version { found: String, expected: String },
    #[error("unknown template `{0}` (expected one of straight, fork, red_light, lead_vehicle, double_yellow, lane_change)")]
    UnknownTemplate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    Fork,
    RedLight,
    LeadVehicle,
    DoubleYellow,
    LaneChange,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::Straight,
        Template::Fork,
        Template::RedLight,
        Template::LeadVehicle,
        Template::DoubleYellow,
        Template::LaneChange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::Fork => "fork",
            Template::RedLight => "red_light",
            Template::LeadVehicle => "lead_vehicle",
            Template::DoubleYellow => "double_yellow",
            Template::LaneChange => "lane_change",
        }
    }
}

impl FromStr for Template {
    type Err = ScenarioError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Template::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| ScenarioError::UnknownTemplate(s.to_string()))
    }
}

impl std::fmt::Display for Template {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Oriented-rectangle vehicle geometry in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Footprint {
    pub const PASSENGER_CAR: Footprint = Footprint { length: 4.6, width: 1.9 };

    /// Whether a parent-frame point lies inside the rectangle centered on `pose`.
    pub fn contains(&self, pose: &Pose, x: f64, y: f64) -> bool {
        let (lx, ly) = pose.to_local(x, y);
        lx.abs() <= 0.5 * self.length && ly.abs() <= 0.5 * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub footprint: Footprint,
    /// One world-frame pose per tick, `0..=HORIZON_TICKS`.
    pub poses: Vec<Pose>,
    pub velocity: f64,
}

impl AgentTrack {
    pub fn constant_velocity(footprint: Footprint, start: Pose, velocity: f64) -> Self {
        let poses = (0..=HORIZON_TICKS).map(|k| Self::advance(&start, velocity, k as f64 * TICK_S)).collect();
        Self { footprint, poses, velocity }
    }

    fn advance(start: &Pose, v: f64, t: f64) -> Pose {
        let (s, c) = start.heading.sin_cos();
        Pose { x: start.x + v * t * c, y: start.y + v * t * s, heading: start.heading }
    }

    /// World pose at `t` seconds (constant velocity from the initial pose).
    pub fn pose_at(&self, t: f64) -> Pose {
        Self::advance(&self.poses[0], self.velocity, t)
    }

    pub fn velocity_vector(&self) -> (f64, f64) {
        let (s, c) = self.poses[0].heading.sin_cos();
        (self.velocity * c, self.velocity * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Green,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightEntry {
    pub tick: usize,
    pub state: LightState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub pose: Pose,
    pub speed: f64,
    pub footprint: Footprint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema: String,
    pub id: String,
    pub seed: u64,
    pub template: Template,
    /// Index into the command vocabulary.
    pub intent: usize,
    pub ego: EgoState,
    pub layout: RoadLayout,
    pub agents: Vec<AgentTrack>,
    pub light_schedule: Vec<LightEntry>,
    pub expert: Trajectory,
    pub initial_grid: SemanticGrid,
}

impl Scenario {
    pub fn intent_command(&self) -> Command {
        Command::from_index(self.intent).unwrap_or(Command::ProceedStraight)
    }

    pub fn grid_spec(&self) -> GridSpec {
        *self.initial_grid.spec()
    }

    /// Light state at `tick`; no schedule means no signal (treated as green).
    pub fn light_at(&self, tick: usize) -> LightState {
        self.light_schedule
            .iter()
            .filter(|e| e.tick <= tick)
            .max_by_key(|e| e.tick)
            .map_or(LightState::Green, |e| e.state)
    }

    /// Ground-truth raster at `tick` in the frame of `ego_pose` (a world pose).
    pub fn oracle_step(&self, ego_pose: &Pose, tick: usize) -> Result<SemanticGrid, ScenarioError> {
        if tick > HORIZON_TICKS {
            return Err(ScenarioError::Horizon { tick, horizon: HORIZON_TICKS });
        }
        Ok(rasterize(&self.layout, &self.agents, self.light_at(tick), self.grid_spec(), ego_pose, tick as f64 * TICK_S))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        #[derive(Deserialize)]
        struct Tag {
            schema: String,
        }
        let to_err = |e: serde_json::Error| ScenarioError::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            detail: e.to_string(),
        };
        let tag: Tag = serde_json::from_str(text).map_err(to_err)?;
        if tag.schema != SCN_SCHEMA {
            return Err(ScenarioError::Version { found: tag.schema, expected: SCN_SCHEMA.into() });
        }
        serde_json::from_str(text).map_err(to_err)
    }
}

pub(crate) fn rasterize(
    layout: &RoadLayout,
    agents: &[AgentTrack],
    light: LightState,
    spec: GridSpec,
    ego_pose: &Pose,
    t: f64,
) -> SemanticGrid {
    let mut grid = SemanticGrid::zeros(spec);
    let agent_poses: Vec<(Pose, Footprint)> = agents.iter().map(|a| (a.pose_at(t), a.footprint)).collect();
    let zone = if light == LightState::Red { layout.stop_zone } else { None };
    for r in 0..spec.height {
        for c in 0..spec.width {
            let (lx, ly) = spec.cell_center(r, c);
            let (wx, wy) = ego_pose.to_parent(lx, ly);
            if layout.drivable(wx, wy) {
                grid.set(r, c, CH_DRIVABLE, 1.0);
            }
            if agent_poses.iter().any(|(p, f)| f.contains(p, wx, wy)) {
                grid.set(r, c, CH_OBSTACLE, 1.0);
            }
            if layout.divider(wx, wy) {
                grid.set(r, c, CH_DIVIDER, 1.0);
            }
            if layout.crosswalk(wx, wy) {
                grid.set(r, c, CH_CROSSWALK, 1.0);
            }
            if zone.is_some_and(|z| z.contains(wx, wy)) {
                grid.set(r, c, CH_STOP_ZONE, 1.0);
            }
        }
    }
    grid
}

/// Converts serde_json's 1-based line/column into a byte offset.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Writes scenarios as newline-delimited JSON.
pub fn write_batch<W: Write>(mut out: W, scenarios: &[Scenario]) -> Result<(), ScenarioError> {
    for s in scenarios {
        out.write_all(s.to_json().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a newline-delimited batch; error offsets are relative to the batch start.
pub fn read_batch<R: BufRead>(input: R) -> Result<Vec<Scenario>, ScenarioError> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in input.split(b'\n') {
        let line = line?;
        let len = line.len() + 1;
        let text = std::str::from_utf8(&line)
            .map_err(|e| ScenarioError::Parse { offset: offset + e.valid_up_to(), detail: "invalid UTF-8".into() })?;
        if !text.trim().is_empty() {
            let s = Scenario::from_json(text).map_err(|e| match e {
                ScenarioError::Parse { offset: o, detail } => ScenarioError::Parse { offset: offset + o, detail },
                other => other,
            })?;
            out.push(s);
        }
        offset += len;
    }
    Ok(out)
}

pub fn load_batch(path: &std::path::Path) -> Result<Vec<Scenario>, ScenarioError> {
    let f = std::fs::File::open(path)?;
    read_batch(std::io::BufReader::new(f))
}

/// Scenario seed for the `index`-th draw of a batch built from `base_seed`.
pub fn batch_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// `count` scenarios per template, in template-major order.
pub fn generate_batch(templates: &[Template], count: usize, base_seed: u64) -> Vec<Scenario> {
    use rayon::prelude::*;
    let jobs: Vec<(Template, u64)> = templates
        .iter()
        .flat_map(|t| (0..count).map(move |i| (*t, batch_seed(base_seed, i))))
        .collect();
    jobs.par_iter().map(|(t, s)| generate_scenario(*s, *t)).collect()
}

#[cfg(test)]
mod tests;
