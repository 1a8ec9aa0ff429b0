use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::wire::{AgentView, CandidateView, EgoView, EpisodeView, Frame, FrameReason, WireGrid};
use crate::command::{Command, Vocabulary};
use crate::eval::{epdms, pdms, score_trajectory, EvalError, SubScores};
use crate::neural::NeuralError;
use crate::planner::{apply_veto, encode_scene, plan_encoded, CognitiveSource};
use crate::policy::Model;
use crate::rewards::{physical_reward, with_cognitive, RewardBreakdown, RewardConfig};
use crate::scenario::{AgentTrack, Scenario, SemanticGrid, HORIZON_TICKS};
use crate::trajectory::{Pose, Trajectory, TICK_S};
use crate::worldmodel::{learned_rollouts, step_tick, Backend};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("unknown command '{text}'")]
    UnknownCommand { text: String, vocabulary: Vec<String> },
    #[error("session '{0}' not found")]
    NotFound(String),
    #[error("step count must be at least 1")]
    BadStep,
    #[error("bad scenario reference: {0}")]
    Scenario(String),
    #[error("planning failed: {0}")]
    Planning(String),
}

impl From<NeuralError> for SessionError {
    fn from(e: NeuralError) -> Self {
        SessionError::Planning(e.to_string())
    }
}

impl From<EvalError> for SessionError {
    fn from(e: EvalError) -> Self {
        SessionError::Planning(e.to_string())
    }
}

/// Planner settings shared by every session of a server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub psi: f64,
    pub backend: Backend,
    pub reward: RewardConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { psi: 0.0, backend: Backend::Learned, reward: RewardConfig::default() }
    }
}

/// Frozen inputs shared read-only by all sessions.
#[derive(Clone)]
pub struct Planner {
    pub model: Arc<Model>,
    pub vocab: Arc<Vocabulary>,
    pub config: SessionConfig,
}

struct PlanResult {
    candidates: Vec<Trajectory>,
    s_phy: Vec<f64>,
    s_co: Vec<f64>,
    rewards: Vec<RewardBreakdown>,
    maps: Vec<Vec<SemanticGrid>>,
    planned: usize,
    selected: usize,
    veto: bool,
}

/// One live driving episode. Every mutating method either commits a fully
/// re-planned state and returns its frame, or fails and leaves the session
/// untouched.
pub struct Session {
    pub id: String,
    scenario: Scenario,
    tick: usize,
    source: CognitiveSource,
    /// Ego pose and speed in the scenario's world frame.
    ego: Pose,
    speed: f64,
    executed: Vec<Pose>,
    last_selected: Option<Trajectory>,
    last: Option<PlanResult>,
}

impl Session {
    pub fn start(planner: &Planner, id: String, scenario: Scenario) -> Result<(Self, Frame), SessionError> {
        let mut s = Self {
            id,
            ego: scenario.ego.pose,
            speed: scenario.ego.speed,
            scenario,
            tick: 0,
            source: CognitiveSource::Distilled,
            executed: Vec::new(),
            last_selected: None,
            last: None,
        };
        let plan = s.replan(planner, s.source)?;
        let frame = s.commit(FrameReason::Start, s.source, plan);
        Ok((s, frame))
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn tick(&self) -> usize {
        self.tick
    }

    pub fn source(&self) -> CognitiveSource {
        self.source
    }

    pub fn is_terminal(&self) -> bool {
        self.tick >= HORIZON_TICKS
    }

    /// Switches the cognitive source to an exact vocabulary command.
    pub fn command(&mut self, planner: &Planner, text: &str) -> Result<Frame, SessionError> {
        let cmd = Command::from_text(text).ok_or_else(|| SessionError::UnknownCommand {
            text: text.to_string(),
            vocabulary: Vocabulary::texts().into_iter().map(String::from).collect(),
        })?;
        self.switch(planner, CognitiveSource::Command(cmd), FrameReason::Command)
    }

    /// Restores the distilled cognitive source.
    pub fn clear(&mut self, planner: &Planner) -> Result<Frame, SessionError> {
        self.switch(planner, CognitiveSource::Distilled, FrameReason::Clear)
    }

    fn switch(&mut self, planner: &Planner, source: CognitiveSource, reason: FrameReason) -> Result<Frame, SessionError> {
        if self.is_terminal() {
            self.source = source;
            return Ok(self.terminal_frame());
        }
        let plan = self.replan(planner, source)?;
        Ok(self.commit(reason, source, plan))
    }

    /// Executes the selected plan's first waypoint `ticks` times, re-planning
    /// after each tick. Stops after the terminal frame.
    pub fn step(&mut self, planner: &Planner, ticks: usize) -> Result<Vec<Frame>, SessionError> {
        if ticks == 0 {
            return Err(SessionError::BadStep);
        }
        let mut frames = Vec::new();
        for _ in 0..ticks {
            if self.is_terminal() {
                frames.push(self.terminal_frame());
                break;
            }
            let chosen = {
                let plan = self.last.as_ref().expect("live session has a plan");
                plan.candidates[plan.selected].clone()
            };
            let wp = chosen.waypoints[0];
            let next = self.ego.compose(&wp);
            let prev = (self.ego, self.speed, self.tick);
            self.speed = wp.x.hypot(wp.y) / TICK_S;
            self.ego = next;
            self.tick += 1;
            self.executed.push(next);
            if self.is_terminal() {
                self.last_selected = Some(chosen);
                frames.push(self.terminal_frame());
                break;
            }
            match self.replan(planner, self.source) {
                Ok(p) => frames.push(self.commit(FrameReason::Step, self.source, p)),
                Err(e) => {
                    (self.ego, self.speed, self.tick) = prev;
                    self.executed.pop();
                    return Err(e);
                }
            }
        }
        Ok(frames)
    }

    /// Agents in the current ego frame, restarted from the current tick.
    fn local_agents(&self) -> Vec<AgentTrack> {
        let t0 = self.tick as f64 * TICK_S;
        self.scenario
            .agents
            .iter()
            .map(|a| {
                let p = a.pose_at(t0);
                let (x, y) = self.ego.to_local(p.x, p.y);
                let local = Pose::new(x, y, crate::trajectory::wrap_angle(p.heading - self.ego.heading));
                AgentTrack::constant_velocity(a.footprint, local, a.velocity)
            })
            .collect()
    }

    fn current_grid(&self) -> Result<SemanticGrid, SessionError> {
        self.scenario.oracle_step(&self.ego, self.tick).map_err(|e| SessionError::Scenario(e.to_string()))
    }

    fn replan(&self, planner: &Planner, source: CognitiveSource) -> Result<PlanResult, SessionError> {
        let model = &planner.model;
        let cfg = &planner.config;
        let grid = self.current_grid()?;
        let enc = encode_scene(model, &grid)?;
        let c = enc.cognitive(source, &planner.vocab);
        let plan = plan_encoded(model, &enc, &c, self.speed, cfg.psi)?;
        let steps = model.config.wm_steps;
        let maps: Vec<Vec<SemanticGrid>> = match cfg.backend {
            Backend::Learned => learned_rollouts(model, &enc.b0, &plan.candidates, &c, *grid.spec())?
                .into_iter()
                .map(|r| r.maps)
                .collect(),
            Backend::Oracle => {
                let m = (1..=steps)
                    .map(|k| {
                        let tick = (self.tick + step_tick(k, steps)).min(HORIZON_TICKS);
                        self.scenario.oracle_step(&self.ego, tick)
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| SessionError::Scenario(e.to_string()))?;
                vec![m; plan.candidates.len()]
            }
        };
        let agents = self.local_agents();
        let fp = self.scenario.ego.footprint;
        let rewards = plan
            .candidates
            .iter()
            .zip(&maps)
            .zip(&plan.s_co)
            .map(|((t, m), &co)| {
                physical_reward(t, m, self.speed, &fp, &agents, &cfg.reward)
                    .map(|b| with_cognitive(b, co, &cfg.reward))
                    .map_err(|e| SessionError::Planning(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (selected, veto) = apply_veto(plan.selected, &rewards);
        Ok(PlanResult {
            candidates: plan.candidates,
            s_phy: plan.s_phy,
            s_co: plan.s_co,
            rewards,
            maps,
            planned: plan.selected,
            selected,
            veto,
        })
    }

    /// Executed world poses followed by the selected plan, truncated to the
    /// scenario horizon and expressed in the scenario's initial frame.
    fn projected_path(&self, plan: Option<&PlanResult>) -> Trajectory {
        let mut poses = self.executed.clone();
        if let Some(p) = plan {
            poses.extend(p.candidates[p.selected].waypoints.iter().map(|w| self.ego.compose(w)));
        }
        poses.truncate(HORIZON_TICKS);
        let origin = self.scenario.ego.pose;
        let waypoints = poses
            .into_iter()
            .map(|p| {
                let (x, y) = origin.to_local(p.x, p.y);
                Pose::new(x, y, crate::trajectory::wrap_angle(p.heading - origin.heading))
            })
            .collect();
        Trajectory { waypoints }
    }

    fn sub_scores(&self, plan: Option<&PlanResult>) -> Option<SubScores> {
        let path = self.projected_path(plan);
        if path.len() < HORIZON_TICKS {
            return None;
        }
        score_trajectory(&self.scenario, &path).ok()
    }

    fn commit(&mut self, reason: FrameReason, source: CognitiveSource, plan: PlanResult) -> Frame {
        self.source = source;
        if let Some(prev) = &self.last {
            self.last_selected = Some(prev.candidates[prev.selected].clone());
        }
        self.last = Some(plan);
        self.live_frame(reason)
    }

    fn base_frame(&self, reason: FrameReason) -> Result<Frame, SessionError> {
        let grid = self.current_grid()?;
        let (mode, command) = match self.source {
            CognitiveSource::Distilled => ("distilled".to_string(), None),
            CognitiveSource::Command(c) => ("command".to_string(), Some(c.text().to_string())),
        };
        Ok(Frame {
            tick: self.tick,
            reason,
            mode,
            command,
            ego: EgoView { x: self.ego.x, y: self.ego.y, heading: self.ego.heading, speed: self.speed },
            grid: WireGrid::from_grid(&grid),
            agents: self
                .local_agents()
                .iter()
                .map(|a| AgentView {
                    x: a.poses[0].x,
                    y: a.poses[0].y,
                    heading: a.poses[0].heading,
                    length: a.footprint.length,
                    width: a.footprint.width,
                    velocity: a.velocity,
                })
                .collect(),
            candidates: Vec::new(),
            planned: None,
            selected: None,
            veto: false,
            previous_selected: self.last_selected.as_ref().map(polyline),
            rollout: Vec::new(),
            sub_scores: None,
            terminal: false,
            episode: None,
        })
    }

    fn live_frame(&self, reason: FrameReason) -> Frame {
        let plan = self.last.as_ref().expect("committed plan");
        let mut f = self.base_frame(reason).expect("tick within horizon");
        f.candidates = plan
            .candidates
            .iter()
            .enumerate()
            .map(|(i, t)| CandidateView {
                polyline: polyline(t),
                s_phy: plan.s_phy[i],
                s_co: plan.s_co[i],
                reward: plan.rewards[i],
            })
            .collect();
        f.planned = Some(plan.planned);
        f.selected = Some(plan.selected);
        f.veto = plan.veto;
        f.rollout = plan.maps[plan.selected].iter().map(WireGrid::from_grid_binary).collect();
        f.sub_scores = self.sub_scores(Some(plan));
        f
    }

    fn terminal_frame(&self) -> Frame {
        let mut f = self.base_frame(FrameReason::Terminal).expect("horizon tick is valid");
        f.terminal = true;
        f.sub_scores = self.sub_scores(None);
        f.episode = f.sub_scores.map(|s| EpisodeView { sub: s, pdms: pdms(&s), epdms: epdms(&s) });
        f
    }

    /// Frame describing the current state without re-planning.
    pub fn current_frame(&self) -> Frame {
        if self.is_terminal() {
            self.terminal_frame()
        } else {
            self.live_frame(FrameReason::Resume)
        }
    }
}

fn polyline(t: &Trajectory) -> Vec<[f64; 2]> {
    t.waypoints.iter().map(|p| [p.x, p.y]).collect()
}
