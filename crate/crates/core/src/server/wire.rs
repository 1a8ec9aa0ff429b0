//! `cophy-wire/1` messages exchanged over a session's WebSocket.
//!
//! Client to server: `{"type":"command","text":...}`, `{"type":"step","ticks":n}`,
//! `{"type":"clear"}`. Server to client: `{"type":"frame",...}` or
//! `{"type":"error",...}`, each carrying `"schema":"cophy-wire/1"`.

use serde::{Deserialize, Serialize};

use crate::eval::SubScores;
use crate::rewards::RewardBreakdown;
use crate::scenario::SemanticGrid;

pub const WIRE_SCHEMA: &str = "cophy-wire/1";

/// JSON Schema for server-to-client messages.
pub const FRAME_JSON_SCHEMA: &str = include_str!("../../assets/wire-frame.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Command { text: String },
    Step { ticks: usize },
    Clear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameReason {
    Start,
    Resume,
    Command,
    Clear,
    Step,
    Terminal,
}

/// Grid as per-channel runs of `[value, count]` in row-major cell order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireGrid {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub channels: Vec<Vec<(f64, u32)>>,
}

impl WireGrid {
    pub fn from_grid(g: &SemanticGrid) -> Self {
        let s = g.spec();
        Self { height: s.height, width: s.width, resolution: s.resolution, channels: g.to_rle() }
    }

    /// Occupancy thresholded at 0.5 before encoding.
    pub fn from_grid_binary(g: &SemanticGrid) -> Self {
        let data = g.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        let bin = SemanticGrid::from_data(*g.spec(), data).expect("same shape");
        Self::from_grid(&bin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoView {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

/// Agent pose in the current ego frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentView {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
    pub velocity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub polyline: Vec<[f64; 2]>,
    pub s_phy: f64,
    pub s_co: f64,
    pub reward: RewardBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeView {
    pub sub: SubScores,
    pub pdms: f64,
    pub epdms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub tick: usize,
    pub reason: FrameReason,
    /// `distilled` or `command`.
    pub mode: String,
    pub command: Option<String>,
    pub ego: EgoView,
    pub grid: WireGrid,
    pub agents: Vec<AgentView>,
    /// Candidate polylines live in the current ego frame.
    pub candidates: Vec<CandidateView>,
    /// Index chosen by hierarchical selection, before any veto.
    pub planned: Option<usize>,
    pub selected: Option<usize>,
    pub veto: bool,
    pub previous_selected: Option<Vec<[f64; 2]>>,
    /// Decoded rollout maps of the selected candidate.
    pub rollout: Vec<WireGrid>,
    /// Scores of the executed path completed by the current plan.
    pub sub_scores: Option<SubScores>,
    pub terminal: bool,
    pub episode: Option<EpisodeView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame {
        schema: String,
        #[serde(flatten)]
        frame: Box<Frame>,
    },
    Error {
        schema: String,
        code: String,
        message: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        vocabulary: Option<Vec<String>>,
    },
}

impl ServerMessage {
    pub fn frame(frame: Frame) -> Self {
        ServerMessage::Frame { schema: WIRE_SCHEMA.into(), frame: Box::new(frame) }
    }

    pub fn error(code: &str, message: String, vocabulary: Option<Vec<String>>) -> Self {
        ServerMessage::Error { schema: WIRE_SCHEMA.into(), code: code.into(), message, vocabulary }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire message serializes")
    }
}
