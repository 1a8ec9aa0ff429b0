//! Interactive intent-control sessions over HTTP plus one WebSocket per
//! session.
//!
//! | route | effect |
//! |---|---|
//! | `POST /sessions` | start from `{"seed","template"}` or `{"scenario"}`; returns id, vocabulary, first frame |
//! | `GET /sessions` | list live sessions |
//! | `DELETE /sessions/{id}` | end a session |
//! | `GET /sessions/{id}/ws` | message channel; sends the current frame on connect |
//! | `GET /schema` | JSON Schema of server messages |

mod session;
pub mod wire;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

pub use session::{Planner, Session, SessionConfig, SessionError};
pub use wire::{ClientMessage, Frame, FrameReason, ServerMessage, WireGrid, FRAME_JSON_SCHEMA, WIRE_SCHEMA};

use crate::command::Vocabulary;
use crate::scenario::{generate_scenario, Scenario, Template};

type SessionMap = BTreeMap<String, Arc<Mutex<Session>>>;

#[derive(Clone)]
pub struct AppState {
    planner: Planner,
    sessions: Arc<std::sync::Mutex<SessionMap>>,
    next_id: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(planner: Planner) -> Self {
        Self { planner, sessions: Arc::default(), next_id: Arc::new(AtomicU64::new(1)) }
    }

    fn get(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().expect("session map").get(id).cloned()
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum StartRequest {
    Generated { seed: u64, template: Template },
    Inline { scenario: Box<Scenario> },
}

#[derive(Debug, Serialize)]
struct StartResponse {
    id: String,
    vocabulary: Vec<&'static str>,
    frame: ServerMessage,
}

#[derive(Debug, Serialize)]
struct SessionSummary {
    id: String,
    scenario: String,
    tick: usize,
    mode: &'static str,
}

fn error_code(e: &SessionError) -> &'static str {
    match e {
        SessionError::UnknownCommand { .. } => "unknown_command",
        SessionError::NotFound(_) => "not_found",
        SessionError::BadStep => "bad_step",
        SessionError::Scenario(_) => "scenario",
        SessionError::Planning(_) => "planning",
    }
}

pub fn error_message(e: &SessionError) -> ServerMessage {
    let vocab = match e {
        SessionError::UnknownCommand { vocabulary, .. } => Some(vocabulary.clone()),
        _ => None,
    };
    ServerMessage::error(error_code(e), e.to_string(), vocab)
}

fn error_response(status: StatusCode, e: &SessionError) -> Response {
    (status, Json(error_message(e))).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", get(list_sessions).post(start_session))
        .route("/sessions/:id", axum::routing::delete(end_session))
        .route("/sessions/:id/ws", get(connect))
        .route("/schema", get(|| async { ([("content-type", "application/json")], FRAME_JSON_SCHEMA) }))
        .with_state(state)
}

async fn start_session(State(state): State<AppState>, Json(req): Json<StartRequest>) -> Response {
    let scenario = match req {
        StartRequest::Generated { seed, template } => generate_scenario(seed, template),
        StartRequest::Inline { scenario } => *scenario,
    };
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::SeqCst));
    let planner = state.planner.clone();
    let sid = id.clone();
    let started = tokio::task::spawn_blocking(move || Session::start(&planner, sid, scenario)).await;
    match started {
        Ok(Ok((session, frame))) => {
            state.sessions.lock().expect("session map").insert(id.clone(), Arc::new(Mutex::new(session)));
            let body = StartResponse { id, vocabulary: Vocabulary::texts(), frame: ServerMessage::frame(frame) };
            (StatusCode::CREATED, Json(body)).into_response()
        }
        Ok(Err(e)) => error_response(StatusCode::UNPROCESSABLE_ENTITY, &e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, &SessionError::Planning(e.to_string())),
    }
}

async fn list_sessions(State(state): State<AppState>) -> Json<Vec<SessionSummary>> {
    let entries: Vec<(String, Arc<Mutex<Session>>)> =
        state.sessions.lock().expect("session map").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut out = Vec::with_capacity(entries.len());
    for (id, s) in entries {
        let s = s.lock().await;
        let mode = match s.source() {
            crate::planner::CognitiveSource::Distilled => "distilled",
            crate::planner::CognitiveSource::Command(_) => "command",
        };
        out.push(SessionSummary { id, scenario: s.scenario().id.clone(), tick: s.tick(), mode });
    }
    Json(out)
}

async fn end_session(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.sessions.lock().expect("session map").remove(&id) {
        Some(_) => StatusCode::NO_CONTENT.into_response(),
        None => error_response(StatusCode::NOT_FOUND, &SessionError::NotFound(id)),
    }
}

async fn connect(State(state): State<AppState>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Response {
    match state.get(&id) {
        Some(session) => ws.on_upgrade(move |socket| drive(socket, state.planner.clone(), session)),
        None => error_response(StatusCode::NOT_FOUND, &SessionError::NotFound(id)),
    }
}

/// Applies one client message to a session, returning the messages to send.
pub fn handle(session: &mut Session, planner: &Planner, msg: ClientMessage) -> Vec<ServerMessage> {
    let result = match msg {
        ClientMessage::Command { text } => session.command(planner, &text).map(|f| vec![f]),
        ClientMessage::Clear => session.clear(planner).map(|f| vec![f]),
        ClientMessage::Step { ticks } => session.step(planner, ticks),
    };
    match result {
        Ok(frames) => frames.into_iter().map(ServerMessage::frame).collect(),
        Err(e) => vec![error_message(&e)],
    }
}

async fn drive(mut socket: WebSocket, planner: Planner, session: Arc<Mutex<Session>>) {
    let hello = session.lock().await.current_frame();
    if socket.send(Message::Text(ServerMessage::frame(hello).to_json())).await.is_err() {
        return;
    }
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let replies = match serde_json::from_str::<ClientMessage>(&text) {
            Ok(m) => {
                let planner = planner.clone();
                let mut guard = session.clone().lock_owned().await;
                tokio::task::spawn_blocking(move || handle(&mut guard, &planner, m)).await.unwrap_or_else(|e| {
                    vec![error_message(&SessionError::Planning(e.to_string()))]
                })
            }
            Err(e) => vec![ServerMessage::error("bad_message", e.to_string(), None)],
        };
        for r in replies {
            if socket.send(Message::Text(r.to_json())).await.is_err() {
                return;
            }
        }
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(planner: Planner, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(AppState::new(planner))).await
}
