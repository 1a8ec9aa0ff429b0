//! C ABI over the `cophy` planner.
//!
//! Every function returns a [`CophyStatus`]. On failure a description of the
//! error is available from [`cophy_last_error`] on the same thread. Objects
//! are exposed as opaque handles that the caller releases with the matching
//! `*_free` function; strings handed out by the library are released with
//! [`cophy_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use cophy::command::{Command, Vocabulary};
use cophy::eval::{epdms, pdms, score_trajectory};
use cophy::neural::Checkpoint;
use cophy::planner::{encode_scene, plan_encoded, CognitiveSource};
use cophy::policy::Model;
use cophy::scenario::{generate_scenario, Scenario, Template};
use cophy::server::{Frame, Planner, ServerMessage, Session, SessionConfig, SessionError};
use cophy::trajectory::{Trajectory, WAYPOINTS};

/// Number of doubles in a flattened trajectory: `x0, y0, x1, y1, ...`.
pub const COPHY_TRAJECTORY_LEN: usize = 16;
const _: () = assert!(COPHY_TRAJECTORY_LEN == 2 * WAYPOINTS);

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CophyStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    UnknownCommand = 6,
    Planning = 7,
    Panic = 8,
}

/// A loaded planner checkpoint.
pub struct CophyModel {
    model: Arc<Model>,
    vocab: Arc<Vocabulary>,
}

/// A generated or parsed scenario.
pub struct CophyScenario {
    scenario: Scenario,
}

/// An interactive planning session bound to one model and one scenario.
pub struct CophySession {
    planner: Planner,
    session: Session,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(CophyStatus, String);

impl Failure {
    fn new(status: CophyStatus, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::UnknownCommand { .. } => CophyStatus::UnknownCommand,
            SessionError::BadStep => CophyStatus::InvalidArgument,
            _ => CophyStatus::Planning,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CophyStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CophyStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CophyStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(CophyStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::new(CophyStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::new(CophyStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::new(CophyStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    handle_mut(p, what)
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s).expect("JSON contains no NUL bytes").into_raw()
}

unsafe fn write_trajectory(t: &Trajectory, out_xy: *mut f64, len: usize) -> Result<(), Failure> {
    if out_xy.is_null() {
        return Err(Failure::new(CophyStatus::NullPointer, "trajectory buffer is null"));
    }
    if len < COPHY_TRAJECTORY_LEN {
        return Err(Failure::new(
            CophyStatus::InvalidArgument,
            format!("trajectory buffer holds {len} doubles, need {COPHY_TRAJECTORY_LEN}"),
        ));
    }
    std::slice::from_raw_parts_mut(out_xy, COPHY_TRAJECTORY_LEN).copy_from_slice(&t.flat_xy());
    Ok(())
}

fn frame_json(frame: Frame) -> String {
    ServerMessage::frame(frame).to_json()
}

unsafe fn emit(frame: Frame, out_json: *mut *mut c_char) {
    if let Some(o) = out_json.as_mut() {
        *o = to_c_string(frame_json(frame));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cophy_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn cophy_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cophy_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint written by `cophy train-il` or `cophy train-rl`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_model_load(path: *const c_char, out_model: *mut *mut CophyModel) -> CophyStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let slot = out(out_model, "out_model")?;
        let bytes = std::fs::read(Path::new(path)).map_err(|e| Failure::new(CophyStatus::Io, format!("{path}: {e}")))?;
        let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| Failure::new(CophyStatus::Parse, format!("{path}: {e}")))?;
        let model = Model::from_checkpoint(&ckpt).map_err(|e| Failure::new(CophyStatus::Parse, format!("{path}: {e}")))?;
        *slot = Box::into_raw(Box::new(CophyModel { model: Arc::new(model), vocab: Arc::new(Vocabulary::default()) }));
        Ok(())
    })
}

/// Number of candidate trajectories the model proposes per plan.
///
/// # Safety
/// `model` must be a live handle; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_model_candidate_count(model: *const CophyModel, out_count: *mut usize) -> CophyStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out(out_count, "out_count")? = m.model.n_candidates();
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`cophy_model_load`] and must not be used afterwards.
/// Sessions created from it keep their own reference and stay valid.
#[no_mangle]
pub unsafe extern "C" fn cophy_model_free(model: *mut CophyModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Generates the deterministic scenario for `(template, seed)`.
///
/// # Safety
/// `template` must be a NUL-terminated string; `out_scenario` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_scenario_generate(
    template: *const c_char,
    seed: u64,
    out_scenario: *mut *mut CophyScenario,
) -> CophyStatus {
    guard(|| {
        let name = str_arg(template, "template")?;
        let slot = out(out_scenario, "out_scenario")?;
        let t: Template = name.parse().map_err(|e| Failure::new(CophyStatus::InvalidArgument, format!("{e}")))?;
        *slot = Box::into_raw(Box::new(CophyScenario { scenario: generate_scenario(seed, t) }));
        Ok(())
    })
}

/// Parses one scenario record (a single line of a `cophy gen` dataset).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_scenario` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_scenario_from_json(json: *const c_char, out_scenario: *mut *mut CophyScenario) -> CophyStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let slot = out(out_scenario, "out_scenario")?;
        let scenario = Scenario::from_json(text).map_err(|e| Failure::new(CophyStatus::Parse, e.to_string()))?;
        *slot = Box::into_raw(Box::new(CophyScenario { scenario }));
        Ok(())
    })
}

/// Serializes a scenario to JSON. Free the result with [`cophy_string_free`].
///
/// # Safety
/// `scenario` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_scenario_to_json(scenario: *const CophyScenario, out_json: *mut *mut c_char) -> CophyStatus {
    guard(|| {
        let s = handle(scenario, "scenario")?;
        *out(out_json, "out_json")? = to_c_string(s.scenario.to_json());
        Ok(())
    })
}

/// Copies the expert trajectory into `out_xy` (at least
/// [`COPHY_TRAJECTORY_LEN`] doubles).
///
/// # Safety
/// `scenario` must be a live handle; `out_xy` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cophy_scenario_expert(scenario: *const CophyScenario, out_xy: *mut f64, len: usize) -> CophyStatus {
    guard(|| {
        let s = handle(scenario, "scenario")?;
        write_trajectory(&s.scenario.expert, out_xy, len)
    })
}

/// # Safety
/// `scenario` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cophy_scenario_free(scenario: *mut CophyScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Scores a planning-frame trajectory against the scenario's ground truth.
///
/// # Safety
/// `scenario` must be a live handle; `xy` must hold `len` doubles; the
/// outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_score_trajectory(
    scenario: *const CophyScenario,
    xy: *const f64,
    len: usize,
    out_pdms: *mut f64,
    out_epdms: *mut f64,
) -> CophyStatus {
    guard(|| {
        let s = handle(scenario, "scenario")?;
        if xy.is_null() {
            return Err(Failure::new(CophyStatus::NullPointer, "xy is null"));
        }
        if len != COPHY_TRAJECTORY_LEN {
            return Err(Failure::new(CophyStatus::InvalidArgument, format!("expected {COPHY_TRAJECTORY_LEN} doubles, got {len}")));
        }
        let (p, e) = (out(out_pdms, "out_pdms")?, out(out_epdms, "out_epdms")?);
        let t = Trajectory::from_flat(std::slice::from_raw_parts(xy, len));
        let sub = score_trajectory(&s.scenario, &t).map_err(|e| Failure::new(CophyStatus::Planning, e.to_string()))?;
        *p = pdms(&sub);
        *e = epdms(&sub);
        Ok(())
    })
}

/// Plans once from the scenario's initial state. `command` selects the
/// cognitive vector; null uses the distilled one. Writes the selected
/// trajectory and its candidate index.
///
/// # Safety
/// Handles must be live; `command` is null or NUL-terminated; `out_xy` holds
/// `len` doubles; `out_index` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_plan(
    model: *const CophyModel,
    scenario: *const CophyScenario,
    command: *const c_char,
    psi: f64,
    out_xy: *mut f64,
    len: usize,
    out_index: *mut usize,
) -> CophyStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let s = &handle(scenario, "scenario")?.scenario;
        let source = if command.is_null() {
            CognitiveSource::Distilled
        } else {
            let text = str_arg(command, "command")?;
            CognitiveSource::Command(
                Command::from_text(text)
                    .ok_or_else(|| Failure::new(CophyStatus::UnknownCommand, format!("unknown command '{text}'")))?,
            )
        };
        let planning = |e: cophy::neural::NeuralError| Failure::new(CophyStatus::Planning, e.to_string());
        let enc = encode_scene(&m.model, &s.initial_grid).map_err(planning)?;
        let c = enc.cognitive(source, &m.vocab);
        let plan = plan_encoded(&m.model, &enc, &c, s.ego.speed, psi).map_err(planning)?;
        write_trajectory(plan.selected_trajectory(), out_xy, len)?;
        if let Some(i) = out_index.as_mut() {
            *i = plan.selected;
        }
        Ok(())
    })
}

/// Starts an interactive session. The scenario is copied. When `out_frame`
/// is non-null it receives the first frame as `cophy-wire/1` JSON.
///
/// # Safety
/// Handles must be live; `out_session` must be writable; `out_frame` is null
/// or writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_session_start(
    model: *const CophyModel,
    scenario: *const CophyScenario,
    psi: f64,
    out_session: *mut *mut CophySession,
    out_frame: *mut *mut c_char,
) -> CophyStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let s = handle(scenario, "scenario")?;
        let slot = out(out_session, "out_session")?;
        let planner = Planner {
            model: m.model.clone(),
            vocab: m.vocab.clone(),
            config: SessionConfig { psi, ..SessionConfig::default() },
        };
        let (session, frame) = Session::start(&planner, s.scenario.id.clone(), s.scenario.clone())?;
        emit(frame, out_frame);
        *slot = Box::into_raw(Box::new(CophySession { planner, session }));
        Ok(())
    })
}

/// Switches the session to an exact vocabulary command and re-plans. An
/// unknown command returns [`CophyStatus::UnknownCommand`] and leaves the
/// session unchanged.
///
/// # Safety
/// `session` must be live; `text` NUL-terminated; `out_frame` null or writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_session_command(
    session: *mut CophySession,
    text: *const c_char,
    out_frame: *mut *mut c_char,
) -> CophyStatus {
    guard(|| {
        let s = handle_mut(session, "session")?;
        let text = str_arg(text, "text")?;
        let frame = s.session.command(&s.planner, text)?;
        emit(frame, out_frame);
        Ok(())
    })
}

/// Returns the session to the distilled cognitive vector.
///
/// # Safety
/// `session` must be live; `out_frame` null or writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_session_clear(session: *mut CophySession, out_frame: *mut *mut c_char) -> CophyStatus {
    guard(|| {
        let s = handle_mut(session, "session")?;
        let frame = s.session.clear(&s.planner)?;
        emit(frame, out_frame);
        Ok(())
    })
}

/// Advances `ticks` ticks. `out_frames` receives a JSON array with one frame
/// per tick (the last one terminal once the horizon is reached).
///
/// # Safety
/// `session` must be live; `out_frames` null or writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_session_step(session: *mut CophySession, ticks: usize, out_frames: *mut *mut c_char) -> CophyStatus {
    guard(|| {
        let s = handle_mut(session, "session")?;
        let frames = s.session.step(&s.planner, ticks)?;
        if let Some(o) = out_frames.as_mut() {
            let items: Vec<serde_json::Value> = frames
                .into_iter()
                .map(|f| serde_json::from_str(&frame_json(f)).expect("frame JSON round-trips"))
                .collect();
            *o = to_c_string(serde_json::Value::Array(items).to_string());
        }
        Ok(())
    })
}

/// Current tick of the session and whether the horizon has been reached.
///
/// # Safety
/// `session` must be live; outputs null or writable.
#[no_mangle]
pub unsafe extern "C" fn cophy_session_tick(session: *const CophySession, out_tick: *mut usize, out_terminal: *mut bool) -> CophyStatus {
    guard(|| {
        let s = handle(session, "session")?;
        if let Some(t) = out_tick.as_mut() {
            *t = s.session.tick();
        }
        if let Some(t) = out_terminal.as_mut() {
            *t = s.session.is_terminal();
        }
        Ok(())
    })
}

/// # Safety
/// `session` must come from [`cophy_session_start`] and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cophy_session_free(session: *mut CophySession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
