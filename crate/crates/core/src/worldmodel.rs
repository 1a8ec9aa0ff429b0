//! Auto-regressive BEV world model.
//!
//! A residual transition advances the BEV state `B` and every candidate's
//! ego feature `e`, conditioned on the cognitive vector `C`:
//!
//! ```text
//! B_k = B_{k-1} + tanh(pw(dw(B_{k-1})) + W_c [e_{k-1}; C])
//! e_k = e_{k-1} + tanh(W_e [e_{k-1}; pool(B_{k-1}); C])
//! ```
//!
//! Pointwise and conditioning weights start at zero so an untrained model
//! is the identity. A transposed-convolution decoder maps `B_k` back to a
//! semantic grid. The oracle backend skips the network and reads the
//! scenario's ground truth instead.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::neural::{Graph, NeuralError, ParameterStore, Tensor, Var};
use crate::policy::{pool_state, trajectory_encoder, trajectory_features, Model, DECODER_FACTOR, EGO_DIM};
use crate::scenario::{GridSpec, Scenario, ScenarioError, SemanticGrid, HORIZON_TICKS};
use crate::trajectory::{Pose, Trajectory};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Learned,
    Oracle,
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "learned" => Ok(Backend::Learned),
            "oracle" => Ok(Backend::Oracle),
            other => Err(format!("unknown backend `{other}` (expected learned or oracle)")),
        }
    }
}

/// Tick reached after rollout step `k` (1-based) of `steps`.
pub fn step_tick(k: usize, steps: usize) -> usize {
    k * HORIZON_TICKS / steps
}

/// Transition weights loaded into a graph once and shared by all candidates.
#[derive(Clone, Copy, Debug)]
pub struct TransitionVars {
    dw: Var,
    pw: Var,
    pw_b: Var,
    cond_w: Var,
    cond_b: Var,
    ego_w: Var,
    ego_b: Var,
}

impl TransitionVars {
    pub fn load(g: &mut Graph, store: &ParameterStore) -> Result<Self, NeuralError> {
        Ok(Self {
            dw: g.param(store, "wm.dw")?,
            pw: g.param(store, "wm.pw")?,
            pw_b: g.param(store, "wm.pw_b")?,
            cond_w: g.param(store, "wm.cond.w")?,
            cond_b: g.param(store, "wm.cond.b")?,
            ego_w: g.param(store, "wm.ego.w")?,
            ego_b: g.param(store, "wm.ego.b")?,
        })
    }
}

/// Graph-level rollout of `n` candidates.
#[derive(Clone, Debug)]
pub struct GraphRollout {
    /// `states[k][i]`: BEV state of candidate `i` after step `k + 1`.
    pub states: Vec<Vec<Var>>,
    /// `ego[k]`: `[n, 32]` ego features after step `k + 1`.
    pub ego: Vec<Var>,
}

/// Rolls `steps` transitions forward. `b_init` holds either one state shared
/// by all candidates or one state per candidate; `e0` is `[n, 32]` and `c`
/// is `[1, 64]`.
pub fn rollout_graph(
    g: &mut Graph,
    w: &TransitionVars,
    b_init: &[Var],
    e0: Var,
    c: Var,
    steps: usize,
) -> Result<GraphRollout, NeuralError> {
    let n = g.value(e0).shape()[0];
    if b_init.len() != 1 && b_init.len() != n {
        return Err(NeuralError::Shape { op: "rollout", detail: format!("{} states for {} candidates", b_init.len(), n) });
    }
    let mut prev: Vec<Var> = b_init.to_vec();
    let mut e = e0;
    let mut out = GraphRollout { states: Vec::with_capacity(steps), ego: Vec::with_capacity(steps) };
    let c_rep = g.repeat_rows(c, n)?;
    for _ in 0..steps {
        let ec = g.concat_cols(&[e, c_rep])?;
        let cond = g.matmul(ec, w.cond_w)?;
        let cond = g.add_bias(cond, w.cond_b)?;

        let spatial: Vec<Var> = prev
            .iter()
            .map(|&b| {
                let h = g.depthwise_conv2d(b, w.dw)?;
                g.conv2d(h, w.pw, w.pw_b)
            })
            .collect::<Result<_, _>>()?;
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let j = if prev.len() == 1 { 0 } else { i };
            let row = g.gather_rows(cond, &[i])?;
            let z = g.add_bias(spatial[j], row)?;
            let z = g.tanh(z);
            next.push(g.add(prev[j], z)?);
        }

        let pooled = if prev.len() == 1 {
            let p = pool_state(g, prev[0])?;
            g.repeat_rows(p, n)?
        } else {
            let rows: Vec<Var> = prev.iter().map(|&b| pool_state(g, b)).collect::<Result<_, _>>()?;
            g.stack_rows(&rows)?
        };
        let x = g.concat_cols(&[e, pooled, c_rep])?;
        let de = g.matmul(x, w.ego_w)?;
        let de = g.add_bias(de, w.ego_b)?;
        let de = g.tanh(de);
        e = g.add(e, de)?;

        out.states.push(next.clone());
        out.ego.push(e);
        prev = next;
    }
    Ok(out)
}

/// Decodes a BEV state into per-channel probabilities `[64, 64, 5]`.
pub fn decode(g: &mut Graph, store: &ParameterStore, b: Var) -> Result<Var, NeuralError> {
    let k = g.param(store, "wm.dec.k")?;
    let bias = g.param(store, "wm.dec.b")?;
    let up = g.upsample_conv(b, k, bias, DECODER_FACTOR)?;
    Ok(g.sigmoid(up))
}

/// Mean focal loss of decoded probabilities against a binary target grid.
pub fn focal_loss(g: &mut Graph, pred: Var, target: &SemanticGrid) -> Result<Var, NeuralError> {
    g.focal(pred, &target.to_tensor(), FOCAL_GAMMA, FOCAL_ALPHA, FOCAL_EPS)
}

/// Value-level rollout of a single candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub backend: Backend,
    /// BEV states after each step (empty for the oracle backend).
    pub states: Vec<Tensor>,
    /// Ego features after each step (empty for the oracle backend).
    pub ego: Vec<Vec<f64>>,
    pub maps: Vec<SemanticGrid>,
}

/// Ground-truth maps at the tick reached by each of `steps` rollout steps.
pub fn oracle_rollout(scenario: &Scenario, steps: usize) -> Result<Rollout, ScenarioError> {
    let maps = (1..=steps)
        .map(|k| scenario.oracle_step(&Pose::ORIGIN, step_tick(k, steps)))
        .collect::<Result<_, _>>()?;
    Ok(Rollout { backend: Backend::Oracle, states: Vec::new(), ego: Vec::new(), maps })
}

/// Learned rollouts of several trajectories from a fixed `B0`, decoding
/// every step.
pub fn learned_rollouts(
    model: &Model,
    b0: &Tensor,
    trajs: &[Trajectory],
    c: &[f64],
    spec: GridSpec,
) -> Result<Vec<Rollout>, NeuralError> {
    let mut g = Graph::new();
    let b = g.input(b0.clone());
    let feats = g.input(trajectory_features(trajs));
    let e0 = trajectory_encoder(&mut g, &model.store, feats)?;
    let cv = g.input(Tensor::row(c.to_vec()));
    let w = TransitionVars::load(&mut g, &model.store)?;
    let r = rollout_graph(&mut g, &w, &[b], e0, cv, model.config.wm_steps)?;
    let mut out = Vec::with_capacity(trajs.len());
    for i in 0..trajs.len() {
        let mut states = Vec::new();
        let mut ego = Vec::new();
        let mut maps = Vec::new();
        for k in 0..r.states.len() {
            let s = r.states[k][i];
            let m = decode(&mut g, &model.store, s)?;
            maps.push(SemanticGrid::from_tensor(spec, g.value(m)).map_err(|d| NeuralError::Shape { op: "decode", detail: d })?);
            states.push(g.value(s).clone());
            ego.push(g.value(r.ego[k]).data()[i * EGO_DIM..(i + 1) * EGO_DIM].to_vec());
        }
        out.push(Rollout { backend: Backend::Learned, states, ego, maps });
    }
    Ok(out)
}

/// Per-channel intersection-over-union at threshold 0.5, averaged over the
/// channels where either grid has a positive cell.
pub fn mean_iou(pred: &SemanticGrid, target: &SemanticGrid) -> f64 {
    let ch = pred.spec().channels;
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..ch {
        let (mut inter, mut union) = (0usize, 0usize);
        for (p, t) in pred.data().iter().skip(c).step_by(ch).zip(target.data().iter().skip(c).step_by(ch)) {
            let (a, b) = (*p >= 0.5, *t >= 0.5);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union > 0 {
            total += inter as f64 / union as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        1.0
    } else {
        total / counted as f64
    }
}
