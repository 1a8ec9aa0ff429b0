//! Physical and cognitive trajectory scoring, their training targets, and
//! hierarchical selection.

use crate::neural::{softmax_in_place, Graph, NeuralError, ParameterStore, Tensor, Var};
use crate::policy::{mlp2, trajectory_features, Model, PolicyError, FEATURE_CHANNELS, FEATURE_SIDE};
use crate::trajectory::{mean_l2, Trajectory};
use crate::worldmodel::GraphRollout;

const PHY_POOL: usize = 2;
const COS_EPS: f64 = 1e-12;

/// Physical score logits `[1, n]` from per-candidate rollouts.
pub fn physical_logits(
    g: &mut Graph,
    store: &ParameterStore,
    rollout: &GraphRollout,
    speed: f64,
) -> Result<Var, NeuralError> {
    let steps = rollout.states.len();
    let n = rollout.states[0].len();
    let k = g.param(store, "phy.conv.k")?;
    let kb = g.param(store, "phy.conv.b")?;
    let side = FEATURE_SIDE / PHY_POOL;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut parts = Vec::with_capacity(steps);
        for step in &rollout.states {
            let p = g.avg_pool(step[i], PHY_POOL)?;
            parts.push(g.reshape(p, &[side * side, FEATURE_CHANNELS])?);
        }
        let cat = g.concat_cols(&parts)?;
        let cat = g.reshape(cat, &[side, side, steps * FEATURE_CHANNELS])?;
        let h = g.conv2d(cat, k, kb)?;
        let h = g.relu(h);
        let len = g.value(h).len();
        rows.push(g.reshape(h, &[1, len])?);
    }
    let b = g.stack_rows(&rows)?;
    let mut e = rollout.ego[0];
    for &next in &rollout.ego[1..] {
        e = g.add(e, next)?;
    }
    let e = g.scale(e, 1.0 / steps as f64);
    let v = g.input(Tensor::filled(&[n, 1], speed * 0.2));
    let x = g.concat_cols(&[b, e, v])?;
    let logits = mlp2(g, store, "phy", x, false)?;
    g.reshape(logits, &[1, n])
}

/// `s_Phy`: softmax of negative mean waypoint distance to the expert.
pub fn physical_target(candidates: &[Trajectory], expert: &Trajectory, tau_d: f64) -> Vec<f64> {
    let mut z: Vec<f64> = candidates.iter().map(|c| -mean_l2(c, expert) / tau_d).collect();
    softmax_in_place(&mut z);
    z
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `-sum(target * log_softmax(logits))`.
pub fn cross_entropy(g: &mut Graph, logits: Var, target: &[f64]) -> Result<Var, NeuralError> {
    let ls = g.log_softmax(logits);
    let t = g.input(Tensor::new(g.value(logits).shape().to_vec(), target.to_vec())?);
    let prod = g.mul(ls, t)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0))
}

/// Unit-normalized cognitive-head embedding of `c` (`[1, 32]`).
pub fn cognitive_embedding(g: &mut Graph, store: &ParameterStore, c: Var) -> Result<Var, NeuralError> {
    let h = mlp2(g, store, "co.cog", c, false)?;
    Ok(g.normalize_rows(h, COS_EPS))
}

/// Cosine between each trajectory-head embedding (`feats`: `[n, 16]`) and
/// the cognitive-head embedding of `c`, as `[n, 1]`.
pub fn cognitive_scores(g: &mut Graph, store: &ParameterStore, feats: Var, c: Var) -> Result<Var, NeuralError> {
    let n = g.value(feats).shape()[0];
    let t = mlp2(g, store, "co.traj", feats, false)?;
    let t = g.normalize_rows(t, COS_EPS);
    let ce = cognitive_embedding(g, store, c)?;
    let ce = g.repeat_rows(ce, n)?;
    let prod = g.mul(t, ce)?;
    Ok(g.row_sum(prod))
}

/// Value-level cognitive scores; also serves as the frozen cognitive reward.
pub fn cognitive_score(model: &Model, trajs: &[Trajectory], c: &[f64]) -> Result<Vec<f64>, NeuralError> {
    let mut g = Graph::new();
    let f = g.input(trajectory_features(trajs));
    let cv = g.input(Tensor::row(c.to_vec()));
    let s = cognitive_scores(&mut g, &model.store, f, cv)?;
    Ok(g.value(s).data().to_vec())
}

/// Indices of the `m` candidates farthest from the expert (ties by index).
pub fn farthest_candidates(candidates: &[Trajectory], expert: &Trajectory, m: usize) -> Vec<usize> {
    let mut d: Vec<(usize, f64)> = candidates.iter().enumerate().map(|(i, c)| (i, mean_l2(c, expert))).collect();
    d.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    d.into_iter().take(m).map(|(i, _)| i).collect()
}

/// InfoNCE over cosine logits `[1, 1 + m]` whose first entry is the positive.
pub fn infonce_from_cosines(g: &mut Graph, cosines: Var, temperature: f64) -> Result<Var, NeuralError> {
    let z = g.scale(cosines, 1.0 / temperature);
    let ls = g.log_softmax(z);
    let p = g.pick(ls, 0)?;
    Ok(g.scale(p, -1.0))
}

/// Contrastive loss pulling the expert toward `C` and pushing the farthest
/// candidates away.
pub fn infonce_loss(
    g: &mut Graph,
    store: &ParameterStore,
    expert: &Trajectory,
    candidates: &[Trajectory],
    c: Var,
    negatives: usize,
    temperature: f64,
) -> Result<Var, PolicyError> {
    if candidates.len() < negatives + 1 {
        return Err(PolicyError::InsufficientCandidates { needed: negatives + 1, got: candidates.len() });
    }
    let mut rows = vec![expert.clone()];
    rows.extend(farthest_candidates(candidates, expert, negatives).into_iter().map(|i| candidates[i].clone()));
    let f = g.input(trajectory_features(&rows));
    let cos = cognitive_scores(g, store, f, c)?;
    let cos = g.reshape(cos, &[1, rows.len()])?;
    Ok(infonce_from_cosines(g, cos, temperature)?)
}

/// `argmax_{i in Omega} s_phy[i]` with `Omega = {i | s_co[i] >= psi}`,
/// falling back to all candidates when `Omega` is empty.
pub fn hierarchical_select(s_phy: &[f64], s_co: &[f64], psi: f64) -> usize {
    let mut best: Option<usize> = None;
    for (i, (&p, &c)) in s_phy.iter().zip(s_co).enumerate() {
        if c >= psi && best.map_or(true, |b| p > s_phy[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or_else(|| argmax(s_phy))
}
