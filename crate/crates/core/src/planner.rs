//! Frozen-weight inference: encode, refine, roll out, score, select.

use serde::{Deserialize, Serialize};

use crate::command::{Command, Vocabulary};
use crate::neural::{Graph, NeuralError, Tensor};
use crate::policy::{encode_grid, refine, tokenize, trajectory_encoder, trajectory_features, Model, RefinerOutput};
use crate::rewards::{physical_reward, with_cognitive, RewardBreakdown, RewardConfig};
use crate::scenario::{Scenario, SemanticGrid};
use crate::scoring::{cognitive_score, hierarchical_select, physical_logits};
use crate::trajectory::Trajectory;
use crate::worldmodel::{learned_rollouts, oracle_rollout, rollout_graph, Backend, TransitionVars};

/// Where the cognitive vector `C` comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "command", rename_all = "snake_case")]
pub enum CognitiveSource {
    /// The BEV tokenizer's output, `C := BE(B0)`.
    Distilled,
    Command(Command),
}

/// Encoder outputs cached as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEncoding {
    pub b0: Tensor,
    pub pooled: Tensor,
    pub distilled: Vec<f64>,
}

pub fn encode_scene(model: &Model, grid: &SemanticGrid) -> Result<SceneEncoding, NeuralError> {
    let mut g = Graph::new();
    let enc = encode_grid(&mut g, &model.store, grid)?;
    let be = tokenize(&mut g, &model.store, enc.pooled)?;
    Ok(SceneEncoding {
        b0: g.value(enc.b0).clone(),
        pooled: g.value(enc.pooled).clone(),
        distilled: g.value(be).data().to_vec(),
    })
}

impl SceneEncoding {
    pub fn cognitive(&self, source: CognitiveSource, vocab: &Vocabulary) -> Vec<f64> {
        match source {
            CognitiveSource::Distilled => self.distilled.clone(),
            CognitiveSource::Command(c) => vocab.embedding(c).to_vec(),
        }
    }
}

pub fn refine_values(model: &Model, enc: &SceneEncoding, c: &[f64], speed: f64) -> Result<RefinerOutput, NeuralError> {
    let mut g = Graph::new();
    let b0 = g.input(enc.b0.clone());
    let cv = g.input(Tensor::row(c.to_vec()));
    let r = refine(&mut g, model, b0, cv, speed)?;
    Ok(RefinerOutput::from_graph(&g, r))
}

/// Physical scores (softmax over candidates) from learned rollouts.
pub fn physical_scores(
    model: &Model,
    enc: &SceneEncoding,
    candidates: &[Trajectory],
    c: &[f64],
    speed: f64,
) -> Result<Vec<f64>, NeuralError> {
    let mut g = Graph::new();
    let b0 = g.input(enc.b0.clone());
    let feats = g.input(trajectory_features(candidates));
    let e0 = trajectory_encoder(&mut g, &model.store, feats)?;
    let cv = g.input(Tensor::row(c.to_vec()));
    let w = TransitionVars::load(&mut g, &model.store)?;
    let r = rollout_graph(&mut g, &w, &[b0], e0, cv, model.config.wm_steps)?;
    let logits = physical_logits(&mut g, &model.store, &r, speed)?;
    let s = g.softmax(logits);
    Ok(g.value(s).data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub candidates: Vec<Trajectory>,
    pub log_std: Vec<f64>,
    pub s_phy: Vec<f64>,
    pub s_co: Vec<f64>,
    pub selected: usize,
    pub cognitive: Vec<f64>,
}

impl Plan {
    pub fn selected_trajectory(&self) -> &Trajectory {
        &self.candidates[self.selected]
    }

    pub fn refiner_output(&self) -> RefinerOutput {
        RefinerOutput { candidates: self.candidates.clone(), log_std: self.log_std.clone() }
    }
}

pub fn plan_encoded(model: &Model, enc: &SceneEncoding, c: &[f64], speed: f64, psi: f64) -> Result<Plan, NeuralError> {
    let out = refine_values(model, enc, c, speed)?;
    let s_phy = physical_scores(model, enc, &out.candidates, c, speed)?;
    let s_co = cognitive_score(model, &out.candidates, c)?;
    let selected = hierarchical_select(&s_phy, &s_co, psi);
    Ok(Plan { candidates: out.candidates, log_std: out.log_std, s_phy, s_co, selected, cognitive: c.to_vec() })
}

/// Full pipeline for one scene.
pub fn plan(
    model: &Model,
    grid: &SemanticGrid,
    speed: f64,
    source: CognitiveSource,
    vocab: &Vocabulary,
) -> Result<(SceneEncoding, Plan), NeuralError> {
    let enc = encode_scene(model, grid)?;
    let c = enc.cognitive(source, vocab);
    let p = plan_encoded(model, &enc, &c, speed, model.config.psi)?;
    Ok((enc, p))
}

/// Reward breakdown for each trajectory under the chosen rollout backend.
pub fn reward_breakdowns(
    model: &Model,
    scenario: &Scenario,
    enc: &SceneEncoding,
    trajs: &[Trajectory],
    c: &[f64],
    backend: Backend,
    cfg: &RewardConfig,
) -> Result<Vec<RewardBreakdown>, crate::eval::EvalError> {
    let pipeline = |e: NeuralError| crate::eval::EvalError::Pipeline(e.to_string());
    let maps: Vec<Vec<SemanticGrid>> = match backend {
        Backend::Oracle => {
            let r = oracle_rollout(scenario, model.config.wm_steps)?;
            vec![r.maps; trajs.len()]
        }
        Backend::Learned => learned_rollouts(model, &enc.b0, trajs, c, scenario.grid_spec())
            .map_err(pipeline)?
            .into_iter()
            .map(|r| r.maps)
            .collect(),
    };
    let co = if cfg.w_co != 0.0 { cognitive_score(model, trajs, c).map_err(pipeline)? } else { vec![0.0; trajs.len()] };
    trajs
        .iter()
        .zip(&maps)
        .zip(co)
        .map(|((t, m), co)| {
            let b = physical_reward(t, m, scenario.ego.speed, &scenario.ego.footprint, &scenario.agents, cfg)
                .map_err(|e| crate::eval::EvalError::Pipeline(e.to_string()))?;
            Ok(with_cognitive(b, co, cfg))
        })
        .collect()
}

/// Applies the physical safety veto: if the selected candidate fails the
/// collision or drivable-area term, fall back to the best-reward candidate
/// that passes both. Returns the final index and whether the veto fired.
pub fn apply_veto(selected: usize, rewards: &[RewardBreakdown]) -> (usize, bool) {
    let safe = |b: &RewardBreakdown| b.nc == 1.0 && b.dac == 1.0;
    if safe(&rewards[selected]) {
        return (selected, false);
    }
    let mut best: Option<usize> = None;
    for (i, b) in rewards.iter().enumerate() {
        if safe(b) && best.map_or(true, |j| b.total > rewards[j].total) {
            best = Some(i);
        }
    }
    (best.unwrap_or(selected), true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rb(nc: f64, dac: f64, total: f64) -> RewardBreakdown {
        RewardBreakdown { nc, dac, total, ..Default::default() }
    }

    #[test]
    fn veto_falls_back_to_best_safe_candidate() {
        let r = [rb(0.0, 1.0, 3.0), rb(1.0, 1.0, 2.0), rb(1.0, 1.0, 2.5), rb(1.0, 0.0, 3.5)];
        assert_eq!(apply_veto(0, &r), (2, true));
        assert_eq!(apply_veto(1, &r), (1, false));
        assert_eq!(apply_veto(0, &[rb(0.0, 1.0, 1.0)]), (0, true));
    }
}
