use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{epoch_seed, MetricsLog, TrainError};
use crate::command::{Vocabulary, COGNITIVE_DIM};
use crate::neural::{AdamW, Graph, LrSchedule, Tensor};
use crate::policy::{distill_loss, encode_grid, refine, tokenize, trajectory_encoder, trajectory_features, Model, RefinerOutput};
use crate::scenario::Scenario;
use crate::scoring::{argmax, cross_entropy, infonce_loss, physical_logits, physical_target};
use crate::trajectory::Pose;
use crate::worldmodel::{decode, focal_loss, rollout_graph, step_tick, TransitionVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    /// When false the cognitive vector is zero and the distillation and
    /// contrastive terms are dropped (the physical-score-only ablation).
    pub cognitive: bool,
}

impl Default for IlConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, lr: 1e-3, warmup_steps: 40, weight_decay: 1e-4, seed: 1, cognitive: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub traj: f64,
    pub distill: f64,
    pub wm: f64,
    pub phy: f64,
    pub co: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [("traj", self.traj), ("distill", self.distill), ("wm", self.wm), ("phy", self.phy), ("co", self.co)]
    }

    fn add(&mut self, o: &LossComponents) {
        self.traj += o.traj;
        self.distill += o.distill;
        self.wm += o.wm;
        self.phy += o.phy;
        self.co += o.co;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        for v in [&mut self.traj, &mut self.distill, &mut self.wm, &mut self.phy, &mut self.co, &mut self.total] {
            *v *= s;
        }
        self
    }
}

/// Builds the five-term objective for one scenario, rolling candidate `j`
/// forward for the world-model term, and returns the losses and gradients.
pub fn il_scenario(
    model: &Model,
    scenario: &Scenario,
    vocab: &Vocabulary,
    j: usize,
    cognitive: bool,
) -> Result<(LossComponents, BTreeMap<String, Tensor>), TrainError> {
    let store = &model.store;
    let cfg = &model.config;
    let n = model.n_candidates();
    let mut g = Graph::new();

    let enc = encode_grid(&mut g, store, &scenario.initial_grid)?;
    let cvec = if cognitive { vocab.embedding(scenario.intent_command()).to_vec() } else { vec![0.0; COGNITIVE_DIM] };
    let c = g.input(Tensor::row(cvec));

    let r = refine(&mut g, model, enc.b0, c, scenario.ego.speed)?;
    let candidates = RefinerOutput::from_graph(&g, r).candidates;
    let target = physical_target(&candidates, &scenario.expert, cfg.tau_d);
    let best = argmax(&target);
    let chosen = g.gather_rows(r.means, &[best])?;
    let expert = g.input(Tensor::row(scenario.expert.flat_xy()));
    let diff = g.sub(chosen, expert)?;
    let diff = g.abs(diff);
    let l_traj = g.sum(diff);

    let feats = g.input(trajectory_features(&candidates));
    let e0 = trajectory_encoder(&mut g, store, feats)?;
    let w = TransitionVars::load(&mut g, store)?;
    let roll = rollout_graph(&mut g, &w, &[enc.b0], e0, c, cfg.wm_steps)?;
    let logits = physical_logits(&mut g, store, &roll, scenario.ego.speed)?;
    let l_phy = cross_entropy(&mut g, logits, &target)?;

    let k = cfg.wm_steps;
    let oracle = scenario.oracle_step(&Pose::ORIGIN, step_tick(k, k)).map_err(|e| TrainError::Data(e.to_string()))?;
    let pred = decode(&mut g, store, roll.states[k - 1][j.min(n - 1)])?;
    let l_wm = focal_loss(&mut g, pred, &oracle)?;

    let mut parts = vec![("traj", l_traj), ("wm", l_wm), ("phy", l_phy)];
    if cognitive {
        let be = tokenize(&mut g, store, enc.pooled)?;
        parts.push(("distill", distill_loss(&mut g, be, c)?));
        parts.push(("co", infonce_loss(&mut g, store, &scenario.expert, &candidates, c, cfg.nce_negatives, cfg.nce_temperature)?));
    }
    for &(name, v) in &parts {
        let x = g.scalar(v);
        if !x.is_finite() {
            return Err(TrainError::Divergence { component: format!("L_{name}"), detail: format!("{} on {}", x, scenario.id) });
        }
    }
    let mut total = l_traj;
    for (_, v) in &parts[1..] {
        total = g.add(total, *v)?;
    }
    g.backward(total)?;
    let value = |name: &str| parts.iter().find(|p| p.0 == name).map_or(0.0, |p| g.scalar(p.1));
    let losses = LossComponents {
        traj: value("traj"),
        distill: value("distill"),
        wm: value("wm"),
        phy: value("phy"),
        co: value("co"),
        total: g.scalar(total),
    };
    Ok((losses, g.param_grads()))
}

/// One optimizer step over a batch. Scenario gradients are computed in
/// parallel and reduced in batch order, so results do not depend on the
/// thread count.
pub fn il_step(
    model: &mut Model,
    batch: &[(&Scenario, usize)],
    vocab: &Vocabulary,
    lr: f64,
    weight_decay: f64,
    cognitive: bool,
) -> Result<LossComponents, TrainError> {
    let results: Vec<_> = batch.par_iter().map(|(s, j)| il_scenario(model, s, vocab, *j, cognitive)).collect();
    let mut sum = LossComponents::default();
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in results {
        let (l, gr) = r?;
        sum.add(&l);
        for (name, t) in gr {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for t in grads.values_mut() {
        for v in t.data_mut() {
            *v *= inv;
        }
    }
    model.store.optimizer_step(&grads, &AdamW::default(), lr, weight_decay)?;
    Ok(sum.scaled(inv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlReport {
    pub epoch_means: Vec<LossComponents>,
    pub steps: u64,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    stage: &'a str,
    epoch: usize,
    step: u64,
    lr: f64,
    losses: LossComponents,
}

#[derive(Serialize)]
struct EpochRecord<'a> {
    stage: &'a str,
    epoch: usize,
    epoch_mean: LossComponents,
}

/// Runs `cfg.epochs` passes over `scenarios` in a per-epoch shuffled order.
pub fn train_il(
    model: &mut Model,
    scenarios: &[Scenario],
    cfg: &IlConfig,
    vocab: &Vocabulary,
    log: &mut MetricsLog,
) -> Result<IlReport, TrainError> {
    if scenarios.is_empty() {
        return Err(TrainError::Data("empty training set".into()));
    }
    model.store.set_trainable_prefixes(None);
    let bs = cfg.batch_size.max(1);
    let per_epoch = scenarios.len().div_ceil(bs) as u64;
    let schedule = LrSchedule { base_lr: cfg.lr, warmup_steps: cfg.warmup_steps, total_steps: per_epoch * cfg.epochs as u64 };
    let n = model.n_candidates();
    let mut report = IlReport { epoch_means: Vec::new(), steps: 0 };
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, 2, epoch));
        let mut order: Vec<usize> = (0..scenarios.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = LossComponents::default();
        for chunk in order.chunks(bs) {
            let batch: Vec<(&Scenario, usize)> = chunk.iter().map(|&i| (&scenarios[i], rng.gen_range(0..n))).collect();
            let lr = schedule.lr(report.steps + 1);
            let l = il_step(model, &batch, vocab, lr, cfg.weight_decay, cfg.cognitive)?;
            report.steps += 1;
            acc.add(&l.scaled(chunk.len() as f64));
            log.record(&StepRecord { stage: "il", epoch, step: report.steps, lr, losses: l })?;
        }
        let mean = acc.scaled(1.0 / scenarios.len() as f64);
        log.record(&EpochRecord { stage: "il", epoch, epoch_mean: mean })?;
        report.epoch_means.push(mean);
    }
    log.flush()?;
    Ok(report)
}
