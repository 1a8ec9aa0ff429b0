use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{epoch_seed, MetricsLog, TrainError};
use crate::command::Vocabulary;
use crate::neural::{AdamW, Graph, NeuralError, ParameterStore, Tensor, Var};
use crate::planner::{encode_scene, plan_encoded, reward_breakdowns, SceneEncoding};
use crate::policy::{refine, sample_trajectory, Model, LOG_STD_MAX, LOG_STD_MIN, TRAJ_DIM};
use crate::rewards::{RewardBreakdown, RewardConfig};
use crate::scenario::Scenario;
use crate::scoring::{argmax, physical_target};
use crate::trajectory::Trajectory;
use crate::worldmodel::Backend;

/// Differential entropy of a unit-variance Gaussian coordinate.
const ENTROPY_CONST: f64 = 1.418_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip: f64,
    /// Added to the group standard deviation when normalizing advantages.
    pub phi: f64,
    pub entropy_coef: f64,
    pub il_coef: f64,
    pub inner_epochs: usize,
    pub lr: f64,
    pub epochs: usize,
    pub backend: Backend,
    pub reward: RewardConfig,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip: 0.2,
            phi: 1e-8,
            entropy_coef: 0.01,
            il_coef: 1.0,
            inner_epochs: 3,
            lr: 1e-5,
            epochs: 10,
            backend: Backend::Learned,
            reward: RewardConfig::default(),
            seed: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.group_size < 2 {
            return Err(TrainError::Data(format!("group size must be at least 2, got {}", self.group_size)));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) || self.phi <= 0.0 {
            return Err(TrainError::Data("clip must lie in (0, 1) and phi must be positive".into()));
        }
        Ok(())
    }
}

/// `(R - mean) / (std + phi)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], phi: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (sd + phi)).collect()
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)` with
/// `rho = exp(log_new - log_old)`.
pub fn clipped_surrogate(g: &mut Graph, log_new: Var, log_old: f64, advantage: f64, clip: f64) -> Var {
    let d = g.offset(log_new, -log_old);
    let rho = g.exp(d);
    let bounded = if advantage >= 0.0 {
        g.clamp(rho, f64::NEG_INFINITY, 1.0 + clip)
    } else {
        g.clamp(rho, 1.0 - clip, f64::INFINITY)
    };
    g.scale(bounded, advantage)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub trajectory: Trajectory,
    pub log_density_old: f64,
    pub reward: RewardBreakdown,
    pub advantage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    /// Candidate the samples are drawn around.
    pub selected: usize,
    /// Candidate supervised by the imitation regularizer.
    pub il_target: usize,
    pub samples: Vec<GroupSample>,
}

struct PolicyTerms {
    log_densities: Vec<Var>,
    log_std: Var,
    il: Var,
}

fn policy_terms(
    g: &mut Graph,
    model: &Model,
    enc: &SceneEncoding,
    c: &[f64],
    scenario: &Scenario,
    group: &Group,
) -> Result<PolicyTerms, NeuralError> {
    let b0 = g.input(enc.b0.clone());
    let cv = g.input(Tensor::row(c.to_vec()));
    let r = refine(g, model, b0, cv, scenario.ego.speed)?;
    let mean = g.gather_rows(r.means, &[group.selected])?;
    let log_densities = group
        .samples
        .iter()
        .map(|s| g.gaussian_log_density(&Tensor::row(s.trajectory.flat_xy()), mean, r.log_std))
        .collect::<Result<_, _>>()?;
    let chosen = g.gather_rows(r.means, &[group.il_target])?;
    let expert = g.input(Tensor::row(scenario.expert.flat_xy()));
    let diff = g.sub(chosen, expert)?;
    let diff = g.abs(diff);
    let il = g.sum(diff);
    Ok(PolicyTerms { log_densities, log_std: r.log_std, il })
}

/// Samples a group around the hierarchically selected candidate of the
/// current (old) policy and scores it with the reward engine.
pub fn collect_group<R: Rng + ?Sized>(
    model: &Model,
    scenario: &Scenario,
    enc: &SceneEncoding,
    c: &[f64],
    cfg: &GrpoConfig,
    rng: &mut R,
) -> Result<Group, TrainError> {
    let plan = plan_encoded(model, enc, c, scenario.ego.speed, model.config.psi)?;
    let il_target = argmax(&physical_target(&plan.candidates, &scenario.expert, model.config.tau_d));
    let out = plan.refiner_output();
    let mut trajs = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        trajs.push(sample_trajectory(&out, plan.selected, rng)?.0);
    }
    let rewards = reward_breakdowns(model, scenario, enc, &trajs, c, cfg.backend, &cfg.reward)
        .map_err(|e| TrainError::Data(e.to_string()))?;
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let adv = group_advantages(&totals, cfg.phi);
    let mut group = Group {
        selected: plan.selected,
        il_target,
        samples: trajs
            .into_iter()
            .zip(rewards)
            .zip(adv)
            .map(|((trajectory, reward), advantage)| GroupSample { trajectory, log_density_old: 0.0, reward, advantage })
            .collect(),
    };
    // Old log-densities come from the same graph computation used for the
    // new policy, so the first inner epoch sees a ratio of exactly one.
    let mut g = Graph::new();
    let terms = policy_terms(&mut g, model, enc, c, scenario, &group)?;
    for (s, v) in group.samples.iter_mut().zip(&terms.log_densities) {
        s.log_density_old = g.scalar(*v);
    }
    Ok(group)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoStats {
    pub mean_reward: f64,
    pub surrogate: f64,
    pub objective: f64,
    pub entropy: f64,
    pub il: f64,
    /// Importance ratios seen in the first inner epoch.
    pub first_ratios: Vec<f64>,
    pub rejected_steps: usize,
}

/// Builds the negated GRPO objective for the current parameters. Returns the
/// loss variable together with the surrogate, entropy and IL terms.
fn grpo_loss(
    g: &mut Graph,
    model: &Model,
    enc: &SceneEncoding,
    c: &[f64],
    scenario: &Scenario,
    group: &Group,
    cfg: &GrpoConfig,
) -> Result<(Var, Var, Var, Var, Vec<f64>), NeuralError> {
    let terms = policy_terms(g, model, enc, c, scenario, group)?;
    let mut ratios = Vec::with_capacity(group.samples.len());
    let mut surr: Option<Var> = None;
    for (s, &lp) in group.samples.iter().zip(&terms.log_densities) {
        ratios.push((g.scalar(lp) - s.log_density_old).exp());
        let t = clipped_surrogate(g, lp, s.log_density_old, s.advantage, cfg.clip);
        surr = Some(match surr {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    let surr = g.scale(surr.expect("non-empty group"), 1.0 / group.samples.len() as f64);
    let ls = g.sum(terms.log_std);
    let entropy = g.offset(ls, ENTROPY_CONST * TRAJ_DIM as f64);
    let e = g.scale(entropy, cfg.entropy_coef);
    let il = g.scale(terms.il, -cfg.il_coef);
    let j = g.add(surr, e)?;
    let j = g.add(j, il)?;
    let loss = g.scale(j, -1.0);
    Ok((loss, surr, entropy, terms.il, ratios))
}

/// Gradient of the negated objective with respect to the trainable
/// parameters, without stepping.
pub fn grpo_gradients(
    model: &Model,
    enc: &SceneEncoding,
    c: &[f64],
    scenario: &Scenario,
    group: &Group,
    cfg: &GrpoConfig,
) -> Result<std::collections::BTreeMap<String, Tensor>, TrainError> {
    let mut g = Graph::new();
    let (loss, ..) = grpo_loss(&mut g, model, enc, c, scenario, group, cfg)?;
    g.backward(loss)?;
    Ok(g.param_grads())
}

/// `cfg.inner_epochs` ascent steps on the clipped objective for one group.
pub fn grpo_update(
    model: &mut Model,
    scenario: &Scenario,
    enc: &SceneEncoding,
    c: &[f64],
    group: &Group,
    cfg: &GrpoConfig,
) -> Result<GrpoStats, TrainError> {
    let mut stats = GrpoStats {
        mean_reward: group.samples.iter().map(|s| s.reward.total).sum::<f64>() / group.samples.len() as f64,
        ..Default::default()
    };
    for epoch in 0..cfg.inner_epochs {
        let mut g = Graph::new();
        let (loss, surr, entropy, il, ratios) = grpo_loss(&mut g, model, enc, c, scenario, group, cfg)?;
        if epoch == 0 {
            stats.first_ratios = ratios.clone();
            stats.surrogate = g.scalar(surr);
            stats.entropy = g.scalar(entropy);
            stats.il = g.scalar(il);
            stats.objective = -g.scalar(loss);
        }
        if ratios.iter().any(|r| !r.is_finite()) || !g.scalar(loss).is_finite() {
            stats.rejected_steps += 1;
            continue;
        }
        g.backward(loss)?;
        model.store.optimizer_step(&g.param_grads(), &AdamW::default(), cfg.lr, 0.0)?;
    }
    Ok(stats)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub epoch_mean_reward: Vec<f64>,
    pub updates: u64,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct RlStepRecord<'a> {
    stage: &'a str,
    epoch: usize,
    step: u64,
    scenario: &'a str,
    selected: usize,
    mean_reward: f64,
    surrogate: f64,
    objective: f64,
    entropy: f64,
    il: f64,
    rejected_steps: usize,
    reward_terms: RewardBreakdown,
}

#[derive(Serialize)]
struct RlEpochRecord<'a> {
    stage: &'a str,
    epoch: usize,
    mean_reward: f64,
}

fn mean_breakdown(samples: &[GroupSample]) -> RewardBreakdown {
    let n = samples.len() as f64;
    let mut m = RewardBreakdown::default();
    for s in samples {
        let r = &s.reward;
        m.nc += r.nc / n;
        m.dac += r.dac / n;
        m.ep += r.ep / n;
        m.ttc += r.ttc / n;
        m.comf += r.comf / n;
        m.co += r.co / n;
        m.total += r.total / n;
    }
    m
}

/// Stage-3 loop: only `refiner.` parameters change. `start_epoch` resumes a
/// run whose earlier epochs are already folded into `model`;
/// `on_epoch` is called after every finished epoch (for snapshots).
pub fn train_rl(
    model: &mut Model,
    scenarios: &[Scenario],
    cfg: &GrpoConfig,
    vocab: &Vocabulary,
    log: &mut MetricsLog,
    start_epoch: usize,
    on_epoch: &mut dyn FnMut(usize, &Model) -> Result<(), TrainError>,
) -> Result<RlReport, TrainError> {
    cfg.validate()?;
    if scenarios.is_empty() {
        return Err(TrainError::Data("empty training set".into()));
    }
    model.store.set_trainable_prefixes(Some(vec!["refiner.".into()]));
    let encodings: Vec<SceneEncoding> =
        scenarios.par_iter().map(|s| encode_scene(model, &s.initial_grid)).collect::<Result<_, _>>()?;
    let mut report = RlReport::default();
    for epoch in start_epoch..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, 3, epoch));
        let mut order: Vec<usize> = (0..scenarios.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &scenarios[i];
            let c = vocab.embedding(s.intent_command());
            let group = collect_group(model, s, &encodings[i], c, cfg, &mut rng)?;
            let stats = grpo_update(model, s, &encodings[i], c, &group, cfg)?;
            report.updates += 1;
            total += stats.mean_reward;
            log.record(&RlStepRecord {
                stage: "rl",
                epoch,
                step: report.updates,
                scenario: &s.id,
                selected: group.selected,
                mean_reward: stats.mean_reward,
                surrogate: stats.surrogate,
                objective: stats.objective,
                entropy: stats.entropy,
                il: stats.il,
                rejected_steps: stats.rejected_steps,
                reward_terms: mean_breakdown(&group.samples),
            })?;
        }
        let mean = total / scenarios.len() as f64;
        report.epoch_mean_reward.push(mean);
        log.record(&RlEpochRecord { stage: "rl", epoch, mean_reward: mean })?;
        let log_std = model.store.get("refiner.log_std").expect("log-std parameter");
        if log_std.data().iter().all(|v| *v <= LOG_STD_MIN) {
            let w = format!("epoch {epoch}: every log-std coordinate sits at the {LOG_STD_MIN} floor (entropy collapse)");
            log.record(&serde_json::json!({ "stage": "rl", "epoch": epoch, "warning": w }))?;
            report.warnings.push(w);
        }
        on_epoch(epoch, model)?;
    }
    model.store.set_trainable_prefixes(None);
    log.flush()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    /// First update after which the mean was within tolerance.
    pub updates_to_target: Option<usize>,
    pub final_mean: f64,
    pub final_log_std: f64,
    pub updates: usize,
}

/// GRPO on a one-dimensional Gaussian policy with reward `-|x - target|`,
/// sharing the advantage and surrogate code used for the planner.
pub fn scalar_harness(cfg: &GrpoConfig, target: f64, lr: f64, max_updates: usize, tolerance: f64) -> HarnessReport {
    let mut store = ParameterStore::new(cfg.seed);
    store.insert("mean", Tensor::row(vec![0.0]));
    store.insert("log_std", Tensor::row(vec![0.0]));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reached = None;
    let build = |g: &mut Graph, store: &ParameterStore, x: f64| -> Result<(Var, Var), NeuralError> {
        let m = g.param(store, "mean")?;
        let s = g.param(store, "log_std")?;
        let s = g.clamp(s, LOG_STD_MIN, LOG_STD_MAX);
        Ok((g.gaussian_log_density(&Tensor::row(vec![x]), m, s)?, s))
    };
    for update in 1..=max_updates {
        let m = store.get("mean").expect("mean").item();
        let s = store.get("log_std").expect("log_std").item().clamp(LOG_STD_MIN, LOG_STD_MAX);
        let xs: Vec<f64> = (0..cfg.group_size).map(|_| m + s.exp() * rng.sample::<f64, _>(StandardNormal)).collect();
        let rewards: Vec<f64> = xs.iter().map(|x| -(x - target).abs()).collect();
        let adv = group_advantages(&rewards, cfg.phi);
        let old: Vec<f64> = xs.iter().map(|&x| crate::neural::gaussian_log_density(&[x], &[m], &[s])).collect();
        for _ in 0..cfg.inner_epochs {
            let mut g = Graph::new();
            let mut acc: Option<Var> = None;
            let mut ls = None;
            for ((&x, &lo), &a) in xs.iter().zip(&old).zip(&adv) {
                let (lp, s) = build(&mut g, &store, x).expect("harness parameters");
                ls = Some(s);
                let t = clipped_surrogate(&mut g, lp, lo, a, cfg.clip);
                acc = Some(match acc {
                    Some(v) => g.add(v, t).expect("scalar add"),
                    None => t,
                });
            }
            let surr = g.scale(acc.expect("group"), 1.0 / xs.len() as f64);
            let ent = g.sum(ls.expect("group"));
            let ent = g.scale(ent, cfg.entropy_coef);
            let j = g.add(surr, ent).expect("scalar add");
            let loss = g.scale(j, -1.0);
            g.backward(loss).expect("backward");
            store.optimizer_step(&g.param_grads(), &AdamW::default(), lr, 0.0).expect("finite gradients");
        }
        let m = store.get("mean").expect("mean").item();
        if reached.is_none() && (m - target).abs() <= tolerance {
            reached = Some(update);
        }
    }
    HarnessReport {
        updates_to_target: reached,
        final_mean: store.get("mean").expect("mean").item(),
        final_log_std: store.get("log_std").expect("log_std").item(),
        updates: max_updates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[2.5; 8], 1e-8), vec![0.0; 8]);
        let a = group_advantages(&[0.0, 2.0], 1e-8);
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn surrogate_is_clipped_on_both_sides() {
        for (adv, lp, want) in [(2.0, 1.0, 2.0 * 1.2), (2.0, -1.0, 2.0 * (-1.0f64).exp()), (-1.0, -1.0, -0.8), (-1.0, 1.0, -(1.0f64).exp())] {
            let mut g = Graph::new();
            let x = g.input(Tensor::scalar(lp));
            let s = clipped_surrogate(&mut g, x, 0.0, adv, 0.2);
            assert!((g.scalar(s) - want).abs() < 1e-12, "{adv} {lp}");
        }
    }

    #[test]
    fn scalar_policy_converges() {
        let r = scalar_harness(&GrpoConfig::default(), 3.0, 0.05, 500, 0.2);
        assert!(r.updates_to_target.is_some_and(|u| u <= 500), "{r:?}");
        assert!((r.final_mean - 3.0).abs() <= 0.2, "{r:?}");
    }

    proptest! {
        #[test]
        fn advantages_are_centred(rewards in prop::collection::vec(-10.0..10.0f64, 2..16), shift in -100.0..100.0f64) {
            let a = group_advantages(&rewards, 1e-8);
            prop_assert!((a.iter().sum::<f64>() / a.len() as f64).abs() < 1e-12);
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            for (x, y) in a.iter().zip(group_advantages(&shifted, 1e-8)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn surrogate_magnitude_is_bounded(lp in -3.0..3.0f64, adv in 0.0..5.0f64) {
            let mut g = Graph::new();
            let x = g.input(Tensor::scalar(lp));
            let s = clipped_surrogate(&mut g, x, 0.0, adv, 0.2);
            prop_assert!(g.scalar(s) <= 1.2 * adv + 1e-12);
        }
    }
}
