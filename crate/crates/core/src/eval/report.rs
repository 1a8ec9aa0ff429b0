use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{epdms, pdms, score_trajectory, EvalError, SubScores};
use crate::command::{Vocabulary, COGNITIVE_DIM};
use crate::planner::{apply_veto, encode_scene, plan_encoded, reward_breakdowns, CognitiveSource};
use crate::policy::Model;
use crate::rewards::{RewardBreakdown, RewardConfig};
use crate::scenario::{Scenario, Template};
use crate::trajectory::Trajectory;
use crate::worldmodel::Backend;

pub const REPORT_SCHEMA: &str = "cophy-report/1";

/// Which cognitive vector drives planning during evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CognitiveMode {
    /// The scenario's labelled intent command.
    #[default]
    Command,
    /// The tokenizer output of the initial BEV state.
    Distilled,
    /// A zero vector, for models trained without cognition.
    Off,
}

impl std::str::FromStr for CognitiveMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "command" => Ok(Self::Command),
            "distilled" => Ok(Self::Distilled),
            "off" => Ok(Self::Off),
            other => Err(format!("unknown cognitive mode '{other}' (expected command, distilled or off)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Free-form label for the evaluated policy, e.g. `il` or `rl`.
    pub mode: String,
    pub psi: f64,
    pub backend: Backend,
    pub cognitive: CognitiveMode,
    /// Replace a selection that fails collision or drivable-area checks in
    /// its rollout by the best passing candidate.
    pub veto: bool,
    pub reward: RewardConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: "il".into(),
            psi: 0.0,
            backend: Backend::Learned,
            cognitive: CognitiveMode::Command,
            veto: false,
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub id: String,
    pub template: Template,
    pub seed: u64,
    pub selected: usize,
    pub veto: bool,
    pub sub: SubScores,
    pub pdms: f64,
    pub epdms: f64,
    /// Reward breakdown of the selected candidate; absent for expert reports.
    pub reward: Option<RewardBreakdown>,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub pdms: f64,
    pub epdms: f64,
    pub sub: SubScores,
    pub veto_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSummary {
    pub template: Template,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub options: EvalOptions,
    /// Effective configuration of the producing command, echoed verbatim.
    pub config: serde_json::Value,
    pub summary: Summary,
    pub per_template: Vec<TemplateSummary>,
    pub rows: Vec<ScenarioRow>,
}

fn summarize<'a>(rows: impl Iterator<Item = &'a ScenarioRow>) -> Summary {
    let mut s = Summary::default();
    let mut vetoes = 0usize;
    for r in rows {
        s.count += 1;
        s.pdms += r.pdms;
        s.epdms += r.epdms;
        let a = &mut s.sub;
        let b = &r.sub;
        for (x, y) in [
            (&mut a.nc, b.nc),
            (&mut a.dac, b.dac),
            (&mut a.ddc, b.ddc),
            (&mut a.tl, b.tl),
            (&mut a.ep, b.ep),
            (&mut a.ttc, b.ttc),
            (&mut a.c, b.c),
            (&mut a.lk, b.lk),
            (&mut a.ec, b.ec),
        ] {
            *x += y;
        }
        vetoes += r.veto as usize;
    }
    if s.count > 0 {
        let inv = 1.0 / s.count as f64;
        s.pdms *= inv;
        s.epdms *= inv;
        let a = &mut s.sub;
        for x in [&mut a.nc, &mut a.dac, &mut a.ddc, &mut a.tl, &mut a.ep, &mut a.ttc, &mut a.c, &mut a.lk, &mut a.ec] {
            *x *= inv;
        }
        s.veto_rate = vetoes as f64 * inv;
    }
    s
}

impl Report {
    pub fn from_rows(options: EvalOptions, config: serde_json::Value, rows: Vec<ScenarioRow>) -> Self {
        let summary = summarize(rows.iter());
        let per_template = Template::ALL
            .iter()
            .filter(|t| rows.iter().any(|r| r.template == **t))
            .map(|&t| TemplateSummary { template: t, summary: summarize(rows.iter().filter(|r| r.template == t)) })
            .collect();
        Self { schema: REPORT_SCHEMA.into(), options, config, summary, per_template, rows }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let r: Report = serde_json::from_str(text).map_err(|e| EvalError::Pipeline(format!("report parse: {e}")))?;
        if r.schema != REPORT_SCHEMA {
            return Err(EvalError::Pipeline(format!("report schema {} (expected {})", r.schema, REPORT_SCHEMA)));
        }
        Ok(r)
    }

    /// Summary table as CSV: one row for the whole dataset, then one per template.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("group,count,pdms,epdms,nc,dac,ddc,tl,ep,ttc,c,lk,ec,veto_rate\n");
        let mut line = |name: &str, s: &Summary| {
            let u = &s.sub;
            out.push_str(&format!(
                "{name},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                s.count, s.pdms, s.epdms, u.nc, u.dac, u.ddc, u.tl, u.ep, u.ttc, u.c, u.lk, u.ec, s.veto_rate
            ));
        };
        line("all", &self.summary);
        for t in &self.per_template {
            line(t.template.name(), &t.summary);
        }
        out
    }
}

fn row(scenario: &Scenario, traj: Trajectory, selected: usize, veto: bool, reward: Option<RewardBreakdown>) -> Result<ScenarioRow, EvalError> {
    let sub = score_trajectory(scenario, &traj)?;
    Ok(ScenarioRow {
        id: scenario.id.clone(),
        template: scenario.template,
        seed: scenario.seed,
        selected,
        veto,
        pdms: pdms(&sub),
        epdms: epdms(&sub),
        sub,
        reward,
        trajectory: traj,
    })
}

/// Plans one scenario and scores the selected trajectory.
pub fn evaluate_scenario(
    model: &Model,
    scenario: &Scenario,
    vocab: &Vocabulary,
    opts: &EvalOptions,
) -> Result<ScenarioRow, EvalError> {
    let pipeline = |e: crate::neural::NeuralError| EvalError::Pipeline(e.to_string());
    let enc = encode_scene(model, &scenario.initial_grid).map_err(pipeline)?;
    let c = match opts.cognitive {
        CognitiveMode::Command => enc.cognitive(CognitiveSource::Command(scenario.intent_command()), vocab),
        CognitiveMode::Distilled => enc.cognitive(CognitiveSource::Distilled, vocab),
        CognitiveMode::Off => vec![0.0; COGNITIVE_DIM],
    };
    let plan = plan_encoded(model, &enc, &c, scenario.ego.speed, opts.psi).map_err(pipeline)?;
    let (selected, veto, reward) = if opts.veto {
        let rewards = reward_breakdowns(model, scenario, &enc, &plan.candidates, &c, opts.backend, &opts.reward)?;
        let (idx, veto) = apply_veto(plan.selected, &rewards);
        (idx, veto, rewards[idx])
    } else {
        let sel = std::slice::from_ref(plan.selected_trajectory());
        let rewards = reward_breakdowns(model, scenario, &enc, sel, &c, opts.backend, &opts.reward)?;
        (plan.selected, false, rewards[0])
    };
    row(scenario, plan.candidates[selected].clone(), selected, veto, Some(reward))
}

/// Evaluates `model` on every scenario. Rows keep dataset order regardless
/// of the thread count.
pub fn evaluate_policy(
    model: &Model,
    scenarios: &[Scenario],
    vocab: &Vocabulary,
    opts: &EvalOptions,
    config: serde_json::Value,
) -> Result<Report, EvalError> {
    let rows = scenarios.par_iter().map(|s| evaluate_scenario(model, s, vocab, opts)).collect::<Result<Vec<_>, _>>()?;
    Ok(Report::from_rows(opts.clone(), config, rows))
}

/// Scores the scenarios' own expert trajectories.
pub fn evaluate_expert(scenarios: &[Scenario], config: serde_json::Value) -> Result<Report, EvalError> {
    let rows = scenarios.par_iter().map(|s| row(s, s.expert.clone(), 0, false, None)).collect::<Result<Vec<_>, _>>()?;
    let opts = EvalOptions { mode: "expert".into(), ..EvalOptions::default() };
    Ok(Report::from_rows(opts, config, rows))
}
