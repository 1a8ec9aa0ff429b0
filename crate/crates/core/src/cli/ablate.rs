//! The six-arm ablation matrix:
//!
//! | arm | training | inference |
//! |---|---|---|
//! | A0 | IL without the cognitive vector | zero `C`, physical argmax |
//! | A1 | IL with distillation and cognition | physical argmax |
//! | A2 | as A1 | hierarchical selection |
//! | B1 | A2 + GRPO, cognitive reward only | hierarchical selection |
//! | B2 | A2 + GRPO, physical reward only | hierarchical selection |
//! | B3 | A2 + GRPO, dual reward | hierarchical selection |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::anyhow;

use cophy::command::Vocabulary;
use cophy::eval::{evaluate_policy, CognitiveMode, EvalOptions, Report};
use cophy::policy::Model;
use cophy::scenario::{generate_batch, Scenario};
use cophy::training::MetricsLog;

use super::{build_bank, load_scenarios, reward_mode, run_il, run_rl, stage_metadata, write_file, write_report, CliError, RunConfig};

/// Seed offset separating held-out scenarios from training scenarios.
pub const HELD_OUT_SEED_OFFSET: u64 = 1_000_000;

pub const ARMS: [&str; 6] = ["A0", "A1", "A2", "B1", "B2", "B3"];

/// First `per_template` scenarios of each template, in dataset order.
pub fn per_template_subset(scenarios: &[Scenario], per_template: usize) -> Vec<Scenario> {
    let mut seen = std::collections::BTreeMap::new();
    scenarios
        .iter()
        .filter(|s| {
            let n = seen.entry(s.template).or_insert(0usize);
            *n += 1;
            *n <= per_template
        })
        .cloned()
        .collect()
}

fn log_file(dir: &Path, name: &str) -> Result<MetricsLog, CliError> {
    let path = dir.join(name);
    let f = std::fs::File::create(&path).map_err(|e| CliError::data(anyhow!(e).context(format!("creating {}", path.display()))))?;
    Ok(MetricsLog::new(Box::new(std::io::BufWriter::new(f))))
}

pub fn run(
    cfg: &RunConfig,
    preset: &str,
    data: Option<&Path>,
    eval_data: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    if preset != "table3" {
        return Err(CliError::usage(anyhow!("unknown preset '{preset}' (available: table3)")));
    }
    let dir = out.unwrap_or_else(|| PathBuf::from("ablation"));
    let templates = cfg.data.template_list()?;
    let train = match data {
        Some(p) => load_scenarios(p)?,
        None => generate_batch(&templates, cfg.data.count, cfg.seed),
    };
    let held = match eval_data {
        Some(p) => load_scenarios(p)?,
        None => generate_batch(&templates, cfg.data.eval_count, cfg.seed.wrapping_add(HELD_OUT_SEED_OFFSET)),
    };
    let rl_set = per_template_subset(&train, cfg.data.rl_count);
    let bank = build_bank(cfg, &train)?;
    let vocab = Vocabulary::default();

    let mut plain_cfg = cfg.clone();
    plain_cfg.il.cognitive = false;
    println!("ablate: IL without cognition on {} scenarios", train.len());
    let plain = run_il(&plain_cfg, &train, bank.clone(), &mut log_file(&dir, "il-plain.metrics.ndjson")?)?;
    write_file(&dir.join("il-plain.ckpt"), &plain.to_checkpoint(stage_metadata(&plain_cfg, "il")).to_bytes())?;

    println!("ablate: IL with cognition on {} scenarios", train.len());
    let full = run_il(cfg, &train, bank, &mut log_file(&dir, "il.metrics.ndjson")?)?;
    write_file(&dir.join("il.ckpt"), &full.to_checkpoint(stage_metadata(cfg, "il")).to_bytes())?;

    let mut rl_models: Vec<(String, Model)> = Vec::new();
    for (arm, mode) in [("B1", "cognitive"), ("B2", "physical"), ("B3", "dual")] {
        let mut arm_cfg = cfg.clone();
        arm_cfg.rl.reward = reward_mode(mode, cfg.rl.reward)?;
        let mut m = full.clone();
        println!("ablate: {arm} GRPO ({mode} reward) on {} scenarios", rl_set.len());
        run_rl(&arm_cfg, &mut m, &rl_set, 0, None, &mut log_file(&dir, &format!("{arm}.metrics.ndjson"))?)?;
        write_file(&dir.join(format!("{arm}.ckpt")), &m.to_checkpoint(stage_metadata(&arm_cfg, "rl")).to_bytes())?;
        rl_models.push((arm.to_string(), m));
    }

    let base = EvalOptions { psi: cfg.eval.psi, ..cfg.eval.clone() };
    let arm_opts = |arm: &str| -> EvalOptions {
        match arm {
            "A0" => EvalOptions { mode: "A0".into(), psi: -1.0, cognitive: CognitiveMode::Off, ..base.clone() },
            "A1" => EvalOptions { mode: "A1".into(), psi: -1.0, ..base.clone() },
            other => EvalOptions { mode: other.into(), ..base.clone() },
        }
    };
    let mut reports: Vec<(String, Report)> = Vec::new();
    for arm in ARMS {
        let model = match arm {
            "A0" => &plain,
            "A1" | "A2" => &full,
            other => &rl_models.iter().find(|(a, _)| a == other).expect("trained arm").1,
        };
        let report = evaluate_policy(model, &held, &vocab, &arm_opts(arm), cfg.echo())
            .map_err(|e| CliError::data(anyhow!(e).context(format!("evaluating {arm}"))))?;
        write_report(&report, &dir.join(format!("{arm}.json")), None)?;
        reports.push((arm.to_string(), report));
    }

    let table = comparison_table(&reports);
    write_file(&dir.join("table.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn comparison_table(reports: &[(String, Report)]) -> String {
    let mut t = String::from("arm,pdms,epdms,nc,dac,ep,ttc,c\n");
    for (arm, r) in reports {
        let s = &r.summary;
        let _ = writeln!(
            t,
            "{arm},{:.5},{:.5},{:.5},{:.5},{:.5},{:.5},{:.5}",
            s.pdms, s.epdms, s.sub.nc, s.sub.dac, s.sub.ep, s.sub.ttc, s.sub.c
        );
    }
    t
}
