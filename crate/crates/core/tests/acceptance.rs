//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain binary
//! (`cargo test --test acceptance`) and exits non-zero if any criterion fails.
//!
//! The IL model trained for the IL criterion is shared by the world-model,
//! RL and intent-control criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command as Process;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cophy::command::{Command, Vocabulary, COGNITIVE_DIM};
use cophy::eval::{epdms, evaluate_expert, evaluate_policy, pdms, EvalOptions, SubScores};
use cophy::neural::{Graph, Tensor, Var};
use cophy::planner::{encode_scene, plan_encoded};
use cophy::policy::{distill_loss, trajectory_encoder, trajectory_features, Model, ModelConfig};
use cophy::rewards::{comfort_reward, ep_reward, ttc_reward, RewardConfig};
use cophy::scenario::{generate_batch, Scenario, Template};
use cophy::scoring::{argmax, hierarchical_select, infonce_from_cosines};
use cophy::server::{Planner, Session, SessionConfig};
use cophy::training::{
    collect_group, group_advantages, grpo_gradients, grpo_update, scalar_harness, train_il, train_rl, GrpoConfig, IlConfig,
    MetricsLog,
};
use cophy::trajectory::{cluster_prototypes, kinematics, PrototypeBank, Trajectory};
use cophy::worldmodel::{learned_rollouts, mean_iou, oracle_rollout, rollout_graph, TransitionVars};

const SEED: u64 = 1;
const HELD_OUT: u64 = 1_000_000;
const INTENT_SEEDS: u64 = 2_000_000;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(results: &mut Vec<Outcome>, name: &'static str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    results.push(Outcome { name, pass, detail });
}

// ---------------------------------------------------------------------------
// formula exactness

fn formula_exactness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let v: Vec<f64> = (0..9).map(|_| rng.gen::<f64>()).collect();
        let s = SubScores { nc: v[0], dac: v[1], ddc: v[2], tl: v[3], ep: v[4], ttc: v[5], c: v[6], lk: v[7], ec: v[8] };
        let gates = v[0] * v[1];
        let want_pdms = gates * (v[4] * (5.0 / 12.0) + v[5] * (5.0 / 12.0) + v[6] * (2.0 / 12.0));
        let want_epdms =
            gates * v[2] * v[3] * (v[5] * 0.3125 + v[6] * 0.125 + v[4] * 0.3125 + v[7] * 0.125 + v[8] * 0.125);
        worst = worst.max((pdms(&s) - want_pdms).abs()).max((epdms(&s) - want_epdms).abs());
    }
    let mut gates_ok = true;
    for base in [SubScores::PERFECT, SubScores { ep: 0.3, ttc: 0.7, c: 0.9, lk: 0.5, ec: 0.2, ..SubScores::PERFECT }] {
        gates_ok &= pdms(&SubScores { nc: 0.0, ..base }) == 0.0;
        gates_ok &= pdms(&SubScores { dac: 0.0, ..base }) == 0.0;
        gates_ok &= epdms(&SubScores { tl: 0.0, ..base }) == 0.0;
        gates_ok &= epdms(&SubScores { ddc: 0.0, ..base }) == 0.0;
        gates_ok &= epdms(&SubScores { nc: 0.0, ..base }) == 0.0;
    }
    gates_ok &= pdms(&SubScores::PERFECT) == 1.0 && epdms(&SubScores::PERFECT) == 1.0;
    (worst <= 1e-12 && gates_ok, format!("max |err| {worst:.2e} over 100 vectors, gate cases {}", ok(gates_ok)))
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "violated"
    }
}

// ---------------------------------------------------------------------------
// reward analytic points

fn reward_points() -> (bool, String) {
    let cfg = RewardConfig::default();
    let logistic_one = 1.0 / (1.0 + (-1.0f64).exp());
    let mut points = Vec::new();
    for v in [0.0, 2.5, 4.0, 7.3] {
        points.push(ep_reward(v * cfg.horizon_s, v, &cfg) == 0.5);
    }
    points.push(ttc_reward(5.0, &cfg) == 0.5);
    points.push((ttc_reward(7.0, &cfg) - logistic_one).abs() <= 1e-9);
    points.push(comfort_reward(0.0, 0.0, &cfg) == 1.0);
    let exact = points.iter().all(|b| *b);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut violations = 0;
    for _ in 0..1000 {
        let v = rng.gen_range(0.0..15.0);
        let (a, b) = (rng.gen_range(-20.0..80.0), rng.gen_range(-20.0..80.0));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        violations += (ep_reward(lo, v, &cfg) > ep_reward(hi, v, &cfg)) as usize;

        let (a, b) = (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        violations += (ttc_reward(lo, &cfg) > ttc_reward(hi, &cfg)) as usize;

        let (a1, a2) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        let (j1, j2) = (rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0));
        let (alo, ahi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let (jlo, jhi) = if j1 <= j2 { (j1, j2) } else { (j2, j1) };
        violations += (comfort_reward(alo, jlo, &cfg) < comfort_reward(ahi, jhi, &cfg)) as usize;
    }
    (
        exact && violations == 0,
        format!("analytic points {}/{} exact, {violations} monotonicity violations in 3x1000 pairs", points.iter().filter(|b| **b).count(), points.len()),
    )
}

// ---------------------------------------------------------------------------
// GRPO invariants

fn small_model(scenarios: &[Scenario], seed: u64) -> Model {
    let experts: Vec<Trajectory> = scenarios.iter().map(|s| s.expert.clone()).collect();
    let bank = cluster_prototypes(&experts, 8, seed).expect("clustering").bank;
    Model::new(ModelConfig::default(), bank, seed).expect("model")
}

fn max_param_diff(a: &Model, b: &Model) -> f64 {
    a.store
        .iter()
        .map(|(k, t)| {
            let u = b.store.get(k).expect("same parameters");
            t.data().iter().zip(u.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn grpo_invariants() -> (bool, String) {
    let scenarios = generate_batch(&Template::ALL, 2, 7);
    let model = small_model(&scenarios, 7);
    let vocab = Vocabulary::default();
    let cfg = GrpoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);

    let (mut zero_grad, mut worst_ratio, mut worst_shift): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for s in &scenarios {
        let enc = encode_scene(&model, &s.initial_grid).expect("encode");
        let c = vocab.embedding(s.intent_command());
        let group = collect_group(&model, s, &enc, c, &cfg, &mut rng).expect("group");

        let mut flat = group.clone();
        for x in &mut flat.samples {
            x.reward.total = 0.75;
        }
        let adv = group_advantages(&flat.samples.iter().map(|x| x.reward.total).collect::<Vec<_>>(), cfg.phi);
        for (x, a) in flat.samples.iter_mut().zip(adv) {
            x.advantage = a;
        }
        let surrogate_only = GrpoConfig { entropy_coef: 0.0, il_coef: 0.0, ..cfg.clone() };
        let grads = grpo_gradients(&model, &enc, c, s, &flat, &surrogate_only).expect("gradients");
        zero_grad = zero_grad.max(grads.values().flat_map(|t| t.data().iter().map(|v| v.abs())).fold(0.0, f64::max));

        let mut m1 = model.clone();
        let stats = grpo_update(&mut m1, s, &enc, c, &group, &cfg).expect("update");
        worst_ratio = worst_ratio.max(stats.first_ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max));

        let mut shifted = group.clone();
        let totals: Vec<f64> = shifted.samples.iter().map(|x| x.reward.total + 17.25).collect();
        for (x, a) in shifted.samples.iter_mut().zip(group_advantages(&totals, cfg.phi)) {
            x.advantage = a;
        }
        let mut m2 = model.clone();
        grpo_update(&mut m2, s, &enc, c, &shifted, &cfg).expect("update");
        worst_shift = worst_shift.max(max_param_diff(&m1, &m2));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst_mean: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..32);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let a = group_advantages(&r, cfg.phi);
        worst_mean = worst_mean.max((a.iter().sum::<f64>() / n as f64).abs());
    }

    let t = Instant::now();
    let h = scalar_harness(&cfg, 3.0, 0.05, 500, 0.2);
    let secs = t.elapsed().as_secs_f64();
    let converged = h.updates_to_target.is_some() && (h.final_mean - 3.0).abs() <= 0.2 && secs <= 60.0;

    let pass = zero_grad == 0.0 && worst_mean <= 1e-12 && worst_ratio == 0.0 && worst_shift <= 1e-9 && converged;
    (
        pass,
        format!(
            "equal-reward grad max {zero_grad:.1e}, advantage mean max {worst_mean:.1e}, first-epoch |rho-1| max {worst_ratio:.1e}, \
             shift update diff {worst_shift:.1e}, harness target reached at update {:?} (final {:.3}, {secs:.2} s)",
            h.updates_to_target, h.final_mean
        ),
    )
}

// ---------------------------------------------------------------------------
// gradient integrity

/// Relative error between analytic and central-difference gradients of a
/// scalar function with respect to every input.
fn fd_rel_err(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let y = f(&mut g, &vars);
    g.backward(y).expect("backward");
    let (mut diff, mut scale_a, mut scale_n) = (0.0, 0.0, 0.0);
    let h = 1e-5;
    let eval = |xs: Vec<Tensor>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.into_iter().map(|t| g.input(t)).collect();
        let y = f(&mut g, &vars);
        g.scalar(y)
    };
    for (j, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[j]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let bump = |d: f64| {
                let mut xs = inputs.to_vec();
                xs[j].data_mut()[i] += d;
                eval(xs)
            };
            let num = (bump(h) - bump(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            diff += (a - num) * (a - num);
            scale_a += a * a;
            scale_n += num * num;
        }
    }
    let scale = scale_a.sqrt() + scale_n.sqrt();
    if scale < 1e-12 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// Contracts a tensor-valued output with fixed random weights so that every
/// output element contributes to the scalar.
fn contract(g: &mut Graph, y: Var, w: &Tensor) -> Var {
    let wv = g.input(w.clone());
    let p = g.mul(y, wv).expect("contract shape");
    g.sum(p)
}

type OpCase = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;

fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        (
            "dense",
            Box::new(|rng| {
                let (n, i, o) = (rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..6));
                let w = randn(rng, &[n, o], 1.0);
                let inputs = [randn(rng, &[n, i], 1.0), randn(rng, &[i, o], 0.7), randn(rng, &[1, o], 0.5)];
                fd_rel_err(&inputs, &move |g, v| {
                    let y = g.matmul(v[0], v[1]).unwrap();
                    let y = g.add_bias(y, v[2]).unwrap();
                    let y = g.tanh(y);
                    contract(g, y, &w)
                })
            }),
        ),
        (
            "conv",
            Box::new(|rng| {
                let (h, wd, ci, co) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(1..4), rng.gen_range(1..4));
                let k = [1, 3][rng.gen_range(0..2)];
                let w = randn(rng, &[h, wd, co], 1.0);
                let inputs = [randn(rng, &[h, wd, ci], 1.0), randn(rng, &[k, k, ci, co], 0.5), randn(rng, &[co], 0.3)];
                fd_rel_err(&inputs, &move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2]).unwrap();
                    let y = g.tanh(y);
                    contract(g, y, &w)
                })
            }),
        ),
        (
            "softmax",
            Box::new(|rng| {
                let n = rng.gen_range(2..12);
                let w = randn(rng, &[1, n], 1.0);
                let inputs = [randn(rng, &[1, n], 2.0)];
                fd_rel_err(&inputs, &move |g, v| {
                    let y = g.softmax(v[0]);
                    contract(g, y, &w)
                })
            }),
        ),
        (
            "focal",
            Box::new(|rng| {
                let (h, wd, c) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4));
                let target = Tensor::new(vec![h, wd, c], (0..h * wd * c).map(|_| rng.gen_bool(0.3) as u8 as f64).collect()).unwrap();
                let inputs = [randn(rng, &[h, wd, c], 1.5)];
                fd_rel_err(&inputs, &move |g, v| {
                    let p = g.sigmoid(v[0]);
                    g.focal(p, &target, 2.0, 0.25, 1e-7).unwrap()
                })
            }),
        ),
        (
            "infonce",
            Box::new(|rng| {
                let (m, d) = (rng.gen_range(2..8), rng.gen_range(2..10));
                let temperature = rng.gen_range(0.05..1.0);
                let inputs = [randn(rng, &[1 + m, d], 1.0), randn(rng, &[1, d], 1.0)];
                fd_rel_err(&inputs, &move |g, v| {
                    let rows = g.normalize_rows(v[0], 1e-9);
                    let anchor = g.normalize_rows(v[1], 1e-9);
                    let anchor = g.repeat_rows(anchor, 1 + m).unwrap();
                    let prod = g.mul(rows, anchor).unwrap();
                    let cos = g.row_sum(prod);
                    let cos = g.reshape(cos, &[1, 1 + m]).unwrap();
                    infonce_from_cosines(g, cos, temperature).unwrap()
                })
            }),
        ),
        (
            "distill",
            Box::new(|rng| {
                let d = rng.gen_range(2..12);
                let c = randn(rng, &[1, COGNITIVE_DIM], 1.0);
                let norm = c.l2_norm();
                let c = Tensor::new(vec![1, COGNITIVE_DIM], c.data().iter().map(|x| x / norm).collect()).unwrap();
                let inputs = [randn(rng, &[1, d], 1.0), randn(rng, &[d, COGNITIVE_DIM], 0.5)];
                fd_rel_err(&inputs, &move |g, v| {
                    let z = g.matmul(v[0], v[1]).unwrap();
                    let be = g.normalize_rows(z, 1e-9);
                    let cv = g.input(c.clone());
                    distill_loss(g, be, cv).unwrap()
                })
            }),
        ),
        (
            "gaussian",
            Box::new(|rng| {
                let n = rng.gen_range(1..17);
                let sample = randn(rng, &[1, n], 2.0);
                let inputs = [randn(rng, &[1, n], 1.0), randn(rng, &[1, n], 0.5)];
                fd_rel_err(&inputs, &move |g, v| g.gaussian_log_density(&sample, v[0], v[1]).unwrap())
            }),
        ),
    ]
}

fn gradient_integrity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, case) in op_cases() {
        let worst = (0..100).map(|_| case(&mut rng)).fold(0.0, f64::max);
        pass &= worst < 1e-4;
        parts.push(format!("{name} {worst:.1e}"));
    }
    (pass, format!("max rel err over 100 instances: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// hierarchical selection

fn hierarchical_selection() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (mut filtered_bad, mut argmax_bad) = (0, 0);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..80);
        let phy: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let co: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let psi = rng.gen_range(-1.0..1.0);
        let i = hierarchical_select(&phy, &co, psi);
        if co.iter().any(|c| *c >= psi) && co[i] < psi {
            filtered_bad += 1;
        }
        let best_in_omega = phy.iter().zip(&co).filter(|(_, c)| **c >= psi).map(|(p, _)| *p).fold(f64::NEG_INFINITY, f64::max);
        if co.iter().any(|c| *c >= psi) && phy[i] != best_in_omega {
            filtered_bad += 1;
        }
        if hierarchical_select(&phy, &co, -1.0) != argmax(&phy) {
            argmax_bad += 1;
        }
    }
    (
        filtered_bad == 0 && argmax_bad == 0,
        format!("10000 vectors: {filtered_bad} filter violations, {argmax_bad} psi=-1 mismatches"),
    )
}

// ---------------------------------------------------------------------------
// IL stage

struct Trained {
    train: Vec<Scenario>,
    bank: PrototypeBank,
    model: Model,
}

fn il_stage(results: &mut Vec<Outcome>) -> Trained {
    let train = generate_batch(&Template::ALL, 50, SEED);
    let experts: Vec<Trajectory> = train.iter().map(|s| s.expert.clone()).collect();
    let bank = cluster_prototypes(&experts, 64, SEED).expect("clustering").bank;
    let mut model = Model::new(ModelConfig::default(), bank.clone(), SEED).expect("model");
    let cfg = IlConfig { seed: SEED, ..IlConfig::default() };
    let t = Instant::now();
    let rep = train_il(&mut model, &train, &cfg, &Vocabulary::default(), &mut MetricsLog::discard()).expect("IL");
    let secs = t.elapsed().as_secs_f64();
    let (first, last) = (rep.epoch_means[0], *rep.epoch_means.last().expect("epochs"));
    let mut drops = Vec::new();
    let mut all = true;
    for ((name, a), (_, b)) in first.named().iter().zip(last.named()) {
        let drop = 1.0 - b / a;
        all &= drop >= 0.30;
        drops.push(format!("{name} {a:.4}->{b:.4} ({:+.1}%)", -100.0 * drop));
    }
    let expert = evaluate_expert(&train, serde_json::Value::Null).expect("expert eval");
    let gates = expert.rows.iter().filter(|r| r.sub.nc == 1.0 && r.sub.dac == 1.0).count();
    let threads = rayon::current_num_threads();
    let pass = all && gates == train.len() && secs <= 30.0 * 60.0;
    report(
        results,
        "il_stage",
        pass,
        format!(
            "{} scenarios x {} epochs; {}; expert NC=DAC=1 on {gates}/{}; {secs:.0} s on {threads} thread(s)",
            train.len(),
            cfg.epochs,
            drops.join(", "),
            train.len()
        ),
    );
    Trained { train, bank, model }
}

// ---------------------------------------------------------------------------
// world model

fn world_model(t: &Trained) -> (bool, String) {
    let held = generate_batch(&Template::ALL, 4, SEED + HELD_OUT);
    let untrained = Model::new(ModelConfig::default(), t.bank.clone(), SEED + 1).expect("model");
    let vocab = Vocabulary::default();
    let iou = |m: &Model| -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for s in &held {
            let enc = encode_scene(m, &s.initial_grid).expect("encode");
            let c = vocab.embedding(s.intent_command());
            let r = learned_rollouts(m, &enc.b0, std::slice::from_ref(&s.expert), c, s.grid_spec()).expect("rollout");
            let truth = oracle_rollout(s, m.config.wm_steps).expect("oracle");
            for (p, q) in r[0].maps.iter().zip(&truth.maps) {
                total += mean_iou(p, q);
                n += 1;
            }
        }
        total / n as f64
    };
    let (trained, base) = (iou(&t.model), iou(&untrained));

    let s = &held[0];
    let m = &t.model;
    let enc = encode_scene(m, &s.initial_grid).expect("encode");
    let c = vocab.embedding(s.intent_command()).to_vec();
    let trajs: Vec<Trajectory> = m.bank.prototypes.iter().take(5).cloned().collect();
    let setup = |g: &mut Graph| {
        let b = g.input(enc.b0.clone());
        let f = g.input(trajectory_features(&trajs));
        let e0 = trajectory_encoder(g, &m.store, f).expect("encoder");
        let cv = g.input(Tensor::row(c.clone()));
        let w = TransitionVars::load(g, &m.store).expect("weights");
        (b, e0, cv, w)
    };
    let mut g2 = Graph::new();
    let (b, e0, cv, w) = setup(&mut g2);
    let two = rollout_graph(&mut g2, &w, &[b], e0, cv, 2).expect("rollout");
    let mut g1 = Graph::new();
    let (b, e0, cv, w) = setup(&mut g1);
    let one = rollout_graph(&mut g1, &w, &[b], e0, cv, 1).expect("rollout");
    let states: Vec<Tensor> = one.states[0].iter().map(|v| g1.value(*v).clone()).collect();
    let ego = g1.value(one.ego[0]).clone();
    let mut g3 = Graph::new();
    let bs: Vec<Var> = states.into_iter().map(|t| g3.input(t)).collect();
    let e1 = g3.input(ego);
    let cv = g3.input(Tensor::row(c.clone()));
    let w = TransitionVars::load(&mut g3, &m.store).expect("weights");
    let again = rollout_graph(&mut g3, &w, &bs, e1, cv, 1).expect("rollout");
    let mut exact = g2.value(two.ego[1]).data() == g3.value(again.ego[0]).data();
    for (a, b) in two.states[1].iter().zip(&again.states[0]) {
        exact &= g2.value(*a).data() == g3.value(*b).data();
    }

    (
        trained - base >= 0.3 && exact,
        format!(
            "mean IoU trained {trained:.3} vs untrained {base:.3} (gain {:.3}) on {} held-out scenarios; 1+1 vs 2 steps bit-exact: {exact}",
            trained - base,
            held.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// RL stage

fn per_template(scenarios: &[Scenario], k: usize) -> Vec<Scenario> {
    let mut seen = BTreeMap::new();
    scenarios
        .iter()
        .filter(|s| {
            let n = seen.entry(s.template).or_insert(0usize);
            *n += 1;
            *n <= k
        })
        .cloned()
        .collect()
}

fn rl_stage(t: &Trained, results: &mut Vec<Outcome>) -> Model {
    let held = generate_batch(&Template::ALL, 10, SEED + HELD_OUT);
    let rl_set = per_template(&t.train, 10);
    let vocab = Vocabulary::default();
    let base = GrpoConfig { seed: SEED, ..GrpoConfig::default() };
    let started = Instant::now();
    let mut arms = Vec::new();
    for (arm, reward) in [
        ("B1", base.reward.cognitive_only()),
        ("B2", base.reward.physical_only()),
        ("B3", base.reward),
    ] {
        let mut m = t.model.clone();
        let cfg = GrpoConfig { reward, ..base.clone() };
        train_rl(&mut m, &rl_set, &cfg, &vocab, &mut MetricsLog::discard(), 0, &mut |_, _| Ok(())).expect("RL");
        arms.push((arm, m));
    }
    let secs = started.elapsed().as_secs_f64();
    let score = |m: &Model| {
        evaluate_policy(m, &held, &vocab, &EvalOptions::default(), serde_json::Value::Null).expect("eval").summary.pdms
    };
    let pre = score(&t.model);
    let post: Vec<f64> = arms.iter().map(|(_, m)| score(m)).collect();
    let (b1, b2, b3) = (post[0], post[1], post[2]);
    report(
        results,
        "rl_stage",
        b3 >= pre && b3 >= b1 && b3 >= b2 && secs <= 45.0 * 60.0,
        format!(
            "mean PDMS on {} held-out: A2 {pre:.4}, B1 {b1:.4}, B2 {b2:.4}, B3 {b3:.4}; three arms trained in {secs:.0} s",
            held.len()
        ),
    );
    arms.pop().expect("B3").1
}

// ---------------------------------------------------------------------------
// intent control

fn intent_control(model: &Model) -> (bool, String) {
    let vocab = Vocabulary::default();
    let lanes = generate_batch(&[Template::LaneChange], 25, INTENT_SEEDS);
    let mut opposite = 0;
    for s in &lanes {
        let enc = encode_scene(model, &s.initial_grid).expect("encode");
        let lateral = |cmd: Command| {
            let p = plan_encoded(model, &enc, vocab.embedding(cmd), s.ego.speed, model.config.psi).expect("plan");
            p.selected_trajectory().mean_lateral()
        };
        let (l, r) = (lateral(Command::ChangeLaneLeft), lateral(Command::ChangeLaneRight));
        opposite += (l > 0.0 && r < 0.0) as usize;
    }
    let lane_ok = opposite * 100 >= 80 * lanes.len();

    let planner = Planner { model: Arc::new(model.clone()), vocab: Arc::new(vocab.clone()), config: SessionConfig::default() };
    let lights = generate_batch(&[Template::RedLight], 25, INTENT_SEEDS);
    let (mut all_unsafe, mut required, mut fired) = (0, 0, 0);
    for (i, s) in lights.iter().enumerate() {
        let (mut session, _) = Session::start(&planner, format!("a{i}"), s.clone()).expect("session");
        let f = session.command(&planner, Command::Accelerate.text()).expect("command");
        let v0 = s.ego.speed;
        let accelerating: Vec<bool> = f
            .candidates
            .iter()
            .map(|c| {
                let t = Trajectory::from_xy(&c.polyline.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>());
                kinematics(&t, v0).final_speed() > v0
            })
            .collect();
        let violates = |i: usize| f.candidates[i].reward.nc < 1.0 || f.candidates[i].reward.dac < 1.0;
        let acc: Vec<usize> = (0..accelerating.len()).filter(|i| accelerating[*i]).collect();
        if acc.is_empty() || !acc.iter().all(|i| violates(*i)) {
            continue;
        }
        all_unsafe += 1;
        let planned = f.planned.expect("planned index");
        if accelerating[planned] {
            required += 1;
            let any_safe = (0..f.candidates.len()).any(|i| !violates(i));
            let chosen = f.selected.expect("selected index");
            if f.veto && (!any_safe || !violates(chosen)) {
                fired += 1;
            }
        }
    }
    let veto_ok = fired == required;
    (
        lane_ok && veto_ok,
        format!(
            "lane_change left/right opposite-signed on {opposite}/{}; red_light accelerate: {all_unsafe}/{} scenes with every accelerating candidate unsafe, veto fired {fired}/{required} where the preferred candidate accelerated",
            lanes.len(),
            lights.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// determinism

fn run_cli(dir: &Path, threads: &str, args: &[&str]) -> Result<(), String> {
    let out = Process::new(env!("CARGO_BIN_EXE_cophy"))
        .current_dir(dir)
        .env("COPHY_THREADS", threads)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path, threads: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let common = ["--seed", "5", "--templates", "straight,lane_change,red_light", "--count", "3"];
    let steps: Vec<Vec<&str>> = vec![
        vec!["gen", "--out", "data.ndjson"],
        vec!["protos", "--data", "data.ndjson", "--n", "6", "--out", "protos.json"],
        vec!["--epochs", "2", "train-il", "--data", "data.ndjson", "--protos", "protos.json", "--out", "il.ckpt"],
        vec!["--epochs", "2", "train-rl", "--data", "data.ndjson", "--ckpt", "il.ckpt", "--out", "rl.ckpt"],
        vec!["eval", "--data", "data.ndjson", "--ckpt", "rl.ckpt", "--veto", "--csv", "eval.csv", "--out", "eval.json"],
    ];
    for step in &steps {
        let mut args: Vec<&str> = common.to_vec();
        args.extend(step);
        run_cli(dir, threads, &args)?;
    }
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        files.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).map_err(|e| e.to_string())?);
    }
    Ok(files)
}

fn determinism() -> (bool, String) {
    let runs: Result<Vec<_>, String> = ["1", "1", "2"]
        .iter()
        .map(|threads| {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            pipeline(dir.path(), threads)
        })
        .collect();
    match runs {
        Err(e) => (false, format!("pipeline failed: {e}")),
        Ok(runs) => {
            let differing: Vec<&String> = runs[0]
                .iter()
                .filter(|(k, v)| runs[1..].iter().any(|r| r.get(*k) != Some(*v)))
                .map(|(k, _)| k)
                .collect();
            let same_names = runs.iter().all(|r| r.keys().eq(runs[0].keys()));
            (
                differing.is_empty() && same_names,
                format!(
                    "gen/protos/train-il/train-rl/eval run 3 times (1, 1 and 2 threads): {} files compared, differing: {:?}",
                    runs[0].len(),
                    differing
                ),
            )
        }
    }
}

fn main() {
    let mut results = Vec::new();
    let (p, d) = formula_exactness();
    report(&mut results, "formula_exactness", p, d);
    let (p, d) = reward_points();
    report(&mut results, "reward_analytic_points", p, d);
    let (p, d) = grpo_invariants();
    report(&mut results, "grpo_invariants", p, d);
    let (p, d) = gradient_integrity();
    report(&mut results, "gradient_integrity", p, d);
    let (p, d) = hierarchical_selection();
    report(&mut results, "hierarchical_selection", p, d);
    let (p, d) = determinism();
    report(&mut results, "determinism", p, d);

    let trained = il_stage(&mut results);
    let (p, d) = world_model(&trained);
    report(&mut results, "world_model", p, d);
    let post = rl_stage(&trained, &mut results);
    let (p, d) = intent_control(&post);
    report(&mut results, "intent_control", p, d);

    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    println!("\n{} of {} criteria passed", results.len() - failed.len(), results.len());
    for r in results.iter().filter(|r| !r.pass) {
        eprintln!("failed: {} ({})", r.name, r.detail);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
