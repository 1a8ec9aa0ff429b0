//! Template sampling and the rule-based expert.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    AgentTrack, Centerline, Divider, EgoState, Footprint, Lane, LightEntry, LightState, Rect, RoadLayout, Scenario,
    Template, SCN_SCHEMA,
};
use crate::command::Command;
use crate::trajectory::{wrap_angle, Pose, Trajectory, TICK_S, WAYPOINTS};

const LANE_WIDTH: f64 = 3.5;
const FAR: f64 = 200.0;
const MAX_ATTEMPTS: usize = 64;

fn lane(y: f64, direction: f64, drivable: bool) -> Lane {
    Lane {
        center: Centerline::straight(y),
        half_width: 0.5 * LANE_WIDTH,
        direction,
        drivable,
        extent: (-FAR, FAR),
    }
}

fn divider(y: f64) -> Divider {
    Divider { y, half_width: 0.25, x_min: -FAR, x_max: FAR }
}

/// Longitudinal targets for the expert's speed controller.
struct ExpertSpec {
    path: Centerline,
    v0: f64,
    cruise: f64,
    /// Front-bumper position to stop at, and when the hold is released.
    stop: Option<(f64, f64)>,
    lead: Option<usize>,
}

struct Draft {
    layout: RoadLayout,
    agents: Vec<AgentTrack>,
    light_schedule: Vec<LightEntry>,
    intent: Command,
    expert: ExpertSpec,
}

fn simulate_expert(spec: &ExpertSpec, agents: &[AgentTrack], fp: Footprint) -> Trajectory {
    const DT: f64 = 0.05;
    const JERK_LIMIT: f64 = 10.0;
    let substeps = (TICK_S / DT).round() as usize;
    let half = 0.5 * fp.length;
    let (mut x, mut y, mut yaw, mut v, mut a) = (0.0f64, 0.0f64, 0.0f64, spec.v0, 0.0f64);
    let mut held = false;
    let mut waypoints = Vec::with_capacity(WAYPOINTS);
    for step in 0..WAYPOINTS * substeps {
        let t = step as f64 * DT;

        let lookahead = (2.0 + v).max(3.0);
        let (ty, _) = spec.path.y_at(x + lookahead);
        let alpha = wrap_angle((ty - y).atan2(lookahead) - yaw);
        let curvature = (2.0 * alpha.sin() / lookahead).clamp(-0.3, 0.3);

        let mut a_des = (spec.cruise - v).clamp(-2.0, 1.5);
        if let Some((stop_x, release)) = spec.stop {
            if t < release {
                let gap = stop_x - (x + half);
                if held || gap <= 0.05 {
                    held = true;
                } else {
                    a_des = a_des.min(-(v * v) / (2.0 * gap));
                }
            } else {
                held = false;
            }
        }
        if let Some(i) = spec.lead {
            let lead = &agents[i];
            let lp = lead.pose_at(t);
            let gap = lp.x - 0.5 * lead.footprint.length - (x + half);
            let a_follow = (0.5 * (gap - (3.0 + v)) + (lead.velocity - v)).clamp(-3.0, 1.5);
            a_des = a_des.min(a_follow);
        }
        let max_da = JERK_LIMIT * DT;
        a += (a_des - a).clamp(-max_da, max_da);
        if held {
            v = 0.0;
            a = 0.0;
        }

        x += v * yaw.cos() * DT;
        y += v * yaw.sin() * DT;
        yaw = wrap_angle(yaw + v * curvature * DT);
        v = (v + a * DT).max(0.0);
        if v == 0.0 && a < 0.0 {
            a = 0.0;
        }
        if (step + 1) % substeps == 0 {
            waypoints.push(Pose { x, y, heading: yaw });
        }
    }
    Trajectory { waypoints }
}

fn draft_straight(rng: &mut ChaCha8Rng) -> Draft {
    let v0 = rng.gen_range(3.0..5.5);
    let accelerate = rng.gen_bool(0.5);
    let cruise = if accelerate {
        (v0 + rng.gen_range(1.2..2.2f64)).min(6.0)
    } else {
        v0 + rng.gen_range(-0.4..0.4)
    };
    let mut layout = RoadLayout {
        lanes: vec![lane(-LANE_WIDTH, 0.0, true), lane(0.0, 0.0, true), lane(LANE_WIDTH, 0.0, true)],
        dividers: vec![divider(-0.5 * LANE_WIDTH), divider(0.5 * LANE_WIDTH)],
        ..Default::default()
    };
    if rng.gen_bool(0.5) {
        let cx = rng.gen_range(8.0..22.0);
        layout.crosswalks.push(Rect { x_min: cx, x_max: cx + 3.0, y_min: -1.5 * LANE_WIDTH, y_max: 1.5 * LANE_WIDTH });
    }
    let mut agents = Vec::new();
    if rng.gen_bool(0.5) {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let start = Pose::new(rng.gen_range(-4.0..14.0), side * LANE_WIDTH, 0.0);
        agents.push(AgentTrack::constant_velocity(Footprint::PASSENGER_CAR, start, rng.gen_range(2.5..5.5)));
    }
    Draft {
        layout,
        agents,
        light_schedule: Vec::new(),
        intent: if cruise - v0 > 1.0 { Command::Accelerate } else { Command::ProceedStraight },
        expert: ExpertSpec { path: Centerline::straight(0.0), v0, cruise, stop: None, lead: None },
    }
}

fn draft_fork(rng: &mut ChaCha8Rng) -> Draft {
    let v0 = rng.gen_range(3.0..5.5);
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let fork_x = rng.gen_range(4.0..12.0);
    let branch = Lane {
        center: Centerline::Longitudinal {
            from_y: 0.0,
            to_y: side * 5.5,
            blend_start: fork_x,
            blend_end: fork_x + rng.gen_range(12.0..18.0),
        },
        half_width: 0.5 * LANE_WIDTH,
        direction: 0.0,
        drivable: true,
        extent: (fork_x, FAR),
    };
    let layout = RoadLayout { lanes: vec![lane(0.0, 0.0, true), branch], ..Default::default() };
    Draft {
        layout,
        agents: Vec::new(),
        light_schedule: Vec::new(),
        intent: Command::KeepLaneOverFork,
        expert: ExpertSpec {
            path: Centerline::straight(0.0),
            v0,
            cruise: v0 + rng.gen_range(-0.3..0.3),
            stop: None,
            lead: None,
        },
    }
}

fn draft_red_light(rng: &mut ChaCha8Rng) -> Draft {
    let fp = Footprint::PASSENGER_CAR;
    let v0 = rng.gen_range(3.0..5.0);
    let braking = v0 * rng.gen_range(1.0..1.6);
    let margin = 1.0;
    let stop_x = 0.5 * fp.length + margin + braking;
    let box_len = 8.0;
    let green = rng.gen_range(7..=12usize);
    let layout = RoadLayout {
        lanes: vec![
            lane(0.0, 0.0, true),
            Lane {
                center: Centerline::Lateral { x: stop_x + 2.0 },
                half_width: 2.0,
                direction: -FRAC_PI_2,
                drivable: true,
                extent: (-FAR, FAR),
            },
            Lane {
                center: Centerline::Lateral { x: stop_x + 6.0 },
                half_width: 2.0,
                direction: FRAC_PI_2,
                drivable: true,
                extent: (-FAR, FAR),
            },
        ],
        dividers: Vec::new(),
        crosswalks: vec![Rect {
            x_min: stop_x + box_len + 0.5,
            x_max: stop_x + box_len + 3.0,
            y_min: -0.5 * LANE_WIDTH,
            y_max: 0.5 * LANE_WIDTH,
        }],
        stop_zone: Some(Rect {
            x_min: stop_x,
            x_max: stop_x + box_len,
            y_min: -0.5 * LANE_WIDTH,
            y_max: 0.5 * LANE_WIDTH,
        }),
    };
    let crossing = AgentTrack::constant_velocity(
        fp,
        Pose::new(stop_x + 6.0, -rng.gen_range(8.0..16.0), FRAC_PI_2),
        rng.gen_range(3.0..5.0),
    );
    // The expert reacts to green two ticks late.
    let release = (green + 2) as f64 * TICK_S;
    Draft {
        layout,
        agents: vec![crossing],
        light_schedule: vec![
            LightEntry { tick: 0, state: LightState::Red },
            LightEntry { tick: green, state: LightState::Green },
        ],
        intent: Command::StopAtRedLight,
        expert: ExpertSpec {
            path: Centerline::straight(0.0),
            v0,
            cruise: v0,
            stop: Some((stop_x - margin, release)),
            lead: None,
        },
    }
}

fn draft_lead_vehicle(rng: &mut ChaCha8Rng) -> Draft {
    let v0 = rng.gen_range(3.5..5.5);
    let lead = AgentTrack::constant_velocity(
        Footprint::PASSENGER_CAR,
        Pose::new(rng.gen_range(12.0..18.0), 0.0, 0.0),
        rng.gen_range(1.0..3.0),
    );
    let layout = RoadLayout {
        lanes: vec![lane(0.0, 0.0, true), lane(LANE_WIDTH, 0.0, true)],
        dividers: vec![divider(0.5 * LANE_WIDTH)],
        ..Default::default()
    };
    Draft {
        layout,
        agents: vec![lead],
        light_schedule: Vec::new(),
        intent: Command::FollowLeadVehicle,
        expert: ExpertSpec { path: Centerline::straight(0.0), v0, cruise: v0 + 0.5, stop: None, lead: Some(0) },
    }
}

fn draft_double_yellow(rng: &mut ChaCha8Rng) -> Draft {
    let fp = Footprint::PASSENGER_CAR;
    let v0 = rng.gen_range(3.0..5.0);
    let margin = 2.0;
    let braking = v0 * rng.gen_range(1.2..1.8);
    let parked_x = 0.5 * fp.length + braking + margin + 0.5 * fp.length;
    let parked = AgentTrack::constant_velocity(fp, Pose::new(parked_x, 0.0, 0.0), 0.0);
    let oncoming = AgentTrack::constant_velocity(
        fp,
        Pose::new(rng.gen_range(12.0..26.0), LANE_WIDTH, std::f64::consts::PI),
        rng.gen_range(2.0..4.0),
    );
    let layout = RoadLayout {
        lanes: vec![lane(0.0, 0.0, true), lane(LANE_WIDTH, std::f64::consts::PI, false)],
        dividers: vec![divider(0.5 * LANE_WIDTH)],
        ..Default::default()
    };
    Draft {
        layout,
        agents: vec![parked, oncoming],
        light_schedule: Vec::new(),
        intent: Command::Yield,
        expert: ExpertSpec {
            path: Centerline::straight(0.0),
            v0,
            cruise: v0,
            stop: Some((parked_x - 0.5 * fp.length - margin, f64::INFINITY)),
            lead: None,
        },
    }
}

fn draft_lane_change(rng: &mut ChaCha8Rng) -> Draft {
    let v0 = rng.gen_range(3.0..5.0);
    let left = rng.gen_bool(0.5);
    let side = if left { 1.0 } else { -1.0 };
    let start = v0 * rng.gen_range(0.2..0.6);
    let path = Centerline::Longitudinal {
        from_y: 0.0,
        to_y: side * LANE_WIDTH,
        blend_start: start,
        blend_end: start + v0 * rng.gen_range(2.6..3.2),
    };
    let layout = RoadLayout {
        lanes: vec![lane(-LANE_WIDTH, 0.0, true), lane(0.0, 0.0, true), lane(LANE_WIDTH, 0.0, true)],
        dividers: vec![divider(-0.5 * LANE_WIDTH), divider(0.5 * LANE_WIDTH)],
        ..Default::default()
    };
    Draft {
        layout,
        agents: Vec::new(),
        light_schedule: Vec::new(),
        intent: if left { Command::ChangeLaneLeft } else { Command::ChangeLaneRight },
        expert: ExpertSpec { path, v0, cruise: v0, stop: None, lead: None },
    }
}

fn template_salt(t: Template) -> u64 {
    0x5eed_0000 + t as u64
}

/// Deterministic scenario for `(seed, template)`. Draws are rejected until
/// the expert scores a perfect PDMS with all EPDMS gates open.
pub fn generate_scenario(seed: u64, template: Template) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ template_salt(template));
    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        let draft = match template {
            Template::Straight => draft_straight(&mut rng),
            Template::Fork => draft_fork(&mut rng),
            Template::RedLight => draft_red_light(&mut rng),
            Template::LeadVehicle => draft_lead_vehicle(&mut rng),
            Template::DoubleYellow => draft_double_yellow(&mut rng),
            Template::LaneChange => draft_lane_change(&mut rng),
        };
        let scenario = assemble(seed, template, draft);
        let sub = crate::eval::score_trajectory(&scenario, &scenario.expert).expect("expert within horizon");
        if crate::eval::pdms(&sub) == 1.0 && sub.ddc == 1.0 && sub.tl == 1.0 {
            return scenario;
        }
        last = Some(scenario);
    }
    last.expect("at least one attempt")
}

fn assemble(seed: u64, template: Template, draft: Draft) -> Scenario {
    let fp = Footprint::PASSENGER_CAR;
    let expert = simulate_expert(&draft.expert, &draft.agents, fp);
    let mut scenario = Scenario {
        schema: SCN_SCHEMA.into(),
        id: format!("{}-{}", template.name(), seed),
        seed,
        template,
        intent: draft.intent.index(),
        ego: EgoState { pose: Pose::ORIGIN, speed: draft.expert.v0, footprint: fp },
        layout: draft.layout,
        agents: draft.agents,
        light_schedule: draft.light_schedule,
        expert,
        initial_grid: super::SemanticGrid::zeros(super::GridSpec::default()),
    };
    scenario.initial_grid = scenario.oracle_step(&Pose::ORIGIN, 0).expect("tick 0 is in range");
    scenario
}
