use super::*;
use crate::scenario::{generate_scenario, Template};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hand_pdms(s: &SubScores) -> f64 {
    let mut weighted = 0.0;
    for (w, v) in [(5.0, s.ep), (5.0, s.ttc), (2.0, s.c)] {
        weighted += w * v;
    }
    s.nc * s.dac * weighted / 12.0
}

fn hand_epdms(s: &SubScores) -> f64 {
    let mut weighted = 0.0;
    for (w, v) in [(5.0, s.ttc), (2.0, s.c), (5.0, s.ep), (2.0, s.lk), (2.0, s.ec)] {
        weighted += w * v;
    }
    s.nc * s.dac * s.ddc * s.tl * weighted / 16.0
}

fn random_sub(rng: &mut ChaCha8Rng) -> SubScores {
    let bit = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.8) { 1.0 } else { 0.0 };
    SubScores {
        nc: bit(rng),
        dac: bit(rng),
        ddc: bit(rng),
        tl: bit(rng),
        ep: rng.gen(),
        ttc: bit(rng),
        c: bit(rng),
        lk: rng.gen(),
        ec: bit(rng),
    }
}

#[test]
fn formulas_match_hand_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let s = random_sub(&mut rng);
        assert!((pdms(&s) - hand_pdms(&s)).abs() < 1e-12);
        assert!((epdms(&s) - hand_epdms(&s)).abs() < 1e-12);
    }
}

#[test]
fn closed_form_examples() {
    assert_eq!(pdms(&SubScores::PERFECT), 1.0);
    assert_eq!(epdms(&SubScores::PERFECT), 1.0);
    assert_eq!(pdms(&SubScores { nc: 0.0, ..SubScores::PERFECT }), 0.0);
    assert_eq!(epdms(&SubScores { tl: 0.0, ..SubScores::PERFECT }), 0.0);
    assert!((pdms(&SubScores { ep: 0.8, ..SubScores::PERFECT }) - 11.0 / 12.0).abs() < 1e-12);
    assert!((epdms(&SubScores { ep: 0.8, lk: 0.9, ..SubScores::PERFECT }) - 0.925).abs() < 1e-12);
}

#[test]
fn running_the_red_light_fails_tl() {
    let s = generate_scenario(7, Template::RedLight);
    let v = s.ego.speed.max(4.0);
    let run = Trajectory::from_xy(&(1..=8).map(|i| (v * 0.5 * i as f64, 0.0)).collect::<Vec<_>>());
    let sub = score_trajectory(&s, &run).unwrap();
    assert_eq!(sub.tl, 0.0);
    assert_eq!(epdms(&sub), 0.0);
}

#[test]
fn stationary_trajectory_on_empty_road() {
    let s = (0..50)
        .map(|seed| generate_scenario(seed, Template::Straight))
        .find(|s| s.agents.is_empty())
        .unwrap();
    let stay = Trajectory::from_xy(&[(0.0, 0.0); 8]);
    let sub = score_trajectory(&s, &stay).unwrap();
    assert_eq!(sub.ep, 0.0);
    assert_eq!(sub.nc, 1.0);
    let parked = crate::scenario::Scenario { ego: crate::scenario::EgoState { speed: 0.0, ..s.ego }, ..s.clone() };
    assert_eq!(score_trajectory(&parked, &stay).unwrap().c, 1.0);
}

#[test]
fn wrong_length_is_a_horizon_error() {
    let s = generate_scenario(0, Template::Fork);
    let short = Trajectory::from_xy(&[(1.0, 0.0)]);
    assert!(matches!(score_trajectory(&s, &short), Err(EvalError::Horizon { got: 1, expected: 8 })));
}

#[test]
fn wrong_way_driving_fails_ddc() {
    let s = generate_scenario(0, Template::Straight);
    let back = Trajectory::from_xy(&(1..=8).map(|i| (-0.2 * i as f64, 0.0)).collect::<Vec<_>>());
    let sub = score_trajectory(&s, &back).unwrap();
    assert_eq!(sub.ddc, 0.0);
}

fn arb_sub() -> impl Strategy<Value = SubScores> {
    prop::array::uniform9(0.0..=1.0f64).prop_map(|a| SubScores {
        nc: a[0],
        dac: a[1],
        ddc: a[2],
        tl: a[3],
        ep: a[4],
        ttc: a[5],
        c: a[6],
        lk: a[7],
        ec: a[8],
    })
}

proptest! {
    #[test]
    fn aggregates_are_bounded_and_monotone(s in arb_sub(), which in 0usize..9, bump in 0.0..1.0f64) {
        let p = pdms(&s);
        let e = epdms(&s);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((0.0..=1.0).contains(&e));
        let mut t = s;
        let field = match which {
            0 => &mut t.nc, 1 => &mut t.dac, 2 => &mut t.ddc, 3 => &mut t.tl, 4 => &mut t.ep,
            5 => &mut t.ttc, 6 => &mut t.c, 7 => &mut t.lk, _ => &mut t.ec,
        };
        *field = (*field + bump).min(1.0);
        prop_assert!(pdms(&t) >= p - 1e-15);
        prop_assert!(epdms(&t) >= e - 1e-15);
    }

    #[test]
    fn gates_force_zero(s in arb_sub(), gate in 0usize..4) {
        let mut t = s;
        match gate { 0 => t.nc = 0.0, 1 => t.dac = 0.0, 2 => t.ddc = 0.0, _ => t.tl = 0.0 }
        if gate < 2 { prop_assert_eq!(pdms(&t), 0.0); }
        prop_assert_eq!(epdms(&t), 0.0);
    }
}
