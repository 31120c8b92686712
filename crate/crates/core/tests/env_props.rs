use std::f64::consts::PI;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtao_core::env::{
    detect_success, make_bottle_sets, stage1_reward, BottleSpec, EnvConfig, Environment, RewardBreakdown,
    RewardTerms, ACTION_DIM,
};

#[path = "support/reward_oracle.rs"]
mod reward_oracle;
use reward_oracle::oracle_reward;

fn env(bottle: BottleSpec) -> Environment {
    Environment::new(bottle, EnvConfig::default()).unwrap()
}

#[test]
fn rewards_match_an_independent_transcription() {
    let (seen, _) = make_bottle_sets(0);
    let envs: Vec<Environment> = std::iter::once(BottleSpec::easy()).chain(seen).map(env).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for stage in [1u8, 2] {
        let mut worst = 0.0f64;
        let mut touched = 0;
        for i in 0..1000 {
            let e = &envs[i % envs.len()];
            let s = e.sample_state(stage, &mut rng);
            touched += usize::from(!s.contacts.is_empty());
            let got = if stage == 1 { e.reward_stage1(&s) } else { e.reward_stage2(&s) }.unwrap();
            let want = oracle_reward(e, &s);
            for (k, (g, w)) in got.to_array().iter().zip(want).enumerate() {
                let err = (g - w).abs();
                worst = worst.max(err);
                assert!(err < 1e-9, "stage {stage} state {i} {}: {g} vs {w}", RewardBreakdown::NAMES[k]);
            }
        }
        // The sample must exercise the contact terms, not only the far field.
        assert!(touched > 50, "stage {stage}: only {touched} states had contacts");
        assert!(worst < 1e-9);
    }
}

#[test]
fn cap_angle_reward_saturates() {
    let base = RewardTerms { d_fz: 1.0, ..Default::default() };
    let at = |a_c: f64| stage1_reward(&RewardTerms { a_c, ..base }).r_cang;
    for a_c in [7.0, 7.5, 20.0, 1e6] {
        assert_eq!(at(a_c), at(7.0));
    }
    assert!(at(6.9) < at(7.0));
}

#[test]
fn success_is_strictly_above_half_a_turn() {
    let e = env(BottleSpec::easy());
    let mut s = e.reset(1, 0);
    for (a_c, want) in [(0.0, false), (PI, false), (3.15, true), (-4.0, false), (10.0, true)] {
        s.cap_angle = a_c;
        assert_eq!(detect_success(&s), want, "a_c = {a_c}");
    }
}

#[test]
fn bottle_sets_have_the_documented_shape() {
    let (seen, unseen) = make_bottle_sets(42);
    assert_eq!((seen.len(), unseen.len()), (10, 5));
    assert_eq!(make_bottle_sets(42), (seen.clone(), unseen.clone()));
    for b in seen.iter().chain(&unseen) {
        assert!(b.cap_radius < b.body_radius);
        assert!(b.validate().is_ok());
    }
}

#[test]
fn free_fall_follows_the_closed_form() {
    let config = EnvConfig { terminate_on_drop: false, ..EnvConfig::default() };
    let e = Environment::new(BottleSpec::easy(), config).unwrap();
    let mut s = e.reset(2, 0);
    // Keep the left hand away so nothing catches the bottle.
    s.left_wrist.translation.vector.x -= 0.2;
    s.contacts = e.contacts(&s);
    let z0 = s.bottle.translation.vector.z;
    for _ in 0..10 {
        s = e.step(&s, &[0.0; ACTION_DIM]).unwrap().state;
    }
    let drop = z0 - s.bottle.translation.vector.z;
    let dt = e.config.dt;
    let closed = 0.5 * 9.81 * (10.0 * dt).powi(2);
    // Semi-implicit Euler overshoots the closed form by g*dt*T/2.
    let euler = 9.81 * dt * dt * 55.0;
    assert!((drop - euler).abs() < 1e-12);
    assert!((drop - closed).abs() <= 0.5 * 9.81 * dt * 10.0 * dt + 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stage_one_bottle_never_moves(
        actions in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, ACTION_DIM), 1..25),
        seed in 0u64..1000,
    ) {
        let e = env(BottleSpec::easy());
        let mut s = e.reset(1, seed);
        let pose = s.bottle;
        for a in &actions {
            if s.done { break; }
            let r = e.step(&s, a).unwrap();
            prop_assert_eq!(r.state.bottle, pose);
            prop_assert_eq!(r.reward.total, r.reward.r_left + r.reward.r_right);
            s = r.state;
        }
    }

    #[test]
    fn stepping_is_deterministic(
        a in prop::collection::vec(-1.0f64..1.0, ACTION_DIM),
        stage in 1u8..=2,
        seed in 0u64..1000,
    ) {
        let e1 = env(BottleSpec::easy());
        let e2 = env(BottleSpec::easy());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = e1.sample_state(stage, &mut rng);
        let r1 = e1.step(&s, &a).unwrap();
        let r2 = e2.step(&s, &a).unwrap();
        prop_assert_eq!(r1.state, r2.state);
        prop_assert_eq!(r1.reward, r2.reward);
    }

    #[test]
    fn total_is_left_plus_right(stage in 1u8..=2, seed in 0u64..10_000) {
        let e = env(BottleSpec::easy());
        let s = e.sample_state(stage, &mut ChaCha8Rng::seed_from_u64(seed));
        let r = e.reward(&s);
        prop_assert_eq!(r.total, r.r_left + r.r_right);
        if stage == 1 {
            prop_assert_eq!((r.r_htdis, r.r_bdis, r.r_brot), (0.0, 0.0, 0.0));
        } else {
            prop_assert_eq!((r.r_hdis, r.r_fcon), (0.0, 0.0));
        }
    }

    #[test]
    fn success_is_monotone_in_cap_angle(a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let e = env(BottleSpec::easy());
        let mut s = e.reset(1, 0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        s.cap_angle = lo;
        let at_lo = detect_success(&s);
        s.cap_angle = hi;
        prop_assert!(!at_lo || detect_success(&s));
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let e = env(BottleSpec::easy());
    let a = e.sample_state(2, &mut ChaCha8Rng::seed_from_u64(5));
    let b = e.sample_state(2, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
    assert!((a.bottle.rotation.quaternion().norm() - 1.0).abs() < 1e-12);
}
