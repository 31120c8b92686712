use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vtao_core::env::{make_bottle_sets, BottleSpec, EnvConfig, ACTION_DIM, PROPRIO_DIM};
use vtao_core::model::{ModelConfig, VtaoModel};
use vtao_core::rl::*;

/// Advantages written as explicit truncated sums over future TD errors.
fn gae_brute(r: &Array2<f64>, v: &Array2<f64>, d: &Array2<bool>, last: &[f64], gamma: f64, lambda: f64) -> Array2<f64> {
    let (t_len, n) = r.dim();
    let value_after = |t: usize, i: usize| if t + 1 < t_len { v[[t + 1, i]] } else { last[i] };
    Array2::from_shape_fn((t_len, n), |(t, i)| {
        let mut total = 0.0;
        for k in t..t_len {
            let alive = if d[[k, i]] { 0.0 } else { 1.0 };
            let delta = r[[k, i]] + gamma * alive * value_after(k, i) - v[[k, i]];
            total += (gamma * lambda).powi((k - t) as i32) * delta;
            if d[[k, i]] {
                break;
            }
        }
        total
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn gae_matches_the_explicit_sum(
        t_len in 1usize..=20, n in 1usize..5, seed in any::<u64>(),
        gamma in 0.5f64..1.0, lambda in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Array2::from_shape_fn((t_len, n), |_| rng.random_range(-2.0..2.0));
        let v = Array2::from_shape_fn((t_len, n), |_| rng.random_range(-2.0..2.0));
        let d = Array2::from_shape_fn((t_len, n), |_| rng.random_bool(0.2));
        let last: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (adv, ret) = gae(&r, &v, &d, &last, gamma, lambda);
        let want = gae_brute(&r, &v, &d, &last, gamma, lambda);
        for ((a, w), (rt, vv)) in adv.iter().zip(&want).zip(ret.iter().zip(&v)) {
            prop_assert!((a - w).abs() < 1e-9);
            prop_assert!((rt - (w + vv)).abs() < 1e-9);
        }
    }
}

#[test]
fn gae_with_unit_lambda_gives_monte_carlo_returns() {
    let r = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
    let v = Array2::from_shape_vec((3, 1), vec![0.3, -0.2, 0.7]).unwrap();
    let d = Array2::from_elem((3, 1), false);
    let (_, ret) = gae(&r, &v, &d, &[10.0], 0.9, 1.0);
    assert!((ret[[0, 0]] - (1.0 + 0.9 * 2.0 + 0.81 * 3.0 + 0.729 * 10.0)).abs() < 1e-12);
    assert!((ret[[2, 0]] - (3.0 + 9.0)).abs() < 1e-12);
    // A terminal transition ignores the bootstrap value.
    let d = Array2::from_shape_vec((3, 1), vec![false, false, true]).unwrap();
    let (_, ret) = gae(&r, &v, &d, &[10.0], 0.9, 1.0);
    assert!((ret[[2, 0]] - 3.0).abs() < 1e-12);
}

fn rollout(net: &ActorCritic, n: usize, seed: u64, advantage: impl Fn(usize) -> f64) -> Rollout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Array2::from_shape_fn((n, net.feat_dim), |_| rng.random_range(-1.0..1.0));
    let proprio = Array2::from_shape_fn((n, PROPRIO_DIM), |_| rng.random_range(-1.0..1.0));
    let (actions, logp, values) = net.act(&features, &proprio, &mut rng);
    let advantages = Array1::from_iter((0..n).map(&advantage));
    let returns = &values + &Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0)));
    Rollout { features, proprio, actions, logp, values, advantages, returns }
}

#[test]
fn zero_advantages_leave_the_policy_unchanged() {
    let mut net = ActorCritic::new(8, 16, -0.5, 1);
    let before = net.clone();
    let r = rollout(&net, 32, 2, |_| 0.0);
    let mut opt = net.optimizer(1e-2);
    net.ppo_update(&mut opt, &r, &PPOConfig { minibatches: 2, epochs: 3, ..PPOConfig::default() }, 3).unwrap();
    for ((name, a), b) in net.names().iter().zip(net.values()).zip(before.values()) {
        if name.starts_with("pi.") || name == "log_std" {
            assert_eq!(a, b, "{name} moved without any advantage");
        }
    }
    // The critic still fits the returns.
    let moved = net.names().iter().zip(net.values()).zip(before.values()).any(|((n, a), b)| n.starts_with("v.") && a != b);
    assert!(moved);
}

#[test]
fn positive_advantages_raise_the_likelihood_of_their_actions() {
    let mut net = ActorCritic::new(8, 16, -0.5, 4);
    // Advantage only on the first half; normalization makes the rest negative.
    let r = rollout(&net, 64, 5, |i| if i < 32 { 1.0 } else { 0.0 });
    let logp = |net: &ActorCritic| -> Vec<f64> {
        let (mu, _) = net.forward(&r.features, &r.proprio);
        let ls = net.log_std();
        (0..64)
            .map(|i| {
                (0..ACTION_DIM)
                    .map(|j| {
                        let z = (r.actions[[i, j]] - mu[[i, j]]) / ls[j].exp();
                        -0.5 * z * z - ls[j]
                    })
                    .sum()
            })
            .collect()
    };
    let before = logp(&net);
    let mut opt = net.optimizer(1e-3);
    let stats = net
        .ppo_update(&mut opt, &r, &PPOConfig { epochs: 1, minibatches: 1, max_grad_norm: None, ..PPOConfig::default() }, 6)
        .unwrap();
    let after = logp(&net);
    let gain = |range: std::ops::Range<usize>| range.map(|i| after[i] - before[i]).sum::<f64>();
    assert!(gain(0..32) > gain(32..64), "{} vs {}", gain(0..32), gain(32..64));
    assert!(stats.approx_kl.abs() < 1e-12, "first minibatch is on-policy");
}

#[test]
fn updates_are_deterministic() {
    let base = ActorCritic::new(8, 16, 0.0, 7);
    let r = rollout(&base, 40, 8, |i| (i as f64).sin());
    let run = || {
        let mut net = base.clone();
        let mut opt = net.optimizer(3e-4);
        let s = net.ppo_update(&mut opt, &r, &PPOConfig::default(), 9).unwrap();
        (net, s)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn non_finite_rollouts_are_rejected() {
    let mut net = ActorCritic::new(8, 16, 0.0, 7);
    let mut r = rollout(&net, 16, 8, |_| 1.0);
    r.returns[3] = f64::NAN;
    let mut opt = net.optimizer(3e-4);
    let err = net.ppo_update(&mut opt, &r, &PPOConfig::default(), 1).unwrap_err();
    assert!(matches!(err, RlError::NonFinite(_)), "{err}");
}

fn tiny_encoder(seed: u64) -> FrozenEncoder {
    let cfg = ModelConfig {
        embed_dim: 16,
        enc_depth: 1,
        enc_heads: 2,
        dec_depth: 1,
        dec_heads: 2,
        mlp_ratio: 2,
        patch_size: 8,
        image_size: 16,
        ..ModelConfig::default()
    };
    FrozenEncoder::new(VtaoModel::new(cfg, seed).unwrap())
}

fn tiny_env() -> EnvConfig {
    EnvConfig { image_size: 16, horizon: 12, ..EnvConfig::default() }
}

fn smoke_ppo() -> PPOConfig {
    PPOConfig {
        n_envs: 4,
        rollout: 8,
        stage1_iters: 3,
        stage2_iters: 2,
        epochs: 2,
        minibatches: 2,
        hidden: 16,
        checkpoint_every: 2,
        seed: 11,
        ..PPOConfig::default()
    }
}

#[test]
fn smoke_curriculum_switches_stage_and_keeps_the_encoder() {
    let enc = tiny_encoder(0);
    let digest = enc.digest();
    let dir = tempfile::tempdir().unwrap();
    let bottles = [BottleSpec::easy(), make_bottle_sets(0).0[3]];
    let out = train_curriculum(&enc, &bottles, &tiny_env(), &smoke_ppo(), Some(dir.path()), |_| {}).unwrap();
    assert_eq!(enc.digest(), digest);
    assert_eq!(out.policy.encoder.digest(), digest);

    let stages: Vec<u8> = out.log.iter().map(|r| r.stage).collect();
    assert_eq!(stages, [1, 1, 1, 2, 2]);
    for row in &out.log {
        assert!(row.reward.total.is_finite() && row.update.grad_norm.is_finite());
        if row.stage == 1 {
            assert_eq!(row.reward.r_htdis, 0.0);
            assert_eq!(row.reward.r_bdis, 0.0);
            assert_eq!(row.reward.r_brot, 0.0);
        }
    }
    assert_eq!(out.log.last().unwrap().env_steps, 5 * 4 * 8);
    // Horizon 12 with rollouts of 8 steps ends episodes every other iteration.
    assert!(out.log.iter().map(|r| r.episodes).sum::<usize>() >= 8);

    let lines = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let parsed: Vec<LogRow> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, out.log);
    for name in ["iter_00002.ckpt", "iter_00004.ckpt", "final.ckpt"] {
        assert!(dir.path().join("checkpoints").join(name).exists(), "{name}");
    }
    let loaded = PolicyCheckpoint::load(&dir.path().join("checkpoints/final.ckpt")).unwrap();
    assert_eq!(loaded.net, out.policy.net);
    assert_eq!(loaded.norm, out.policy.norm);
    assert_eq!(loaded.encoder.digest(), digest);
    assert_eq!((loaded.iteration, loaded.stage), (5, 2));
}

#[test]
fn training_is_reproducible() {
    let enc = tiny_encoder(1);
    let cfg = PPOConfig { stage1_iters: 2, stage2_iters: 1, ..smoke_ppo() };
    let a = train_curriculum(&enc, &[BottleSpec::easy()], &tiny_env(), &cfg, None, |_| {}).unwrap();
    let b = train_curriculum(&enc, &[BottleSpec::easy()], &tiny_env(), &cfg, None, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.policy.net, b.policy.net);
}

#[test]
fn success_trigger_switches_early() {
    let enc = tiny_encoder(2);
    // Any finished episode yields a rate of at least zero.
    let cfg = PPOConfig { stage1_iters: 10, stage2_iters: 1, switch_on_success: Some(0.0), ..smoke_ppo() };
    let out = train_curriculum(&enc, &[BottleSpec::easy()], &tiny_env(), &cfg, None, |_| {}).unwrap();
    let stages: Vec<u8> = out.log.iter().map(|r| r.stage).collect();
    assert_eq!(stages.len(), 11);
    assert_eq!(&stages[..3], [1, 1, 2]);
}

#[test]
fn mismatched_image_size_is_refused() {
    let enc = tiny_encoder(0);
    let env = EnvConfig { image_size: 32, ..tiny_env() };
    let err = train_curriculum(&enc, &[BottleSpec::easy()], &env, &smoke_ppo(), None, |_| {}).unwrap_err();
    assert!(matches!(err, RlError::Encoder(_)), "{err}");
}

#[test]
fn tampered_checkpoints_fail_to_load() {
    let enc = tiny_encoder(0);
    let cfg = PPOConfig { stage1_iters: 1, stage2_iters: 0, ..smoke_ppo() };
    let out = train_curriculum(&enc, &[BottleSpec::easy()], &tiny_env(), &cfg, None, |_| {}).unwrap();
    let bytes = out.policy.to_bytes();
    let back = PolicyCheckpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert!(PolicyCheckpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    // Swap in an encoder with different weights but keep the recorded digest.
    let other = PolicyCheckpoint { encoder: tiny_encoder(5), ..out.policy.clone() }.to_bytes();
    let header_len = 20 + u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let mut forged = bytes[..header_len].to_vec();
    forged.extend_from_slice(&other[header_len..]);
    let err = PolicyCheckpoint::from_bytes(&forged).unwrap_err();
    assert!(err.to_string().contains("digest"), "{err}");
}

#[test]
fn policy_inputs_concatenate_cls_and_proprio_embedding() {
    let enc = tiny_encoder(0);
    let net = ActorCritic::new(enc.dim(), 16, 0.0, 0);
    let env = vtao_core::env::Environment::new(BottleSpec::easy(), tiny_env()).unwrap();
    let obs = [env.observe(&env.reset(1, 0)), env.observe(&env.reset(1, 1))];
    let refs: Vec<_> = obs.iter().collect();
    let inputs = featurize(&enc, &net, &RunningNorm::new(PROPRIO_DIM), &refs).unwrap();
    assert_eq!(inputs.len(), 2);
    assert_eq!(inputs[0].h_cls.len(), 16);
    assert_eq!(inputs[0].phi_p.len(), PHI_DIM);
    assert_eq!(inputs[0].concat().len(), 16 + PHI_DIM);
    assert_eq!(inputs[0].h_cls, enc.features(&refs).unwrap().row(0));
}

fn eval_env() -> EnvConfig {
    EnvConfig { image_size: 16, horizon: 20, ..EnvConfig::default() }
}

#[test]
fn evaluation_emits_ten_seen_and_five_unseen_rows() {
    let (seen, unseen) = make_bottle_sets(0);
    let run = || evaluate_split(&mut RandomController::new(4), &seen, &unseen, &eval_env(), 2, 2, 8).unwrap();
    let report = run();
    assert_eq!(report.rows.len(), 15);
    assert_eq!(report.rows.iter().filter(|r| r.set == "train").count(), 10);
    assert_eq!(report.rows.iter().filter(|r| r.set == "test").count(), 5);
    for (r, b) in report.rows.iter().zip(seen.iter().chain(&unseen)) {
        assert_eq!(&r.spec, b);
        assert_eq!(r.episodes, 2);
    }
    let rates: Vec<f64> = report.rows[..10].iter().map(|r| r.mean_cap_angle).collect();
    let mean = rates.iter().sum::<f64>() / 10.0;
    let std = (rates.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 10.0).sqrt();
    assert!((report.train_cap_angle.mean - mean).abs() < 1e-12);
    assert!((report.train_cap_angle.std - std).abs() < 1e-12);
    assert_eq!(run(), report);
}

#[test]
fn zero_policy_never_succeeds() {
    let (seen, unseen) = make_bottle_sets(0);
    let report = evaluate_split(&mut ZeroController, &seen, &unseen, &eval_env(), 2, 1, 0).unwrap();
    assert!(report.rows.iter().all(|r| r.successes == 0));
    assert_eq!(report.train, Aggregate { mean: 0.0, std: 0.0 });
}

#[test]
fn oracle_always_unscrews_the_easy_bottle() {
    let cfg = EnvConfig { image_size: 16, ..EnvConfig::default() };
    for stage in [1, 2] {
        let rows = evaluate(&mut OracleController::new(), &[BottleSpec::easy()], "easy", &cfg, stage, 4, 17).unwrap();
        assert_eq!(rows[0].success_rate, 1.0, "stage {stage}: {:?}", rows[0]);
    }
}

#[test]
fn trained_policies_evaluate_deterministically() {
    let enc = tiny_encoder(0);
    let cfg = PPOConfig { stage1_iters: 1, stage2_iters: 0, ..smoke_ppo() };
    let out = train_curriculum(&enc, &[BottleSpec::easy()], &tiny_env(), &cfg, None, |_| {}).unwrap();
    let mut c = PolicyController::new(out.policy);
    let a = evaluate(&mut c, &[BottleSpec::easy()], "x", &tiny_env(), 1, 2, 3).unwrap();
    let b = evaluate(&mut c, &[BottleSpec::easy()], "x", &tiny_env(), 1, 2, 3).unwrap();
    assert_eq!(a, b);
}
