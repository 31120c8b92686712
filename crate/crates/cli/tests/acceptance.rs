//! One pass/fail line per acceptance criterion. Set `ACCEPTANCE_ONLY=1,8`
//! to run a subset.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vtao_core::dataset::{align_streams, synthesize, GeneratorConfig, StreamSample};
use vtao_core::env::{make_bottle_sets, BottleSpec, EnvConfig, Environment, RewardBreakdown, ACTION_DIM};
use vtao_core::kinematics::{robot24, HandModel, JointAngles};
use vtao_core::model::{
    masked_count, pretrain, sample_mask, configure_ablation, AdamWConfig, FrameBatch, LossWeights, MaskPlan, MaskRatios,
    ModelConfig, PretrainConfig, VtaoModel, ABLATION_NAMES,
};
use vtao_core::retarget::{objective, retarget_frame, SolverConfig};
use vtao_core::rl::{
    evaluate, evaluate_split, running_success_rate, train_curriculum, FrozenEncoder, OracleController, PPOConfig,
    PolicyController, SuccessTracker, ZeroController,
};

#[path = "../../core/tests/support/reward_oracle.rs"]
mod reward_oracle;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- 1

fn reward_oracle_equivalence() -> Check {
    let (seen, _) = make_bottle_sets(0);
    let envs: Vec<Environment> = std::iter::once(BottleSpec::easy())
        .chain(seen)
        .map(|b| Environment::new(b, EnvConfig::default()).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for stage in [1u8, 2] {
        for i in 0..1000 {
            let e = &envs[i % envs.len()];
            let st = e.sample_state(stage, &mut rng);
            let got = if stage == 1 { e.reward_stage1(&st) } else { e.reward_stage2(&st) }.map_err(|e| e.to_string())?;
            for (k, (g, w)) in got.to_array().iter().zip(reward_oracle::oracle_reward(e, &st)).enumerate() {
                let err = (g - w).abs();
                worst = worst.max(err);
                ensure!(err < 1e-9, "stage {stage} state {i} {}: {g} vs {w}", RewardBreakdown::NAMES[k]);
            }
        }
    }
    Ok(format!("2000 states, max abs error {worst:.1e}"))
}

// ---------------------------------------------------------------- 2-5

fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        enc_depth: 1,
        enc_heads: 2,
        dec_depth: 1,
        dec_heads: 2,
        mlp_ratio: 2,
        patch_size: 4,
        image_size: 8,
        null_tokens: 2,
        p: 2,
        ..ModelConfig::default()
    }
}

fn random_batch(b: usize, size: usize, steps: usize, seed: u64) -> FrameBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Array2::from_shape_fn((b, 11), |_| rng.random_range(0.0..1.0));
    for i in 0..b {
        let mut q = objects.slice_mut(s![i, 3..7]);
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        q /= n;
    }
    FrameBatch {
        images: Array4::from_shape_fn((b, size, size, 3), |_| rng.random_range(0.0..1.0)),
        tactile: Array2::from_shape_fn((b, 40), |_| f64::from(rng.random_bool(0.5) as u8)),
        actions: Array3::from_shape_fn((b, steps, 48), |_| rng.random_range(-0.5..0.5)),
        objects,
    }
}

fn plans(model: &VtaoModel, b: usize) -> Vec<MaskPlan> {
    (0..b as u64).map(|s| sample_mask(model.layout(), &model.config().mask, 100 + s)).collect()
}

fn loss_weight_fidelity() -> Check {
    let unit = LossWeights::default().combine(1.0, 1.0, 1.0, 1.0);
    ensure!(unit == 10.0, "unit losses combine to {unit}");
    let model = VtaoModel::new(tiny_model(), 0).unwrap();
    let fb = random_batch(2, 8, 3, 1);
    let r = model.loss(&fb, &plans(&model, 2)).unwrap();
    let manual = r.img + 2.0 * r.tac + 5.0 * r.bot + 2.0 * r.act;
    ensure!((r.total - manual).abs() < 1e-12, "total {} vs weighted sum {manual}", r.total);
    let heads = [("img", "head.v."), ("tac", "head.c."), ("bot", "head.o."), ("act", "head.a.")];
    for (zeroed, prefix) in heads {
        let mut w = LossWeights::default();
        match zeroed {
            "img" => w.img = 0.0,
            "tac" => w.tac = 0.0,
            "bot" => w.bot = 0.0,
            _ => w.act = 0.0,
        }
        let model = VtaoModel::new(ModelConfig { weights: w, ..tiny_model() }, 0).unwrap();
        let (_, grads) = model.loss_and_grad(&fb, &plans(&model, 2)).unwrap();
        for (name, g) in model.params().names().iter().zip(&grads) {
            let zero = g.iter().all(|&x| x == 0.0);
            if name.starts_with(prefix) {
                ensure!(zero, "W_{zeroed} = 0 but {name} has gradient");
            } else if name.starts_with("head.") {
                ensure!(!zero, "W_{zeroed} = 0 silenced {name}");
            }
        }
    }
    Ok("unit losses total 10; each zeroed weight silences exactly its head".into())
}

fn mask_exactness() -> Check {
    let model = VtaoModel::new(ModelConfig::default(), 0).unwrap();
    let layout = model.layout().clone();
    let ratios = MaskRatios { visual: 0.75, tactile: 0.5, action: 0.5, null: 0.0 };
    let counts = (
        masked_count(layout.visual, ratios.visual),
        masked_count(layout.tactile.len(), ratios.tactile),
        masked_count(layout.action.len(), ratios.action),
        masked_count(layout.null, ratios.null),
    );
    ensure!(counts == (147, 20, 24, 0), "masked counts {counts:?}");
    for seed in 0..100 {
        let p = sample_mask(&layout, &ratios, seed);
        let got = (p.visual.len(), p.tactile.len(), p.action.len(), p.null.len());
        ensure!(got == (147, 20, 24, 0), "seed {seed}: {got:?}");
    }
    // Perturbing masked sources leaves the encoder output unchanged.
    let tiny = VtaoModel::new(tiny_model(), 1).unwrap();
    let fb = random_batch(2, 8, 3, 2);
    let pl = plans(&tiny, 2);
    let base = tiny.encode(&fb, &pl).unwrap().sequence;
    let mut changed = fb.clone();
    let pv = pl[0].visual[0];
    let (py, px) = (pv / 2 * 4, pv % 2 * 4);
    changed.images.slice_mut(s![0, py..py + 4, px..px + 4, ..]).fill(0.5);
    for &t in &pl[1].tactile {
        changed.tactile[[1, t]] = 1.0 - changed.tactile[[1, t]];
    }
    for &a in &pl[0].action {
        changed.actions[[0, 0, a]] += 1.0;
    }
    ensure!(tiny.encode(&changed, &pl).unwrap().sequence == base, "masked perturbation changed the encoding");
    Ok("(147, 20, 24, 0) on 100 seeds; masked perturbation invisible".into())
}

fn gradient_check() -> Check {
    let mut model = VtaoModel::new(tiny_model(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for v in model.params_mut().values_mut() {
        v.mapv_inplace(|x| x + rng.random_range(-0.05..0.05));
    }
    let fb = random_batch(2, 8, 3, 4);
    let pl = plans(&model, 2);
    let (_, grads) = model.loss_and_grad(&fb, &pl).unwrap();
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for t in 0..model.params().len() {
        let n = model.params().values()[t].len();
        let cols = model.params().values()[t].ncols();
        let take: Vec<usize> = if n <= 24 { (0..n).collect() } else { (0..24).map(|_| rng.random_range(0..n)).collect() };
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for k in take {
            let at = [k / cols, k % cols];
            let orig = model.params().values()[t][at];
            model.params_mut().values_mut()[t][at] = orig + h;
            let up = model.loss(&fb, &pl).unwrap().total;
            model.params_mut().values_mut()[t][at] = orig - h;
            let down = model.loss(&fb, &pl).unwrap().total;
            model.params_mut().values_mut()[t][at] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (grads[t][at] - fd).powi(2);
            scale += grads[t][at].powi(2) + fd.powi(2);
        }
        let rel = if scale > 0.0 { diff.sqrt() / scale.sqrt().max(1e-10) } else { 0.0 };
        if rel > worst.0 {
            worst = (rel, model.params().names()[t].clone());
        }
    }
    ensure!(worst.0 < 1e-4, "relative error {:.2e} at {}", worst.0, worst.1);
    Ok(format!("{} tensors, max relative error {:.2e} ({})", model.params().len(), worst.0, worst.1))
}

fn pretraining_overfit() -> Check {
    let g = GeneratorConfig { trajectories: 1, frames_per_trajectory: 13, p: 5, image_size: 16, ..GeneratorConfig::default() };
    let ds = synthesize(&g, 21).map_err(|e| e.to_string())?;
    ensure!(ds.len() == 8, "dataset has {} frames", ds.len());
    let cfg = ModelConfig {
        embed_dim: 32,
        enc_depth: 2,
        enc_heads: 4,
        dec_depth: 1,
        dec_heads: 4,
        mlp_ratio: 2,
        patch_size: 4,
        image_size: 16,
        ..ModelConfig::default()
    };
    let train = PretrainConfig {
        optim: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        batch_size: 8,
        epochs: 2000,
        max_steps: Some(2000),
        seed: 5,
    };
    let ck = pretrain(&ds, &cfg, &train, |_| {}).map_err(|e| e.to_string())?;
    ensure!(ck.step == 2000, "stopped after {} steps", ck.step);
    let first = ck.history.first().unwrap().loss.total;
    let last = ck.history.last().unwrap().loss.total;
    ensure!(last < 0.05 * first, "loss {first:.4} -> {last:.4}");
    Ok(format!("loss {first:.4} -> {last:.4} ({:.2}%)", 100.0 * last / first))
}

// ---------------------------------------------------------------- 6-7

fn random_q(model: &HandModel, rng: &mut ChaCha8Rng) -> JointAngles {
    JointAngles(model.limits().iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect())
}

fn retargeting() -> Check {
    let m = robot24();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (qh, q0) = (random_q(&m, &mut rng), random_q(&m, &mut rng));
        let sol = retarget_frame(&m, &m, &qh, &q0, &SolverConfig::default()).map_err(|e| e.to_string())?;
        worst = worst.max(sol.objective);
    }
    ensure!(worst < 1e-10, "self-retargeting objective {worst:.2e}");
    let big = m.scaled(1.2, "robot24-x1.2");
    for i in 0..100 {
        let (qh, q0) = (random_q(&m, &mut rng), random_q(&big, &mut rng));
        let sol = retarget_frame(&big, &m, &qh, &q0, &SolverConfig::default()).map_err(|e| e.to_string())?;
        let init = objective(&big, &m, &q0, &qh).map_err(|e| e.to_string())?;
        ensure!(sol.objective < init, "scaled trial {i}: {} !< {init}", sol.objective);
    }
    Ok(format!("self max objective {worst:.1e}; 100/100 scaled trials descend"))
}

fn stream(start: f64, hz: f64, end: f64) -> Vec<StreamSample> {
    (0..)
        .map(|i| start + i as f64 / hz)
        .take_while(|&t| t <= end)
        .map(|t| StreamSample { timestamp: t, payload: vec![t] })
        .collect()
}

fn alignment_bound() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut wt, mut wm) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let visual: Vec<f64> = (0..300).map(|k| k as f64 / 30.0).collect();
        let end = visual[299] + 0.01;
        let tactile = stream(-rng.random_range(0.0..1.0) / 200.0, 200.0, end);
        let mocap = stream(-rng.random_range(0.0..1.0) / 1000.0, 1000.0, end);
        for f in align_streams(&visual, &tactile, &mocap).map_err(|e| e.to_string())? {
            wt = wt.max(f.tactile_error.abs());
            wm = wm.max(f.mocap_error.abs());
        }
    }
    ensure!(wt <= 2.5e-3 + 1e-12, "tactile error {wt}");
    ensure!(wm <= 0.5e-3 + 1e-12, "mocap error {wm}");
    Ok(format!("max error tactile {:.3} ms, mocap {:.3} ms", wt * 1e3, wm * 1e3))
}

// ---------------------------------------------------------------- 8-9

/// Encoder digests before and after the learnability run.
static DIGESTS: Mutex<Option<(String, String)>> = Mutex::new(None);

const RL_IMAGE: usize = 32;

fn learnability_encoder() -> Result<FrozenEncoder, String> {
    let g = GeneratorConfig { trajectories: 4, frames_per_trajectory: 30, image_size: RL_IMAGE, ..GeneratorConfig::default() };
    let ds = synthesize(&g, 1).map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        embed_dim: 32,
        enc_depth: 1,
        enc_heads: 4,
        dec_depth: 1,
        dec_heads: 4,
        mlp_ratio: 2,
        patch_size: 8,
        image_size: RL_IMAGE,
        ..ModelConfig::default()
    };
    let train = PretrainConfig {
        optim: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        batch_size: 8,
        epochs: 1000,
        max_steps: Some(200),
        seed: 0,
    };
    let ck = pretrain(&ds, &cfg, &train, |_| {}).map_err(|e| e.to_string())?;
    ensure!(ck.history.last().unwrap().loss.total < ck.history[0].loss.total, "pretraining made no progress");
    Ok(FrozenEncoder::new(ck.model))
}

/// Mean of the positive part of the final cap angle under uniform random actions.
fn random_rotation(env: &Environment, episodes: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut st = env.reset(1, 10_000 + ep);
        while !st.done {
            let a: Vec<f64> = (0..ACTION_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect();
            st = env.step(&st, &a).unwrap().state;
        }
        total += st.cap_angle.max(0.0);
    }
    total / episodes as f64
}

fn curriculum_learnability() -> Check {
    let env_cfg = EnvConfig { image_size: RL_IMAGE, ..EnvConfig::default() };
    let easy = BottleSpec::easy();
    for stage in [1, 2] {
        let rows = evaluate(&mut OracleController::new(), &[easy], "easy", &env_cfg, stage, 10, 80).map_err(|e| e.to_string())?;
        ensure!(rows[0].success_rate == 1.0, "oracle stage {stage}: {}/10", rows[0].successes);
    }

    let enc = learnability_encoder()?;
    let before = enc.digest();
    let ppo = PPOConfig {
        n_envs: 16,
        rollout: 128,
        stage1_iters: 300,
        stage2_iters: 0,
        hidden: 64,
        lr: 1e-3,
        init_log_std: -0.5,
        checkpoint_every: 0,
        seed: 0,
        ..PPOConfig::default()
    };
    let out = train_curriculum(&enc, &[easy], &env_cfg, &ppo, None, |_| {}).map_err(|e| e.to_string())?;
    *DIGESTS.lock().unwrap() = Some((before, out.policy.encoder.digest()));
    ensure!(out.log.iter().all(|r| r.stage == 1), "stage 2 reached in a stage-1 run");

    let env = Environment::new(easy, env_cfg).unwrap();
    let baseline = random_rotation(&env, 64);
    let trained = evaluate(&mut PolicyController::new(out.policy), &[easy], "easy", &env_cfg, 1, 64, 81)
        .map_err(|e| e.to_string())?;
    let rot = trained[0].mean_cap_angle;
    ensure!(rot >= 5.0 * baseline, "trained {rot:.3} rad vs random {baseline:.3} rad ({:.2}x)", rot / baseline);
    Ok(format!(
        "oracle 10/10 in both stages; trained {rot:.3} rad vs random {baseline:.3} rad ({:.1}x, {:.0}% success)",
        rot / baseline,
        100.0 * trained[0].success_rate
    ))
}

fn frozen_encoder() -> Check {
    match DIGESTS.lock().unwrap().clone() {
        Some((a, b)) => {
            ensure!(a == b, "digest {a} became {b}");
            Ok(format!("digest {} unchanged", &a[..16]))
        }
        None => Err("criterion 8 did not complete an RL run".into()),
    }
}

// ---------------------------------------------------------------- 10-11

fn ablation_matrix() -> Check {
    let required = [
        "V", "T", "A", "VT", "VTA", "VTO", "VTA-Scr", "VTAO", "v1", "v2", "v3", "v4", "v5", "v6", "v7", "v8",
    ];
    for n in required {
        ensure!(ABLATION_NAMES.contains(&n), "{n} missing from the baseline list");
        configure_ablation(n).and_then(|c| c.validate()).map_err(|e| format!("{n}: {e}"))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("sweep");
    let status = Command::new(env!("CARGO_BIN_EXE_vtao"))
        .args(["ablate", "--profile", "smoke", "--names", &required.join(","), "--out", out.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(status.status.success(), "ablate failed:\n{}", String::from_utf8_lossy(&status.stderr));
    let table = fs::read_to_string(out.join("comparison.tsv")).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split('\t').collect()).collect();
    ensure!(rows[0] == ["Baseline", "Seen", "Unseen"], "header {:?}", rows[0]);
    let labels: Vec<&str> = rows[1..].iter().map(|r| r[0]).collect();
    ensure!(labels == required, "rows {labels:?}");
    for r in &rows[1..] {
        ensure!(r.len() == 3 && r[1].contains(" ± ") && r[2].contains(" ± "), "row {r:?}");
    }
    Ok(format!("{} baselines trained, evaluated and tabulated", required.len()))
}

fn success_metric() -> Check {
    let mut t = SuccessTracker::new();
    for o in [1, 1, 0, 1, 0, 1, 1, 1, 0, 1] {
        t.push(o == 1);
    }
    ensure!((running_success_rate(&t).unwrap() - 0.7).abs() < 1e-12, "rate {:?}", t.rate());
    let mut t = SuccessTracker::new();
    for o in [0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0] {
        t.push(o == 1);
    }
    ensure!(t.len() == 10 && (t.rate().unwrap() - 0.9).abs() < 1e-12, "ring buffer rate {:?}", t.rate());
    ensure!(running_success_rate(&SuccessTracker::new()).is_none(), "empty tracker reports a rate");

    let (seen, unseen) = make_bottle_sets(0);
    let cfg = EnvConfig { image_size: 16, horizon: 20, ..EnvConfig::default() };
    let report = evaluate_split(&mut ZeroController, &seen, &unseen, &cfg, 2, 1, 0).map_err(|e| e.to_string())?;
    let train = report.rows.iter().filter(|r| r.set == "train").count();
    let test = report.rows.iter().filter(|r| r.set == "test").count();
    ensure!((train, test) == (10, 5), "{train} seen / {test} unseen rows");
    ensure!(report.train.mean == 0.0 && report.train.std == 0.0, "zero policy aggregate {:?}", report.train);
    Ok("0.7 and ring-buffer cases exact; 10 seen + 5 unseen rows with mean ± std".into())
}

fn main() -> ExitCode {
    let criteria: [(u8, &str, u64, fn() -> Check); 11] = [
        (1, "reward-oracle equivalence", 10, reward_oracle_equivalence),
        (2, "loss-weight fidelity", 30, loss_weight_fidelity),
        (3, "mask exactness", 60, mask_exactness),
        (4, "gradient check", 300, gradient_check),
        (5, "pretraining overfit", 600, pretraining_overfit),
        (6, "retargeting", 300, retargeting),
        (7, "alignment bound", 10, alignment_bound),
        (8, "curriculum learnability", 7200, curriculum_learnability),
        (9, "frozen-encoder invariance", 7200, frozen_encoder),
        (10, "ablation matrix", 1800, ablation_matrix),
        (11, "success metric", 10, success_metric),
    ];
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = start.elapsed();
        let result = match result {
            Ok(msg) if took > Duration::from_secs(budget) => Err(format!("{msg}; over the {budget} s budget")),
            r => r,
        };
        let (tag, msg) = match &result {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        failed += usize::from(result.is_err());
        println!("criterion {id:>2} {tag} {name}: {msg} [{:.1} s]", took.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
