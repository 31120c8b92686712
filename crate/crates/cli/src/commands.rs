use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ndarray::{Array2, ArrayD, Ix2};
use serde::{Deserialize, Serialize};

use vtao_core::dataset::{generate_synthetic_dataset, load_dataset, read_array_file, write_array_file};
use vtao_core::env::{make_bottle_sets, BottleSpec, EnvConfig};
use vtao_core::kinematics::{resolve_hand_model, JointAngles};
use vtao_core::model::{configure_ablation_from, pretrain as run_pretrain, Checkpoint, ModelConfig, ABLATION_NAMES};
use vtao_core::retarget::retarget_trajectory;
use vtao_core::rl::{
    evaluate, train_curriculum, Aggregate, Controller, EvalRow, FrozenEncoder, OracleController, PolicyCheckpoint,
    PolicyController, RandomController, ZeroController,
};

use crate::config::RunConfig;
use crate::{report, BottleSet, Common, ControllerKind, Failure};

type Outcome = Result<(), Failure>;

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const EVAL_FILE: &str = "eval.json";
pub const EVAL_TABLE: &str = "eval.tsv";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINAL_POLICY: &str = "checkpoints/final.ckpt";

/// What a run directory was made from, for `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub label: String,
    pub ablation: Option<String>,
    pub encoder: PathBuf,
    pub encoder_digest: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub controller: String,
    pub policy: Option<PathBuf>,
    pub stage: u8,
    pub repeats: usize,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    /// Success-rate mean and std across seen bottles.
    pub seen: Option<Aggregate>,
    pub unseen: Option<Aggregate>,
    pub seen_cap_angle: Option<Aggregate>,
    pub unseen_cap_angle: Option<Aggregate>,
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    RunConfig::layered(common.profile, common.config.as_deref(), &common.sets)
        .map(|c| c.with_seed(common.seed))
        .map_err(|e| Failure::Usage(format!("{e:#}")))
}

fn check_ablation(name: &str) -> Result<(), Failure> {
    if ABLATION_NAMES.contains(&name) {
        Ok(())
    } else {
        Err(Failure::Usage(format!("unknown baseline `{name}`; expected one of {}", ABLATION_NAMES.join(", "))))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(common: &Common, out: &Path) -> Outcome {
    let cfg = resolve(common)?;
    let ds = generate_synthetic_dataset(&cfg.data, cfg.seed, out).context("generating dataset")?;
    cfg.write(&out.join(CONFIG_FILE))?;
    println!("wrote {} frames to {}", ds.len(), out.display());
    Ok(())
}

pub fn retarget(common: &Common, traj: &Path, robot: &str, human: &str, out: &Path) -> Outcome {
    let cfg = resolve(common)?;
    let robot = resolve_hand_model(robot).context("robot model")?;
    let human = resolve_hand_model(human).context("human model")?;
    let raw: ArrayD<f64> = match read_array_file::<f64>(traj) {
        Ok(a) => a,
        Err(_) => read_array_file::<f32>(traj).with_context(|| format!("reading {}", traj.display()))?.mapv(f64::from),
    };
    let raw = raw
        .into_dimensionality::<Ix2>()
        .map_err(|_| anyhow!("trajectory must be a (frames, dofs) array"))?;
    if raw.ncols() != human.n_dof() {
        return Err(anyhow!("trajectory has {} columns, {} has {} dofs", raw.ncols(), human.name(), human.n_dof()).into());
    }
    let frames: Vec<JointAngles> = raw.rows().into_iter().map(|r| JointAngles(r.to_vec())).collect();
    let sols = retarget_trajectory(&robot, &human, &frames, &cfg.retarget).context("retargeting")?;
    let q = Array2::from_shape_fn((sols.len(), robot.n_dof()), |(t, j)| sols[t].q.0[j]);
    write_array_file(out, &q.into_dyn()).context("writing retargeted trajectory")?;
    let worst = sols.iter().map(|s| s.objective).fold(0.0, f64::max);
    println!("retargeted {} frames onto {} (max objective {worst:.3e})", sols.len(), robot.name());
    Ok(())
}

fn model_for(cfg: &RunConfig, ablation: &str) -> Result<ModelConfig, Failure> {
    check_ablation(ablation)?;
    Ok(configure_ablation_from(ablation, &cfg.model).map_err(anyhow::Error::from)?)
}

fn pretrain_into(cfg: &RunConfig, data: &Path, ablation: &str, out: &Path) -> Outcome {
    let model = model_for(cfg, ablation)?;
    let ds = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let every = (cfg.pretrain.max_steps.unwrap_or(usize::MAX).min(cfg.pretrain.epochs * ds.len()) / 10).max(1);
    let ck = run_pretrain(&ds, &model, &cfg.pretrain, |h| {
        if h.step % every == 0 {
            eprintln!("pretrain {ablation} step {} epoch {} loss {:.4}", h.step, h.epoch, h.loss.total);
        }
    })
    .context("pretraining")?;
    ck.save(out).context("saving encoder checkpoint")?;
    let mut resolved = cfg.clone();
    resolved.model = model;
    resolved.write(&config_beside(out))?;
    println!("wrote encoder {} after {} steps", out.display(), ck.step);
    Ok(())
}

/// `enc.ckpt` -> `enc.ckpt.toml`.
fn config_beside(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn pretrain(common: &Common, data: &Path, ablation: &str, out: &Path) -> Outcome {
    let cfg = resolve(common)?;
    pretrain_into(&cfg, data, ablation, out)
}

fn ablation_matches(name: &str, enc: &ModelConfig) -> anyhow::Result<bool> {
    let want = configure_ablation_from(name, enc)?;
    Ok(want == *enc)
}

fn train_into(cfg: &RunConfig, encoder: &Path, ablation: Option<&str>, out: &Path) -> Outcome {
    if let Some(name) = ablation {
        check_ablation(name)?;
    }
    let ck = Checkpoint::load(encoder).with_context(|| format!("loading encoder {}", encoder.display()))?;
    if let Some(name) = ablation {
        if !ablation_matches(name, ck.model.config())? {
            return Err(anyhow!("encoder {} was not built for baseline {name}", encoder.display()).into());
        }
    }
    let enc = FrozenEncoder::new(ck.model);
    let mut resolved = cfg.clone();
    resolved.model = enc.model().config().clone();
    fs::create_dir_all(out)?;
    resolved.write(&out.join(CONFIG_FILE))?;
    let info = RunInfo {
        label: ablation.map(str::to_string).unwrap_or_else(|| dir_label(out)),
        ablation: ablation.map(str::to_string),
        encoder: encoder.to_path_buf(),
        encoder_digest: enc.digest(),
        seed: cfg.seed,
    };
    write_json(&out.join(RUN_FILE), &info)?;
    // The log is append-only; a rerun into the same directory starts it fresh.
    let log = out.join(TRAIN_LOG);
    if log.exists() {
        fs::remove_file(&log)?;
    }
    let (seen, _) = make_bottle_sets(cfg.bottle_seed);
    let every = (cfg.ppo.total_iters() / 10).max(1);
    let outcome = train_curriculum(&enc, &seen, &cfg.env, &cfg.ppo, Some(out), |row| {
        if row.iteration % every == 0 {
            eprintln!(
                "train {} iter {} stage {} reward {:.3} success {}",
                info.label,
                row.iteration,
                row.stage,
                row.reward.total,
                row.success_rate.map_or("-".into(), |r| format!("{r:.2}"))
            );
        }
    })
    .context("curriculum training")?;
    if enc.digest() != info.encoder_digest {
        return Err(anyhow!("encoder weights changed during training").into());
    }
    println!("trained {} iterations into {}", outcome.log.len(), out.display());
    Ok(())
}

pub fn train(common: &Common, encoder: &Path, ablation: Option<&str>, out: &Path) -> Outcome {
    let cfg = resolve(common)?;
    train_into(&cfg, encoder, ablation, out)
}

fn dir_label(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn eval_into(
    cfg: &RunConfig,
    policy: Option<&Path>,
    kind: Option<ControllerKind>,
    bottles: BottleSet,
    out: &Path,
) -> Outcome {
    let (mut controller, env, name): (Box<dyn Controller>, EnvConfig, String) = match (policy, kind) {
        (Some(path), _) => {
            let p = PolicyCheckpoint::load(path).with_context(|| format!("loading policy {}", path.display()))?;
            let env = p.env;
            (Box::new(PolicyController::new(p)), env, "policy".into())
        }
        (None, Some(ControllerKind::Zero)) => (Box::new(ZeroController), cfg.env, "zero".into()),
        (None, Some(ControllerKind::Random)) => (Box::new(RandomController::new(cfg.seed)), cfg.env, "random".into()),
        (None, Some(ControllerKind::Oracle)) => (Box::new(OracleController::new()), cfg.env, "oracle".into()),
        (None, None) => return Err(Failure::Usage("eval needs --policy or --controller".into())),
    };
    let (seen, unseen) = make_bottle_sets(cfg.bottle_seed);
    let run = |c: &mut dyn Controller, set: &[BottleSpec], label: &str, seed: u64| {
        evaluate(c, set, label, &env, cfg.eval.stage, cfg.eval.repeats, seed).context("evaluation")
    };
    let agg = |rows: &[EvalRow], f: fn(&EvalRow) -> f64| Aggregate::of(&rows.iter().map(f).collect::<Vec<_>>());
    let mut summary = EvalSummary {
        controller: name,
        policy: policy.map(Path::to_path_buf),
        stage: cfg.eval.stage,
        repeats: cfg.eval.repeats,
        seed: cfg.seed,
        rows: Vec::new(),
        seen: None,
        unseen: None,
        seen_cap_angle: None,
        unseen_cap_angle: None,
    };
    if bottles != BottleSet::Unseen {
        let rows = run(controller.as_mut(), &seen, "seen", cfg.seed)?;
        summary.seen = Some(agg(&rows, |r| r.success_rate));
        summary.seen_cap_angle = Some(agg(&rows, |r| r.mean_cap_angle));
        summary.rows.extend(rows);
    }
    if bottles != BottleSet::Seen {
        let rows = run(controller.as_mut(), &unseen, "unseen", cfg.seed.wrapping_add(1))?;
        summary.unseen = Some(agg(&rows, |r| r.success_rate));
        summary.unseen_cap_angle = Some(agg(&rows, |r| r.mean_cap_angle));
        summary.rows.extend(rows);
    }
    fs::create_dir_all(out)?;
    write_json(&out.join(EVAL_FILE), &summary)?;
    fs::write(out.join(EVAL_TABLE), eval_table(&summary))?;
    let mut resolved = cfg.clone();
    resolved.env = env;
    if policy.is_none() || !out.join(CONFIG_FILE).exists() {
        resolved.write(&out.join(CONFIG_FILE))?;
    }
    print!("{}", eval_table(&summary));
    Ok(())
}

fn eval_table(s: &EvalSummary) -> String {
    let mut t = String::from("set\tbottle\tepisodes\tsuccesses\tsuccess_rate\tmean_cap_angle\n");
    for r in &s.rows {
        t += &format!("{}\t{}\t{}\t{}\t{:.3}\t{:.4}\n", r.set, r.bottle, r.episodes, r.successes, r.success_rate, r.mean_cap_angle);
    }
    for (name, a) in [("seen", s.seen), ("unseen", s.unseen)] {
        if let Some(a) = a {
            t += &format!("{name}\tall\t\t\t{}\t\n", report::pm(a));
        }
    }
    t
}

pub fn eval(common: &Common, policy: Option<&Path>, kind: Option<ControllerKind>, bottles: BottleSet, out: &Path) -> Outcome {
    let cfg = resolve(common)?;
    eval_into(&cfg, policy, kind, bottles, out)
}

pub fn ablate(common: &Common, names: &[String], data: Option<&Path>, out: &Path) -> Outcome {
    for n in names {
        check_ablation(n)?;
    }
    let cfg = resolve(common)?;
    fs::create_dir_all(out)?;
    let data = match data {
        Some(d) => d.to_path_buf(),
        None => {
            let d = out.join("data");
            generate_synthetic_dataset(&cfg.data, cfg.seed, &d).context("generating dataset")?;
            cfg.write(&d.join(CONFIG_FILE))?;
            d
        }
    };
    let mut runs = Vec::new();
    for name in names {
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        let enc = dir.join("encoder.ckpt");
        pretrain_into(&cfg, &data, name, &enc).map_err(|e| stage_failure(name, "pretrain", e))?;
        let mut run_cfg = cfg.clone();
        run_cfg.model = model_for(&cfg, name)?;
        train_into(&run_cfg, &enc, Some(name), &dir).map_err(|e| stage_failure(name, "train", e))?;
        eval_into(&run_cfg, Some(&dir.join(FINAL_POLICY)), None, BottleSet::All, &dir)
            .map_err(|e| stage_failure(name, "eval", e))?;
        runs.push(dir);
    }
    report::report(&runs, out)?;
    Ok(())
}

fn stage_failure(name: &str, stage: &str, e: Failure) -> Failure {
    match e {
        Failure::Runtime(e) => Failure::Runtime(e.context(format!("{name}: {stage} failed"))),
        usage => usage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_labels_must_match_the_encoder() {
        let base = RunConfig::profile(crate::config::Profile::Smoke).model;
        let vt = configure_ablation_from("VT", &base).unwrap();
        assert!(ablation_matches("VT", &vt).unwrap());
        assert!(ablation_matches("v3", &vt).unwrap());
        assert!(!ablation_matches("VTAO", &vt).unwrap());
        let v5 = configure_ablation_from("v5", &base).unwrap();
        assert!(!ablation_matches("v6", &v5).unwrap());
        assert!(matches!(check_ablation("VTX"), Err(Failure::Usage(_))));
    }

    #[test]
    fn config_path_sits_beside_the_checkpoint() {
        assert_eq!(config_beside(Path::new("a/enc.ckpt")), PathBuf::from("a/enc.ckpt.toml"));
    }
}
