use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{proprio_matrix, PolicyCheckpoint};
use super::RlError;
use crate::env::oracle::TwistOracle;
use crate::env::{BottleSpec, EnvConfig, EnvState, Environment, Hands, Outcome, ACTION_DIM};

/// Anything that can drive a batch of environments during evaluation.
pub trait Controller {
    /// Called once before a round of `episodes` parallel episodes starts.
    fn begin(&mut self, episodes: usize) {
        let _ = episodes;
    }

    /// One action per `(episode index, environment, state)` entry.
    fn act(&mut self, batch: &[(usize, &Environment, &EnvState)]) -> Result<Vec<Vec<f64>>, RlError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroController;

impl Controller for ZeroController {
    fn act(&mut self, batch: &[(usize, &Environment, &EnvState)]) -> Result<Vec<Vec<f64>>, RlError> {
        Ok(vec![vec![0.0; ACTION_DIM]; batch.len()])
    }
}

/// Uniform actions in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct RandomController {
    rng: ChaCha8Rng,
}

impl RandomController {
    pub fn new(seed: u64) -> Self {
        RandomController { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Controller for RandomController {
    fn act(&mut self, batch: &[(usize, &Environment, &EnvState)]) -> Result<Vec<Vec<f64>>, RlError> {
        Ok(batch
            .iter()
            .map(|_| (0..ACTION_DIM).map(|_| self.rng.random_range(-1.0..=1.0)).collect())
            .collect())
    }
}

/// The scripted twisting controller, one instance per episode.
#[derive(Debug, Default)]
pub struct OracleController {
    oracles: Vec<TwistOracle>,
}

impl OracleController {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Controller for OracleController {
    fn begin(&mut self, episodes: usize) {
        self.oracles = (0..episodes).map(|_| TwistOracle::new()).collect();
    }

    fn act(&mut self, batch: &[(usize, &Environment, &EnvState)]) -> Result<Vec<Vec<f64>>, RlError> {
        Ok(batch.iter().map(|&(i, env, s)| self.oracles[i].act(env, s)).collect())
    }
}

/// A trained policy acting with its mean action.
#[derive(Debug, Clone)]
pub struct PolicyController {
    pub policy: PolicyCheckpoint,
}

impl PolicyController {
    pub fn new(policy: PolicyCheckpoint) -> Self {
        PolicyController { policy }
    }
}

impl Controller for PolicyController {
    fn act(&mut self, batch: &[(usize, &Environment, &EnvState)]) -> Result<Vec<Vec<f64>>, RlError> {
        let obs: Vec<_> = batch.iter().map(|&(_, env, s)| env.observe(s)).collect();
        let refs: Vec<_> = obs.iter().collect();
        let feats = self.policy.encoder.features(&refs)?;
        let prop = self.policy.norm.normalize(&proprio_matrix(&refs));
        let (mu, _) = self.policy.net.forward(&feats, &prop);
        Ok(mu.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// `"train"` or `"test"`, or the caller's label.
    pub set: String,
    pub bottle: usize,
    pub spec: BottleSpec,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_cap_angle: f64,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Aggregate { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Aggregate { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Success rate over the training bottles.
    pub train: Aggregate,
    pub test: Aggregate,
    pub train_cap_angle: Aggregate,
    pub test_cap_angle: Aggregate,
}

/// Runs `repeats` episodes per bottle, all bottles in lockstep, and reports
/// one row per bottle. Episode seeds come from `seed` only, so two
/// deterministic controllers see identical initial states.
pub fn evaluate(
    controller: &mut dyn Controller,
    bottles: &[BottleSpec],
    label: &str,
    env_config: &EnvConfig,
    stage: u8,
    repeats: usize,
    seed: u64,
) -> Result<Vec<EvalRow>, RlError> {
    if repeats == 0 {
        return Err(RlError::Config("evaluation needs at least one episode per bottle".into()));
    }
    let hands = Arc::new(Hands::default());
    let envs: Vec<Environment> = bottles
        .iter()
        .map(|b| Environment::with_hands(*b, *env_config, hands.clone()))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Episode k runs on bottle k / repeats.
    let n = envs.len() * repeats;
    let env_of = |k: usize| &envs[k / repeats];
    let mut states: Vec<EnvState> = (0..n).map(|k| env_of(k).reset(stage, rng.random())).collect();
    controller.begin(n);
    let mut live: Vec<usize> = (0..n).collect();
    while !live.is_empty() {
        let batch: Vec<_> = live.iter().map(|&k| (k, env_of(k), &states[k])).collect();
        let actions = controller.act(&batch)?;
        if actions.len() != live.len() {
            return Err(RlError::Config(format!("controller returned {} actions for {} episodes", actions.len(), live.len())));
        }
        for (&k, a) in live.iter().zip(&actions) {
            states[k] = env_of(k).step(&states[k], a)?.state;
        }
        live.retain(|&k| !states[k].done);
    }
    Ok(envs
        .iter()
        .enumerate()
        .map(|(b, env)| {
            let eps = &states[b * repeats..(b + 1) * repeats];
            let successes = eps.iter().filter(|s| s.outcome == Some(Outcome::Success)).count();
            EvalRow {
                set: label.to_string(),
                bottle: b,
                spec: env.bottle,
                episodes: repeats,
                successes,
                success_rate: successes as f64 / repeats as f64,
                mean_cap_angle: eps.iter().map(|s| s.cap_angle).sum::<f64>() / repeats as f64,
            }
        })
        .collect())
}

/// Train rows, then test rows, with per-set aggregates.
pub fn evaluate_split(
    controller: &mut dyn Controller,
    train: &[BottleSpec],
    test: &[BottleSpec],
    env_config: &EnvConfig,
    stage: u8,
    repeats: usize,
    seed: u64,
) -> Result<EvalReport, RlError> {
    let mut rows = evaluate(controller, train, "train", env_config, stage, repeats, seed)?;
    let test_rows = evaluate(controller, test, "test", env_config, stage, repeats, seed.wrapping_add(1))?;
    let agg = |rows: &[EvalRow], f: fn(&EvalRow) -> f64| Aggregate::of(&rows.iter().map(f).collect::<Vec<_>>());
    let report = EvalReport {
        train: agg(&rows, |r| r.success_rate),
        test: agg(&test_rows, |r| r.success_rate),
        train_cap_angle: agg(&rows, |r| r.mean_cap_angle),
        test_cap_angle: agg(&test_rows, |r| r.mean_cap_angle),
        rows: Vec::new(),
    };
    rows.extend(test_rows);
    Ok(EvalReport { rows, ..report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_uses_population_std() {
        let a = Aggregate::of(&[1.0, 3.0]);
        assert_eq!(a.mean, 2.0);
        assert_eq!(a.std, 1.0);
    }

    #[test]
    fn zero_controller_never_succeeds() {
        let cfg = EnvConfig { image_size: 16, horizon: 30, ..EnvConfig::default() };
        let rows = evaluate(&mut ZeroController, &[BottleSpec::easy()], "x", &cfg, 2, 2, 3).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].successes, 0);
        assert_eq!(rows[0].episodes, 2);
    }
}
