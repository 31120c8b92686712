use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use vtao_core::dataset::GeneratorConfig;
use vtao_core::env::EnvConfig;
use vtao_core::model::{AdamWConfig, ModelConfig, PretrainConfig};
use vtao_core::retarget::SolverConfig;
use vtao_core::rl::PPOConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Smoke,
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub repeats: usize,
    pub stage: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { repeats: 10, stage: 2 }
    }
}

/// Everything a run needs. Resolved copies are written into run directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Copied into every stage's seed on resolution.
    pub seed: u64,
    /// Seed of the seen/unseen bottle geometries.
    pub bottle_seed: u64,
    pub data: GeneratorConfig,
    pub retarget: SolverConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub env: EnvConfig,
    pub ppo: PPOConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let mut c = RunConfig {
            profile,
            seed: 0,
            bottle_seed: 0,
            data: GeneratorConfig::default(),
            retarget: SolverConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            env: EnvConfig::default(),
            ppo: PPOConfig::default(),
            eval: EvalConfig::default(),
        };
        match profile {
            Profile::Smoke => {
                let size = 16;
                c.data = GeneratorConfig { trajectories: 2, frames_per_trajectory: 12, image_size: size, ..c.data };
                c.model = ModelConfig {
                    embed_dim: 16,
                    enc_depth: 1,
                    enc_heads: 2,
                    dec_depth: 1,
                    dec_heads: 2,
                    mlp_ratio: 2,
                    patch_size: 8,
                    image_size: size,
                    ..c.model
                };
                c.pretrain = PretrainConfig { batch_size: 4, epochs: 1, max_steps: Some(3), ..c.pretrain };
                c.env = EnvConfig { image_size: size, horizon: 20, ..c.env };
                c.ppo = PPOConfig {
                    n_envs: 4,
                    rollout: 8,
                    stage1_iters: 3,
                    stage2_iters: 2,
                    epochs: 2,
                    minibatches: 2,
                    hidden: 16,
                    checkpoint_every: 0,
                    ..c.ppo
                };
                c.eval.repeats = 1;
            }
            Profile::Desk => {
                let size = 32;
                c.data = GeneratorConfig { trajectories: 8, frames_per_trajectory: 60, image_size: size, ..c.data };
                c.model = ModelConfig {
                    embed_dim: 32,
                    enc_depth: 1,
                    enc_heads: 4,
                    dec_depth: 1,
                    dec_heads: 4,
                    mlp_ratio: 2,
                    patch_size: 8,
                    image_size: size,
                    ..c.model
                };
                c.pretrain = PretrainConfig {
                    optim: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
                    batch_size: 8,
                    epochs: 1000,
                    max_steps: Some(1000),
                    ..c.pretrain
                };
                c.env = EnvConfig { image_size: size, ..c.env };
                c.ppo = PPOConfig { rollout: 128, hidden: 64, lr: 1e-3, init_log_std: -0.5, ..c.ppo };
            }
            Profile::Paper => {
                c.ppo = PPOConfig { n_envs: 400, stage1_iters: 2250, stage2_iters: 2250, checkpoint_every: 500, ..c.ppo };
            }
        }
        c
    }

    /// Profile defaults, then the file, then `key.path=value` overrides.
    /// A `profile` key in the file picks the base unless `profile` is given.
    pub fn layered(profile: Option<Profile>, file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let file_table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                text.parse::<Table>().with_context(|| format!("parsing {}", path.display()))?
            }
            None => Table::new(),
        };
        let profile = match (profile, file_table.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => v.clone().try_into().context("unknown profile in config file")?,
            (None, None) => Profile::Desk,
        };
        let mut table = Table::try_from(Self::profile(profile)).context("serializing profile defaults")?;
        merge(&mut table, file_table);
        table.insert("profile".into(), Value::try_from(profile)?);
        for set in sets {
            apply_set(&mut table, set)?;
        }
        let config: RunConfig = Value::Table(table).try_into().context("invalid configuration")?;
        Ok(config.resolved())
    }

    /// Copies the master seed into the per-stage seeds.
    pub fn resolved(mut self) -> Self {
        self.pretrain.seed = self.seed;
        self.ppo.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.resolved()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }

    #[cfg(test)]
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `ppo.lr=1e-3`; the value is parsed as a TOML value, falling back to a string.
fn apply_set(table: &mut Table, set: &str) -> Result<()> {
    let Some((key, raw)) = set.split_once('=') else {
        bail!("override `{set}` is not key=value");
    };
    let value: Value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{p}` in `{key}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_round_trip_through_toml() {
        for p in [Profile::Smoke, Profile::Desk, Profile::Paper] {
            let c = RunConfig::profile(p).resolved();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("run.toml");
            c.write(&path).unwrap();
            assert_eq!(RunConfig::read(&path).unwrap(), c);
        }
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "profile = \"smoke\"\nseed = 4\n[ppo]\nlr = 0.01\nhidden = 8\n").unwrap();
        let c = RunConfig::layered(None, Some(&path), &["ppo.hidden=12".into()]).unwrap();
        assert_eq!(c.profile, Profile::Smoke);
        assert_eq!(c.ppo.lr, 0.01);
        assert_eq!(c.ppo.hidden, 12);
        assert_eq!(c.ppo.n_envs, 4);
        assert_eq!((c.seed, c.ppo.seed, c.pretrain.seed), (4, 4, 4));
        let c = RunConfig::layered(Some(Profile::Desk), Some(&path), &[]).unwrap();
        assert_eq!(c.ppo.n_envs, 16);
        assert_eq!(c.ppo.hidden, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::layered(None, None, &["bogus=1".into()]).is_err());
        assert!(RunConfig::layered(None, None, &["ppo".into()]).is_err());
    }
}
