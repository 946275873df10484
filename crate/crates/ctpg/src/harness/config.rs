//! Flat `section.key = value` configuration with a closed key registry.
//! Every effective value, default or not, is echoed into the run manifest so
//! a run is reproducible from its output directory alone.

use crate::envs::{ActionSpace, Sharing, TaskSuite, Variation};
use crate::error::{Error, Result};
use crate::guide::GuideHyper;
use crate::sac::SacHyper;
use crate::trainer::{Mode, TrainConfig, Trainer};
use std::collections::BTreeMap;
use std::path::Path;

/// Registered keys and their defaults. `None` marks a required key.
const REGISTRY: &[(&str, Option<&str>)] = &[
    ("env.suite", None),
    ("env.n_tasks", Some("4")),
    ("env.grid_size", Some("9")),
    ("env.sharing", Some("prefix-chain")),
    ("env.variation", Some("gravity-scale")),
    // 0 keeps the suite's built-in horizon.
    ("env.episode_length", Some("0")),
    ("sac.lr_actor", Some("1e-4")),
    ("sac.lr_critic", Some("1e-4")),
    ("sac.lr_alpha", Some("1e-4")),
    ("sac.tau", Some("0.005")),
    ("sac.gamma", Some("0.99")),
    ("sac.reward_scale", Some("0.1")),
    ("sac.batch_per_task", Some("128")),
    ("sac.target_entropy_scale", Some("0.5")),
    ("sac.hidden", Some("64,64")),
    ("sac.shared_trunk", Some("false")),
    ("sac.init_log_alpha", Some("0")),
    ("guide.k", Some("10")),
    ("guide.mc_samples", Some("5")),
    ("guide.enable_filter_gate", Some("true")),
    ("guide.enable_block_gate", Some("true")),
    ("guide.enable_hindsight", Some("true")),
    ("guide.lr_actor", Some("1e-4")),
    ("guide.lr_critic", Some("1e-4")),
    ("guide.lr_alpha", Some("1e-4")),
    ("guide.tau", Some("0.005")),
    ("guide.init_log_alpha", Some("0")),
    ("replay.capacity", Some("100000")),
    ("replay.min_fill_before_training", Some("500")),
    ("train.mode", Some("base")),
    ("train.total_steps_per_task", Some("20000")),
    ("train.eval_every", Some("2000")),
    ("train.eval_episodes", Some("32")),
    ("train.maskout_threshold", Some("3e3")),
    ("train.seed", Some("0")),
    ("train.epoch_episodes", Some("10")),
    ("train.bpt_refresh_episodes", Some("10")),
    ("train.bpt_eval_episodes", Some("5")),
    ("ablate.no_filter_gate", Some("false")),
    ("ablate.no_block_gate", Some("false")),
    ("ablate.no_hindsight", Some("false")),
];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    REGISTRY.iter().any(|(k, _)| *k == key)
}

impl Config {
    pub fn defaults() -> Config {
        let values = REGISTRY
            .iter()
            .filter_map(|(k, d)| d.map(|d| (k.to_string(), d.to_string())))
            .collect();
        Config { values }
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Config::defaults();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `--set key=value` overrides in order.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{s}'")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Config(format!("missing required config key '{key}'")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| {
            Error::Config(format!("config key '{key}': expected {what}, got '{raw}'"))
        })
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parsed(key, "a number")
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!(
                "config key '{key}': expected true or false, got '{other}'"
            ))),
        }
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.raw(key)
    }

    fn hidden(&self) -> Result<Vec<usize>> {
        let raw = self.raw("sac.hidden")?;
        raw.split(',')
            .map(|p| {
                p.trim().parse().map_err(|_| {
                    Error::Config(format!("config key 'sac.hidden': bad layer size '{p}'"))
                })
            })
            .collect()
    }

    /// Every effective key=value, sorted, one per line.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn build_suite(&self) -> Result<TaskSuite> {
        let n_tasks = self.usize("env.n_tasks")?;
        let suite = match self.str("env.suite")? {
            "gridskills" => {
                let sharing = match self.str("env.sharing")? {
                    "prefix-chain" => Sharing::PrefixChain,
                    "identical" => Sharing::Identical,
                    other => {
                        return Err(Error::Config(format!(
                            "config key 'env.sharing': unknown sharing '{other}'"
                        )))
                    }
                };
                TaskSuite::build_gridskills(n_tasks, self.usize("env.grid_size")?, sharing)?
            }
            "pointmass" => {
                let variation = match self.str("env.variation")? {
                    "gravity-scale" => Variation::GravityScale,
                    "mass-scale" => Variation::MassScale,
                    other => {
                        return Err(Error::Config(format!(
                            "config key 'env.variation': unknown variation '{other}'"
                        )))
                    }
                };
                TaskSuite::build_pointmass(n_tasks, variation)?
            }
            other => {
                return Err(Error::Config(format!(
                    "config key 'env.suite': unknown suite '{other}'"
                )))
            }
        };
        let ep_len = self.usize("env.episode_length")?;
        Ok(if ep_len == 0 { suite } else { suite.with_episode_length(ep_len) })
    }

    pub fn build_trainer(&self) -> Result<Trainer> {
        let suite = self.build_suite()?;
        let n = suite.n_tasks();
        let scale = self.f64("sac.target_entropy_scale")?;
        let control_target_entropy = match suite.action_space() {
            ActionSpace::Discrete(a) => scale * (a as f64).ln(),
            ActionSpace::Continuous(d) => -(d as f64),
        };
        let sac_hyper = SacHyper {
            gamma: self.f64("sac.gamma")?,
            lr_actor: self.f64("sac.lr_actor")?,
            lr_critic: self.f64("sac.lr_critic")?,
            lr_alpha: self.f64("sac.lr_alpha")?,
            tau: self.f64("sac.tau")?,
            target_entropy: control_target_entropy,
            mc_samples: self.usize("guide.mc_samples")?,
        };
        let guide_hyper = GuideHyper {
            gamma: self.f64("sac.gamma")?,
            lr_actor: self.f64("guide.lr_actor")?,
            lr_critic: self.f64("guide.lr_critic")?,
            lr_alpha: self.f64("guide.lr_alpha")?,
            tau: self.f64("guide.tau")?,
            target_entropy: 0.5 * (n as f64).ln(),
            k: self.usize("guide.k")?,
        };
        let cfg = TrainConfig {
            mode: Mode::parse(self.str("train.mode")?)?,
            total_steps_per_task: self.usize("train.total_steps_per_task")?,
            eval_every: self.usize("train.eval_every")?,
            eval_episodes: self.usize("train.eval_episodes")?,
            maskout_threshold: self.f64("train.maskout_threshold")?,
            seed: self.u64("train.seed")?,
            epoch_episodes: self.usize("train.epoch_episodes")?,
            batch_per_task: self.usize("sac.batch_per_task")?,
            reward_scale: self.f64("sac.reward_scale")?,
            replay_capacity: self.usize("replay.capacity")?,
            min_fill: self.usize("replay.min_fill_before_training")?,
            enable_filter_gate: self.bool("guide.enable_filter_gate")?
                && !self.bool("ablate.no_filter_gate")?,
            enable_block_gate: self.bool("guide.enable_block_gate")?
                && !self.bool("ablate.no_block_gate")?,
            enable_hindsight: self.bool("guide.enable_hindsight")?
                && !self.bool("ablate.no_hindsight")?,
            bpt_refresh_episodes: self.usize("train.bpt_refresh_episodes")?,
            bpt_eval_episodes: self.usize("train.bpt_eval_episodes")?,
        };
        let mut trainer = Trainer::new(
            suite,
            cfg,
            sac_hyper,
            guide_hyper,
            &self.hidden()?,
            self.bool("sac.shared_trunk")?,
        )?;
        let control_la = self.f64("sac.init_log_alpha")?;
        let guide_la = self.f64("guide.init_log_alpha")?;
        for i in 0..n {
            trainer.control.set_log_alpha(i, control_la);
            trainer.guide.set_log_alpha(i, guide_la);
        }
        Ok(trainer)
    }
}
