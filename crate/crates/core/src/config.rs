//! Flat key-value run configuration.
//!
//! A config file is plain text: one `key = value` per line, `#` comments,
//! no sections. Every key has a documented default; unknown keys are
//! rejected so typos fail loudly. Command-line flags override file values.
//! Serialization writes keys in a fixed order, and parse(serialize(c)) == c.
//!
//! All randomness in a run derives from the single `seed` via documented
//! per-component derivation (see the seeding module), so a config file and
//! a seed replay the whole pipeline.

use crate::behavior::{BcConfig, Tier};
use crate::dynamics::{ModelConfig, ModelMode};
use crate::env::{EnvKind, EnvSpec};
use crate::grid::Algorithm;
use crate::opt::OptimizerKind;
use crate::policy::MooseConfig;
use crate::vae::VaeConfig;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // environment / data generation
    pub env: EnvKind,
    pub episode_len: usize,
    pub tier: Tier,
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,

    // dynamics ensemble
    pub model_mode: ModelMode,
    pub model_k: usize,
    pub model_epochs: usize,
    pub model_batch: usize,
    pub model_lr: f64,
    pub model_hidden: Vec<usize>,
    pub reward_head: bool,

    // support autoencoder
    pub vae_epochs: usize,
    pub vae_batch: usize,
    pub vae_lr: f64,
    pub vae_hidden: usize,

    // policy search
    pub lambda: f64,
    pub eta: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub n_start: usize,
    pub policy_steps: usize,
    pub policy_lr: f64,
    pub policy_optimizer: OptimizerKind,
    pub policy_hidden: Vec<usize>,
    pub episode_initial_only: bool,

    // behavior cloning baseline
    pub bc_epochs: usize,
    pub bc_batch: usize,
    pub bc_lr: f64,

    // true-environment evaluation
    pub eval_n_traj: usize,
    pub eval_traj_len: usize,
    /// Evaluate every this-many policy iterations (1 = every iteration).
    pub eval_interval: usize,

    // experiment grid
    pub grid_tiers: Vec<Tier>,
    pub grid_epsilons: Vec<f64>,
    pub grid_algorithms: Vec<Algorithm>,
    pub grid_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvKind::PointMass,
            episode_len: 100,
            tier: Tier::Mediocre,
            epsilon: 0.0,
            steps: 20_000,
            seed: 0,

            model_mode: ModelMode::Delta,
            model_k: 4,
            model_epochs: 50,
            model_batch: 500,
            model_lr: 1e-4,
            model_hidden: vec![64, 64],
            reward_head: false,

            vae_epochs: 50,
            vae_batch: 500,
            vae_lr: 1e-4,
            vae_hidden: 64,

            lambda: 0.01,
            eta: 0.5,
            gamma: 0.97,
            horizon: 50,
            n_start: 100,
            policy_steps: 1000,
            policy_lr: 1e-4,
            policy_optimizer: OptimizerKind::Sgd,
            policy_hidden: vec![64, 64],
            episode_initial_only: false,

            bc_epochs: 50,
            bc_batch: 500,
            bc_lr: 1e-3,

            eval_n_traj: 10,
            eval_traj_len: 100,
            eval_interval: 1,

            grid_tiers: vec![Tier::Bad, Tier::Mediocre],
            grid_epsilons: vec![0.2, 0.4],
            grid_algorithms: vec![
                Algorithm::Moose,
                Algorithm::Unpenalized,
                Algorithm::BehaviorClone,
            ],
            grid_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl RunConfig {
    pub fn env_spec(&self) -> EnvSpec {
        let mut spec = EnvSpec::of_kind(self.env);
        spec.episode_len = self.episode_len;
        spec
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            mode: self.model_mode,
            k: self.model_k,
            epochs: self.model_epochs,
            batch_size: self.model_batch,
            lr: self.model_lr,
            hidden: self.model_hidden.clone(),
            reward_head: self.reward_head,
            seed,
        }
    }

    pub fn vae_config(&self, seed: u64) -> VaeConfig {
        VaeConfig {
            epochs: self.vae_epochs,
            batch_size: self.vae_batch,
            lr: self.vae_lr,
            hidden: self.vae_hidden,
            seed,
        }
    }

    pub fn moose_config(&self, seed: u64) -> MooseConfig {
        MooseConfig {
            lambda: self.lambda,
            eta: self.eta,
            gamma: self.gamma,
            horizon: self.horizon,
            n_start: self.n_start,
            optimizer: self.policy_optimizer,
            lr: self.policy_lr,
            policy_steps: self.policy_steps,
            hidden: self.policy_hidden.clone(),
            episode_initial_only: self.episode_initial_only,
            seed,
        }
    }

    pub fn bc_config(&self, seed: u64) -> BcConfig {
        BcConfig {
            epochs: self.bc_epochs,
            batch_size: self.bc_batch,
            lr: self.bc_lr,
            hidden: self.policy_hidden.clone(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Contract(format!(
                "epsilon = {} outside [0, 1]",
                self.epsilon
            )));
        }
        for e in &self.grid_epsilons {
            if !(0.0..=1.0).contains(e) {
                return Err(Error::Contract(format!("grid epsilon = {e} outside [0, 1]")));
            }
        }
        if self.model_k == 0 {
            return Err(Error::Contract("model_k must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Contract("eval_interval must be at least 1".into()));
        }
        self.moose_config(self.seed).validate()
    }

    // ── text form ────────────────────────────────────────────────────

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = self.entries();
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let usizes = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("env", self.env.name().to_string()),
            ("episode_len", self.episode_len.to_string()),
            ("tier", self.tier.name().to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("model_mode", self.model_mode.name().to_string()),
            ("model_k", self.model_k.to_string()),
            ("model_epochs", self.model_epochs.to_string()),
            ("model_batch", self.model_batch.to_string()),
            ("model_lr", self.model_lr.to_string()),
            ("model_hidden", usizes(&self.model_hidden)),
            ("reward_head", self.reward_head.to_string()),
            ("vae_epochs", self.vae_epochs.to_string()),
            ("vae_batch", self.vae_batch.to_string()),
            ("vae_lr", self.vae_lr.to_string()),
            ("vae_hidden", self.vae_hidden.to_string()),
            ("lambda", self.lambda.to_string()),
            ("eta", self.eta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("horizon", self.horizon.to_string()),
            ("n_start", self.n_start.to_string()),
            ("policy_steps", self.policy_steps.to_string()),
            ("policy_lr", self.policy_lr.to_string()),
            (
                "policy_optimizer",
                match self.policy_optimizer {
                    OptimizerKind::Sgd => "sgd".to_string(),
                    OptimizerKind::Adam => "adam".to_string(),
                },
            ),
            ("policy_hidden", usizes(&self.policy_hidden)),
            (
                "episode_initial_only",
                self.episode_initial_only.to_string(),
            ),
            ("bc_epochs", self.bc_epochs.to_string()),
            ("bc_batch", self.bc_batch.to_string()),
            ("bc_lr", self.bc_lr.to_string()),
            ("eval_n_traj", self.eval_n_traj.to_string()),
            ("eval_traj_len", self.eval_traj_len.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            (
                "grid_tiers",
                self.grid_tiers
                    .iter()
                    .map(|t| t.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "grid_epsilons",
                self.grid_epsilons
                    .iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "grid_algorithms",
                self.grid_algorithms
                    .iter()
                    .map(|a| a.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "grid_seeds",
                self.grid_seeds
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ]
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(path, format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Set one key from its text form. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Contract(format!("bad value '{v}' for key '{key}'")))
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Contract(format!("bad value '{p}' in key '{key}'")))
                })
                .collect()
        }
        match key {
            "env" => self.env = EnvKind::parse(value)?,
            "episode_len" => self.episode_len = num(key, value)?,
            "tier" => self.tier = Tier::parse(value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "model_mode" => self.model_mode = ModelMode::parse(value)?,
            "model_k" => self.model_k = num(key, value)?,
            "model_epochs" => self.model_epochs = num(key, value)?,
            "model_batch" => self.model_batch = num(key, value)?,
            "model_lr" => self.model_lr = num(key, value)?,
            "model_hidden" => self.model_hidden = list(key, value)?,
            "reward_head" => self.reward_head = num(key, value)?,
            "vae_epochs" => self.vae_epochs = num(key, value)?,
            "vae_batch" => self.vae_batch = num(key, value)?,
            "vae_lr" => self.vae_lr = num(key, value)?,
            "vae_hidden" => self.vae_hidden = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "n_start" => self.n_start = num(key, value)?,
            "policy_steps" => self.policy_steps = num(key, value)?,
            "policy_lr" => self.policy_lr = num(key, value)?,
            "policy_optimizer" => {
                self.policy_optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    other => {
                        return Err(Error::Contract(format!(
                            "unknown optimizer '{other}' (expected sgd or adam)"
                        )))
                    }
                }
            }
            "policy_hidden" => self.policy_hidden = list(key, value)?,
            "episode_initial_only" => self.episode_initial_only = num(key, value)?,
            "bc_epochs" => self.bc_epochs = num(key, value)?,
            "bc_batch" => self.bc_batch = num(key, value)?,
            "bc_lr" => self.bc_lr = num(key, value)?,
            "eval_n_traj" => self.eval_n_traj = num(key, value)?,
            "eval_traj_len" => self.eval_traj_len = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "grid_tiers" => {
                self.grid_tiers = value
                    .split(',')
                    .filter(|p| !p.is_empty())
                    .map(|p| Tier::parse(p.trim()))
                    .collect::<Result<_>>()?
            }
            "grid_epsilons" => self.grid_epsilons = list(key, value)?,
            "grid_algorithms" => {
                self.grid_algorithms = value
                    .split(',')
                    .filter(|p| !p.is_empty())
                    .map(|p| Algorithm::parse(p.trim()))
                    .collect::<Result<_>>()?
            }
            "grid_seeds" => self.grid_seeds = list(key, value)?,
            other => {
                return Err(Error::Contract(format!("unknown configuration key '{other}'")));
            }
        }
        Ok(())
    }
}
