//! Behavior policies, epsilon-greedy batch generation, and behavior cloning.
//!
//! Three proportional controllers differing only in their target point stand
//! in for data-generating policies of three quality tiers: the optimized one
//! steers to the environment goal, the mediocre one to a point offset from
//! the goal, the bad one to a far corner. Mixing in uniform random actions
//! with probability epsilon controls how much of the state-action space the
//! batch explores.

use crate::dataset::{Dataset, DatasetHeader, Transition};
use crate::env::EnvSpec;
use crate::nn::{Activation, MlpParams};
use crate::opt::Optimizer;
use crate::policy::DeterministicPolicy;
use crate::seeding::{self, Stream};
use crate::{Error, Result};
use rand::Rng;
use rayon::prelude::*;

/// Quality tier of a data-generating policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tier {
    Bad,
    Mediocre,
    Optimized,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Bad, Tier::Mediocre, Tier::Optimized];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Bad => "bad",
            Tier::Mediocre => "mediocre",
            Tier::Optimized => "optimized",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bad" => Ok(Tier::Bad),
            "mediocre" => Ok(Tier::Mediocre),
            "optimized" => Ok(Tier::Optimized),
            other => Err(Error::Contract(format!(
                "unknown tier '{other}' (expected bad, mediocre or optimized)"
            ))),
        }
    }
}

/// Deterministic proportional controller: `a = clamp(gain (target - p) - 0.5 v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPolicy {
    pub tier: Tier,
    pub target: [f64; 2],
    pub gain: f64,
}

/// Behavior actions saturate just inside the action box.
const ACTION_CLIP: f64 = 0.999;

impl BehaviorPolicy {
    /// The tier's controller for a given environment. Targets: optimized is
    /// the goal itself, mediocre is offset by (-0.4, -0.4), bad heads for the
    /// far corner (-0.9, -0.9).
    pub fn for_tier(tier: Tier, env: &EnvSpec) -> Self {
        let target = match tier {
            Tier::Optimized => env.goal,
            Tier::Mediocre => [env.goal[0] - 0.4, env.goal[1] - 0.4],
            Tier::Bad => [-0.9, -0.9],
        };
        BehaviorPolicy {
            tier,
            target,
            gain: 1.0,
        }
    }

    pub fn action(&self, s: &[f64]) -> Vec<f64> {
        (0..2)
            .map(|d| {
                (self.gain * (self.target[d] - s[d]) - 0.5 * s[2 + d])
                    .clamp(-ACTION_CLIP, ACTION_CLIP)
            })
            .collect()
    }
}

/// Uniform draw from the open interval (-1, 1); rejects the boundary value
/// that a half-open range can produce.
fn uniform_open(rng: &mut Stream) -> f64 {
    loop {
        let x = rng.random_range(-1.0..1.0);
        if x > -1.0 {
            return x;
        }
    }
}

/// With probability `epsilon` a uniform action from the open box, otherwise
/// the controller's action. Always consumes exactly one decision draw.
pub fn epsilon_greedy(
    policy: &BehaviorPolicy,
    s: &[f64],
    epsilon: f64,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Contract(format!(
            "epsilon = {epsilon} outside [0, 1]"
        )));
    }
    let u: f64 = rng.random();
    if u < epsilon {
        Ok((0..2).map(|_| uniform_open(rng)).collect())
    } else {
        Ok(policy.action(s))
    }
}

/// Generate `n_steps` of experience as whole episodes from randomized starts.
/// Episodes run on independent counter-derived streams, so the result is
/// order-independent and reproducible from `seed` alone.
pub fn generate_dataset(
    env: &EnvSpec,
    policy: &BehaviorPolicy,
    epsilon: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Contract(format!(
            "epsilon = {epsilon} outside [0, 1]"
        )));
    }
    if n_steps == 0 || n_steps % env.episode_len != 0 {
        return Err(Error::Contract(format!(
            "n_steps = {n_steps} is not a positive multiple of episode length {}",
            env.episode_len
        )));
    }
    let n_episodes = n_steps / env.episode_len;
    let episodes: Vec<Result<Vec<Transition>>> = (0..n_episodes)
        .into_par_iter()
        .map(|ep| {
            let mut rng = seeding::stream(seed, "episode", ep as u64);
            let mut s = env.reset(&mut rng);
            let mut out = Vec::with_capacity(env.episode_len);
            for t in 0..env.episode_len {
                let a = epsilon_greedy(policy, &s, epsilon, &mut rng)?;
                let (s_next, r) = env.step(&s, &a, &mut rng)?;
                out.push(Transition {
                    episode: ep,
                    t,
                    s: s.clone(),
                    a,
                    r,
                    s_next: s_next.clone(),
                });
                s = s_next;
            }
            Ok(out)
        })
        .collect();

    let mut transitions = Vec::with_capacity(n_steps);
    for ep in episodes {
        transitions.extend(ep?);
    }
    Ok(Dataset {
        header: DatasetHeader {
            env: env.clone(),
            tier: policy.tier,
            epsilon,
            n_steps,
            seed,
        },
        transitions,
    })
}

/// Behavior-cloning configuration; one supervised regression from states to
/// the actions the batch recorded.
#[derive(Debug, Clone)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            epochs: 50,
            batch_size: 500,
            lr: 1e-3,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

/// Result of behavior cloning: the policy plus its held-out action error.
#[derive(Debug, Clone)]
pub struct BcTraining {
    pub policy: DeterministicPolicy,
    /// Mean squared action error on the held-out episode tail.
    pub held_out_action_mse: f64,
    /// Full-train-split loss after each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Fit a tanh-bounded MLP to the batch's actions by mean squared error.
pub fn clone_behavior(dataset: &Dataset, config: &BcConfig) -> Result<BcTraining> {
    clone_behavior_traced(dataset, config, |_, _| {})
}

/// Like [`clone_behavior`], invoking `on_epoch(epoch, policy)` with the
/// current policy after every epoch (used to trace evaluation curves).
pub fn clone_behavior_traced(
    dataset: &Dataset,
    config: &BcConfig,
    mut on_epoch: impl FnMut(usize, &DeterministicPolicy),
) -> Result<BcTraining> {
    if dataset.is_empty() {
        return Err(Error::Contract("behavior cloning needs a nonempty dataset".into()));
    }
    let dim_s = dataset.header.env.state_dim;
    let dim_a = dataset.header.env.action_dim;
    let (train_idx, held_idx) = dataset.split_tail_episodes(0.10);
    // Tiny datasets may not survive a split; fall back to training on all.
    let train_idx = if train_idx.is_empty() {
        (0..dataset.len()).collect()
    } else {
        train_idx
    };

    let mut sizes = vec![dim_s];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(dim_a);
    let mut rng = seeding::stream(config.seed, "bc-init", 0);
    let mut mlp = MlpParams::new(&sizes, Activation::Relu, Activation::Tanh, &mut rng);
    let mut optimizer = Optimizer::adam(config.lr);
    let mut shuffle_rng = seeding::stream(config.seed, "bc-shuffle", 0);

    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = train_idx.clone();
        shuffle_indices(&mut order, &mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let rows = chunk.len();
            let mut input = Vec::with_capacity(rows * dim_s);
            let mut target = Vec::with_capacity(rows * dim_a);
            for &i in chunk {
                input.extend_from_slice(&dataset.transitions[i].s);
                target.extend_from_slice(&dataset.transitions[i].a);
            }
            let mut tape = crate::autodiff::Tape::new();
            let vars = mlp.insert_into(&mut tape);
            let x = tape.leaf(input, vec![rows, dim_s]);
            let y = crate::nn::forward_mlp(&mut tape, &mlp, &vars, x)?;
            let tgt = tape.leaf(target, vec![rows, dim_a]);
            let diff = tape.sub(y, tgt);
            let sq = tape.square(diff);
            let loss = tape.mean_all(sq);
            let loss_val = tape.value_scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "behavior cloning loss became {loss_val} in epoch {epoch}"
                )));
            }
            tape.backward(loss)?;
            let grads = vars.grads(&tape);
            optimizer.step(&mut mlp.param_buffers_mut(), &grads)?;
        }
        epoch_loss.push(action_mse(&mlp, dataset, &train_idx)?);
        let snapshot = DeterministicPolicy::from_mlp(mlp.clone())?;
        on_epoch(epoch, &snapshot);
    }

    let held_out_action_mse = if held_idx.is_empty() {
        f64::NAN
    } else {
        action_mse(&mlp, dataset, &held_idx)?
    };
    Ok(BcTraining {
        policy: DeterministicPolicy::from_mlp(mlp)?,
        held_out_action_mse,
        epoch_loss,
    })
}

fn action_mse(mlp: &MlpParams, dataset: &Dataset, idx: &[usize]) -> Result<f64> {
    let dim_s = dataset.header.env.state_dim;
    let dim_a = dataset.header.env.action_dim;
    let rows = idx.len();
    let mut input = Vec::with_capacity(rows * dim_s);
    for &i in idx {
        input.extend_from_slice(&dataset.transitions[i].s);
    }
    let pred = mlp.forward_values(&input, rows)?;
    let mut acc = 0.0;
    for (row, &i) in idx.iter().enumerate() {
        for d in 0..dim_a {
            let e = pred[row * dim_a + d] - dataset.transitions[i].a[d];
            acc += e * e;
        }
    }
    Ok(acc / (rows * dim_a) as f64)
}

/// Deterministic Fisher-Yates shuffle on the given stream.
pub(crate) fn shuffle_indices(xs: &mut [usize], rng: &mut Stream) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}
