//! Deterministic policy search through imagined ensemble rollouts.
//!
//! The optimizer never touches the real environment. Each update samples
//! start states from the batch, lets every ensemble member imagine its own
//! H-step trajectory under the current policy (backpropagation through time
//! flows through the policy at every step; model parameters stay fixed),
//! scores the trajectories with normalized rewards and the support penalty,
//! and descends
//!
//! ```text
//! L(theta) = -lambda * E[R] + (1 - lambda) * E[P]
//! E[R]     = eta * min_k R_k + (1 - eta) * mean_k R_k
//! ```
//!
//! where R_k is member k's mean discounted normalized return over the start
//! states and E[P] is the mean over all K*N trajectories of the undiscounted
//! per-step penalty sum. The min biases the return estimate toward the most
//! pessimistic member; its subgradient goes to the lowest-index argmin.

use crate::autodiff::{Tape, TensorId};
use crate::checkpoint::{self, Reader, Writer, TAG_POLICY};
use crate::dataset::Dataset;
use crate::dynamics::DynamicsEnsemble;
use crate::env::EnvSpec;
use crate::nn::{forward_mlp, Activation, MlpParams, MlpVars};
use crate::opt::{Optimizer, OptimizerKind};
use crate::seeding;
use crate::vae::{SupportVae, TrajectoryRef};
use crate::{Error, Result};
use rand::Rng;
use rayon::prelude::*;
use std::path::Path;

/// Policies emit actions strictly inside (-1, 1); tanh saturates to exactly
/// 1.0 in floating point, so outputs are nudged off the boundary.
pub const ACTION_LIMIT: f64 = 1.0 - 1e-12;

/// Keeps the reward derivative finite at zero goal distance.
const REWARD_SQRT_EPS: f64 = 1e-12;

/// A tanh-bounded MLP from raw states to actions.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicPolicy {
    pub mlp: MlpParams,
}

impl DeterministicPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut seeding::Stream) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        DeterministicPolicy {
            mlp: MlpParams::new(&sizes, Activation::Relu, Activation::Tanh, rng),
        }
    }

    pub fn from_mlp(mlp: MlpParams) -> Result<Self> {
        mlp.check()?;
        if mlp.layers.last().unwrap().activation != Activation::Tanh {
            return Err(Error::Contract(
                "a policy network must end in tanh".into(),
            ));
        }
        Ok(DeterministicPolicy { mlp })
    }

    pub fn state_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Action for one state; deterministic, strictly inside the box.
    pub fn act(&self, s: &[f64]) -> Vec<f64> {
        let mut a = self.mlp.forward_values(s, 1).expect("policy forward");
        for x in &mut a {
            *x = x.clamp(-ACTION_LIMIT, ACTION_LIMIT);
        }
        a
    }

    /// Actions for a row-major batch of states.
    pub fn act_batch(&self, states: &[f64], rows: usize) -> Result<Vec<f64>> {
        let mut a = self.mlp.forward_values(states, rows)?;
        for x in &mut a {
            *x = x.clamp(-ACTION_LIMIT, ACTION_LIMIT);
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(TAG_POLICY);
        w.u32(self.state_dim() as u32);
        w.u32(self.action_dim() as u32);
        w.mlp(&self.mlp);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = checkpoint::load_bytes(path)?;
        let mut r = Reader::new(&bytes, TAG_POLICY, path)?;
        let state_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let mlp = r.mlp()?;
        r.finish()?;
        if mlp.input_dim() != state_dim || mlp.output_dim() != action_dim {
            return Err(Error::format(path, "policy dimensions are inconsistent"));
        }
        Self::from_mlp(mlp)
    }
}

/// Hyperparameters of the policy search.
#[derive(Debug, Clone, PartialEq)]
pub struct MooseConfig {
    /// Weight of the return in the convex combination with the penalty.
    pub lambda: f64,
    /// Weight of the ensemble minimum in the return estimate.
    pub eta: f64,
    pub gamma: f64,
    pub horizon: usize,
    /// Start states sampled per gradient step.
    pub n_start: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub policy_steps: usize,
    pub hidden: Vec<usize>,
    /// Restrict start-state sampling to episode-initial states.
    pub episode_initial_only: bool,
    pub seed: u64,
}

impl Default for MooseConfig {
    fn default() -> Self {
        MooseConfig {
            lambda: 0.01,
            eta: 0.5,
            gamma: 0.97,
            horizon: 50,
            n_start: 100,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-4,
            policy_steps: 1000,
            hidden: vec![64, 64],
            episode_initial_only: false,
            seed: 0,
        }
    }
}

impl MooseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Contract(format!("lambda = {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Contract(format!("eta = {} outside [0, 1]", self.eta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Contract(format!("gamma = {} outside (0, 1]", self.gamma)));
        }
        if self.horizon == 0 || self.n_start == 0 {
            return Err(Error::Contract(
                "horizon and start-state count must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// The lambda = 1 run optimizes the raw return with no support penalty.
    pub fn is_unpenalized(&self) -> bool {
        self.lambda == 1.0
    }
}

/// Convex combination of the worst and the average per-member return.
pub fn weighted_return(returns: &[f64], eta: f64) -> f64 {
    assert!(!returns.is_empty(), "weighted_return of nothing");
    let min = returns.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    eta * min + (1.0 - eta) * mean
}

/// The training loss: `-lambda * E[R] + (1 - lambda) * E[P]`.
pub fn moose_loss(e_r: f64, e_p: f64, lambda: f64) -> f64 {
    -lambda * e_r + (1.0 - lambda) * e_p
}

/// Imagined trajectories of every ensemble member from shared start states.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub horizon: usize,
    pub gamma: f64,
    pub start_states: Vec<Vec<f64>>,
    /// `states[k][n][t]`, t = 0..H: imagined states, including the final one.
    pub states: Vec<Vec<Vec<Vec<f64>>>>,
    /// `actions[k][n][t]`, t = 0..H-1.
    pub actions: Vec<Vec<Vec<Vec<f64>>>>,
    /// Per-member mean discounted return in normalized reward units.
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    /// All K*N trajectories as (state, action) pair sequences for scoring;
    /// the pair at step t is (states[t], actions[t]) for t < H.
    pub fn trajectories(&self) -> Vec<TrajectoryRef<'_>> {
        let mut out = Vec::new();
        for k in 0..self.states.len() {
            for n in 0..self.states[k].len() {
                out.push(TrajectoryRef {
                    states: &self.states[k][n][..self.horizon],
                    actions: &self.actions[k][n],
                });
            }
        }
        out
    }
}

/// Graph handles for one member's imagined rollout.
struct MemberGraph {
    tape: Tape,
    policy_vars: MlpVars,
    return_id: TensorId,
    penalty_id: TensorId,
    return_value: f64,
    penalty_value: f64,
}

/// Build member k's differentiable rollout on a fresh tape: iterate
/// action -> model prediction -> normalized reward for `horizon` steps,
/// then score every visited pair with the support autoencoder.
#[allow(clippy::too_many_arguments)]
fn build_member_graph(
    ensemble: &DynamicsEnsemble,
    vae: &SupportVae,
    policy: &DeterministicPolicy,
    k: usize,
    s0: &[f64],
    n: usize,
    horizon: usize,
    gamma: f64,
    goal: [f64; 2],
) -> Result<MemberGraph> {
    let dim_s = ensemble.state_dim();
    let stats = &ensemble.stats;
    let mut tape = Tape::new();
    let policy_vars = policy.mlp.insert_into(&mut tape);
    let member_vars = ensemble.members[k].insert_into(&mut tape);
    let vae_vars = vae.insert_into(&mut tape);
    let neg_goal = tape.leaf(vec![-goal[0], -goal[1]], vec![2]);
    let (norm_scale, norm_shift) = stats.state_norm_affine();

    let mut s_cur = tape.leaf(s0.to_vec(), vec![n, dim_s]);
    let mut discounted = Vec::with_capacity(horizon);
    let mut pair_parts = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let action = forward_mlp(&mut tape, &policy.mlp, &policy_vars, s_cur)?;
        let s_norm = tape.col_affine(s_cur, &norm_scale, &norm_shift);
        let pair = tape.concat_cols(s_norm, action);
        pair_parts.push(pair);

        let (s_next, _) = ensemble.predict_on_tape(&mut tape, &member_vars, k, s_cur, action)?;
        if tape.values(s_next).iter().any(|x| !x.is_finite()) {
            return Err(Error::RolloutDiverged { step: t, model: k });
        }

        // r = -||p' - goal||, then normalized by the batch reward statistics.
        let p_next = tape.slice_cols(s_next, 0, 2);
        let centered = tape.add_row(p_next, neg_goal);
        let sq = tape.square(centered);
        let d2 = tape.sum_rows(sq);
        let dist = tape.sqrt_eps(d2, REWARD_SQRT_EPS);
        let reward = tape.neg(dist);
        let r_norm = tape.scale(reward, 1.0 / stats.sigma_r);
        let r_norm = tape.add_const(r_norm, -stats.mu_r / stats.sigma_r);
        discounted.push(tape.scale(r_norm, gamma.powi(t as i32)));

        s_cur = s_next;
    }

    let per_start = tape.add_many(&discounted);
    let return_id = tape.mean_all(per_start);

    let pairs_all = tape.concat_rows(&pair_parts);
    let pen_rows = vae.penalty_rows_on_tape(&mut tape, &vae_vars, pairs_all)?;
    let pen_sum = tape.sum_all(pen_rows);
    // Mean over this member's N trajectories of the per-step penalty sum.
    let penalty_id = tape.scale(pen_sum, 1.0 / n as f64);

    let return_value = tape.value_scalar(return_id);
    let penalty_value = tape.value_scalar(penalty_id);
    Ok(MemberGraph {
        tape,
        policy_vars,
        return_id,
        penalty_id,
        return_value,
        penalty_value,
    })
}

/// Imagined rollouts of every member from the given start states, as plain
/// data. `goal` fixes the known reward term, exactly as in training. The
/// arithmetic matches the differentiable graph.
pub fn rollout(
    ensemble: &DynamicsEnsemble,
    policy: &DeterministicPolicy,
    goal: [f64; 2],
    start_states: &[Vec<f64>],
    horizon: usize,
    gamma: f64,
) -> Result<RolloutBatch> {
    if horizon == 0 || start_states.is_empty() {
        return Err(Error::Contract(
            "rollout needs at least one step and one start state".into(),
        ));
    }
    let k_total = ensemble.k();
    let n = start_states.len();
    let dim_s = ensemble.state_dim();
    let dim_a = policy.action_dim();
    let stats = &ensemble.stats;

    let mut states = Vec::with_capacity(k_total);
    let mut actions = Vec::with_capacity(k_total);
    let mut returns = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let mut flat: Vec<f64> = start_states.iter().flatten().copied().collect();
        let mut k_states: Vec<Vec<Vec<f64>>> = vec![vec![]; n];
        let mut k_actions: Vec<Vec<Vec<f64>>> = vec![vec![]; n];
        for (i, s) in start_states.iter().enumerate() {
            k_states[i].push(s.clone());
        }
        let mut disc = vec![0.0; n];
        for t in 0..horizon {
            let acts = policy.mlp.forward_values(&flat, n)?;
            let (next, _) = ensemble.predict_batch(k, &flat, &acts, n)?;
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::RolloutDiverged { step: t, model: k });
            }
            let g = gamma.powi(t as i32);
            for i in 0..n {
                let row = &next[i * dim_s..(i + 1) * dim_s];
                let dx = row[0] - goal[0];
                let dy = row[1] - goal[1];
                let r = -(dx * dx + dy * dy + REWARD_SQRT_EPS).sqrt();
                let r_norm = r * (1.0 / stats.sigma_r) + (-stats.mu_r / stats.sigma_r);
                disc[i] += g * r_norm;
                k_actions[i].push(acts[i * dim_a..(i + 1) * dim_a].to_vec());
                k_states[i].push(row.to_vec());
            }
            flat = next;
        }
        returns.push(disc.iter().sum::<f64>() / n as f64);
        states.push(k_states);
        actions.push(k_actions);
    }
    Ok(RolloutBatch {
        horizon,
        gamma,
        start_states: start_states.to_vec(),
        states,
        actions,
        returns,
    })
}

/// One diagnostics row per policy update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiag {
    pub step: usize,
    pub expected_return: f64,
    pub expected_penalty: f64,
    pub loss: f64,
}

/// Training outcome.
#[derive(Debug, Clone)]
pub struct PolicyTraining {
    pub policy: DeterministicPolicy,
    pub diagnostics: Vec<StepDiag>,
}

/// The loss value and assembled policy gradient for one update, built from
/// K parallel member graphs merged in member order.
fn step_loss_and_grads(
    ensemble: &DynamicsEnsemble,
    vae: &SupportVae,
    policy: &DeterministicPolicy,
    s0: &[f64],
    n: usize,
    config: &MooseConfig,
    goal: [f64; 2],
) -> Result<(StepDiag, Vec<Vec<f64>>)> {
    let k_total = ensemble.k();
    let mut graphs: Vec<MemberGraph> = (0..k_total)
        .into_par_iter()
        .map(|k| {
            build_member_graph(
                ensemble,
                vae,
                policy,
                k,
                s0,
                n,
                config.horizon,
                config.gamma,
                goal,
            )
        })
        .collect::<Result<_>>()?;

    let returns: Vec<f64> = graphs.iter().map(|g| g.return_value).collect();
    let penalties: Vec<f64> = graphs.iter().map(|g| g.penalty_value).collect();
    let e_r = weighted_return(&returns, config.eta);
    let e_p = penalties.iter().sum::<f64>() / k_total as f64;
    let loss = moose_loss(e_r, e_p, config.lambda);
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("policy loss became {loss}")));
    }

    let argmin = returns
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();

    // Per-member scalar weights reproducing d(loss)/d(theta) by linearity.
    let kf = k_total as f64;
    let grads_per_member: Vec<Vec<Vec<f64>>> = graphs
        .par_iter_mut()
        .enumerate()
        .map(|(k, g)| {
            let min_w = if k == argmin { config.eta } else { 0.0 };
            let c_return = -config.lambda * (min_w + (1.0 - config.eta) / kf);
            let c_penalty = (1.0 - config.lambda) / kf;
            let weighted_r = g.tape.scale(g.return_id, c_return);
            let weighted_p = g.tape.scale(g.penalty_id, c_penalty);
            let member_loss = g.tape.add(weighted_r, weighted_p);
            g.tape.backward(member_loss)?;
            Ok(g.policy_vars.grads(&g.tape))
        })
        .collect::<Result<_>>()?;

    let mut total = grads_per_member[0].clone();
    for member in &grads_per_member[1..] {
        for (acc, g) in total.iter_mut().zip(member) {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
    }
    Ok((
        StepDiag {
            step: 0,
            expected_return: e_r,
            expected_penalty: e_p,
            loss,
        },
        total,
    ))
}

/// Run the full policy search: sample start states, roll out every member,
/// descend the penalized loss. Logs one diagnostics row per update.
pub fn train_policy(
    dataset: &Dataset,
    ensemble: &DynamicsEnsemble,
    vae: &SupportVae,
    config: &MooseConfig,
) -> Result<PolicyTraining> {
    train_policy_traced(dataset, ensemble, vae, config, |_, _| {})
}

/// Like [`train_policy`], invoking `on_step(step, policy)` after every
/// update (used to trace true-environment evaluation curves).
pub fn train_policy_traced(
    dataset: &Dataset,
    ensemble: &DynamicsEnsemble,
    vae: &SupportVae,
    config: &MooseConfig,
    mut on_step: impl FnMut(usize, &DeterministicPolicy),
) -> Result<PolicyTraining> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("policy training needs a nonempty dataset".into()));
    }
    if ensemble.stats != vae.stats {
        return Err(Error::Contract(
            "ensemble and autoencoder were trained with different normalization \
             statistics; retrain them on the same dataset"
                .into(),
        ));
    }
    let dim_s = ensemble.state_dim();
    let dim_a = dataset.header.env.action_dim;
    let goal = dataset.header.env.goal;

    let pool: Vec<&Vec<f64>> = dataset
        .transitions
        .iter()
        .filter(|tr| !config.episode_initial_only || tr.t == 0)
        .map(|tr| &tr.s)
        .collect();
    if pool.is_empty() {
        return Err(Error::Contract("no start states available".into()));
    }

    let mut init_rng = seeding::stream(config.seed, "policy-init", 0);
    let mut policy = DeterministicPolicy::new(dim_s, dim_a, &config.hidden, &mut init_rng);
    let mut optimizer = Optimizer::new(config.optimizer, config.lr);
    let mut diagnostics = Vec::with_capacity(config.policy_steps);

    for step in 0..config.policy_steps {
        let mut rng = seeding::stream(config.seed, "start-states", step as u64);
        let mut s0 = Vec::with_capacity(config.n_start * dim_s);
        for _ in 0..config.n_start {
            let idx = rng.random_range(0..pool.len());
            s0.extend_from_slice(pool[idx]);
        }
        let (mut diag, grads) =
            step_loss_and_grads(ensemble, vae, &policy, &s0, config.n_start, config, goal)?;
        diag.step = step;
        optimizer.step(&mut policy.mlp.param_buffers_mut(), &grads)?;
        diagnostics.push(diag);
        on_step(step, &policy);
    }

    Ok(PolicyTraining {
        policy,
        diagnostics,
    })
}

/// De-normalized imagined mean return vs. the true-environment mean return
/// under the same start-state distribution, horizon, and discount.
#[allow(clippy::too_many_arguments)]
pub fn imagined_vs_true_gap(
    policy: &DeterministicPolicy,
    ensemble: &DynamicsEnsemble,
    env: &EnvSpec,
    dataset: &Dataset,
    horizon: usize,
    gamma: f64,
    n_start: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if horizon == 0 {
        return Ok((0.0, 0.0));
    }
    let mut rng = seeding::stream(seed, "gap-starts", 0);
    let pool: Vec<&Vec<f64>> = dataset.transitions.iter().map(|tr| &tr.s).collect();
    if pool.is_empty() {
        return Err(Error::Contract("no start states available".into()));
    }
    let starts: Vec<Vec<f64>> = (0..n_start)
        .map(|_| pool[rng.random_range(0..pool.len())].clone())
        .collect();

    // Imagined: mean over members and starts, de-normalized. A discounted
    // sum of normalized rewards r~ = (r - mu)/sigma maps back through
    // sigma * sum + mu * (1 - gamma^H) / (1 - gamma).
    let batch = rollout(ensemble, policy, env.goal, &starts, horizon, gamma)?;
    let mean_norm = batch.returns.iter().sum::<f64>() / batch.returns.len() as f64;
    let discount_mass = if gamma == 1.0 {
        horizon as f64
    } else {
        (1.0 - gamma.powi(horizon as i32)) / (1.0 - gamma)
    };
    let imagined = ensemble.stats.sigma_r * mean_norm + ensemble.stats.mu_r * discount_mass;

    // True: the same starts stepped through the real environment.
    let mut total = 0.0;
    for (i, start) in starts.iter().enumerate() {
        let mut env_rng = seeding::stream(seed, "gap-true", i as u64);
        let mut s = start.clone();
        let mut acc = 0.0;
        for t in 0..horizon {
            let a = policy.act(&s);
            let (next, r) = env.step(&s, &a, &mut env_rng)?;
            acc += gamma.powi(t as i32) * r;
            s = next;
        }
        total += acc;
    }
    let true_return = total / n_start as f64;
    Ok((imagined, true_return))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::{generate_dataset, BehaviorPolicy, Tier};
    use crate::dynamics::{compute_norm_stats, train_ensemble, ModelConfig, ModelMode, NormStats};
    use crate::gradcheck::{central_diff_grad, max_rel_err};
    use crate::vae::{train_vae, VaeConfig};

    #[test]
    fn weighted_return_identities() {
        let rs = [10.0, 20.0];
        assert_eq!(weighted_return(&rs, 0.5), 12.5);
        assert_eq!(weighted_return(&rs, 1.0), 10.0);
        assert_eq!(weighted_return(&rs, 0.0), 15.0);
        // K = 1 collapses to the single return for any eta.
        for eta in [0.0, 0.3, 1.0] {
            assert_eq!(weighted_return(&[7.5], eta), 7.5);
        }
    }

    #[test]
    fn moose_loss_identities() {
        assert_eq!(moose_loss(3.0, 5.0, 1.0), -3.0);
        assert_eq!(moose_loss(3.0, 5.0, 0.0), 5.0);
        let l = moose_loss(2.0, 3.0, 0.01);
        assert!((l - 2.95).abs() < 1e-15);
        // Identity: loss + lambda E[R] - (1 - lambda) E[P] = 0. Exact for
        // dyadic inputs; within an ulp or two otherwise.
        for (er, ep, lam) in [(1.0, 4.0, 0.25), (-2.0, 8.0, 0.5)] {
            assert_eq!(moose_loss(er, ep, lam) + lam * er - (1.0 - lam) * ep, 0.0);
        }
        for (er, ep, lam) in [(1.3, 0.4, 0.25), (-2.0, 7.0, 0.9)] {
            let resid = moose_loss(er, ep, lam) + lam * er - (1.0 - lam) * ep;
            assert!(resid.abs() < 1e-15, "residual {resid}");
        }
    }

    fn fixture(seed: u64) -> (Dataset, DynamicsEnsemble, SupportVae) {
        let env = EnvSpec::point_mass();
        let p = BehaviorPolicy::for_tier(Tier::Mediocre, &env);
        let ds = generate_dataset(&env, &p, 0.4, 400, seed).unwrap();
        let trained = train_ensemble(
            &ds,
            &ModelConfig {
                epochs: 3,
                k: 2,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let vae = train_vae(
            &ds,
            &trained.ensemble.stats,
            &VaeConfig {
                epochs: 2,
                hidden: 16,
                ..VaeConfig::default()
            },
        )
        .unwrap();
        (ds, trained.ensemble, vae.vae)
    }

    /// A one-member ensemble that maps every state to itself, with chosen
    /// reward statistics, for closed-form return checks.
    fn identity_ensemble(mu_r: f64, sigma_r: f64) -> DynamicsEnsemble {
        let mut rng = seeding::stream(31, "pol-test", 0);
        let mut mlp = crate::nn::MlpParams::new(
            &[6, 8, 4],
            Activation::Relu,
            Activation::Linear,
            &mut rng,
        );
        for l in &mut mlp.layers {
            l.g.iter_mut().for_each(|g| *g = 0.0);
            l.b.iter_mut().for_each(|b| *b = 0.0);
        }
        DynamicsEnsemble {
            mode: ModelMode::Delta,
            reward_head: false,
            stats: NormStats {
                mu_s: vec![0.0; 4],
                sigma_s: vec![1.0; 4],
                mu_ds: vec![0.0; 4],
                sigma_ds: vec![1.0; 4],
                mu_r,
                sigma_r,
                min_s: vec![-10.0; 4],
                max_s: vec![10.0; 4],
            },
            members: vec![mlp],
        }
    }

    #[test]
    fn fixed_point_rollout_matches_the_geometric_series() {
        let ens = identity_ensemble(0.0, 1.0);
        let mut rng = seeding::stream(32, "pol-test", 1);
        let policy = DeterministicPolicy::new(4, 2, &[8], &mut rng);
        let start = vec![vec![0.3, 0.1, 0.0, 0.0]];
        // The state never moves, so r is constant; r(s0) = -||p - goal||.
        let r = -((0.3f64 - 0.8).powi(2) + (0.1f64 - 0.8).powi(2) + 1e-12).sqrt();
        let (h, gamma) = (12usize, 0.9f64);
        let batch = rollout(&ens, &policy, [0.8, 0.8], &start, h, gamma).unwrap();
        let expect = r * (1.0 - gamma.powi(h as i32)) / (1.0 - gamma);
        assert!(
            (batch.returns[0] - expect).abs() < 1e-9,
            "{} vs {expect}",
            batch.returns[0]
        );
    }

    #[test]
    fn single_step_rollout_is_the_first_normalized_reward() {
        let ens = identity_ensemble(-0.5, 2.0);
        let mut rng = seeding::stream(33, "pol-test", 2);
        let policy = DeterministicPolicy::new(4, 2, &[8], &mut rng);
        let start = vec![vec![0.2, -0.3, 0.0, 0.0]];
        let batch = rollout(&ens, &policy, [0.8, 0.8], &start, 1, 0.97).unwrap();
        let r = -((0.2f64 - 0.8).powi(2) + (-0.3f64 - 0.8).powi(2) + 1e-12).sqrt();
        let expect = (r - -0.5) / 2.0;
        assert!((batch.returns[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn taped_and_plain_rollouts_agree() {
        let (ds, ens, vae) = fixture(41);
        let mut rng = seeding::stream(34, "pol-test", 3);
        let policy = DeterministicPolicy::new(4, 2, &[16, 16], &mut rng);
        let starts: Vec<Vec<f64>> = ds.transitions.iter().take(5).map(|t| t.s.clone()).collect();
        let plain = rollout(&ens, &policy, ds.header.env.goal, &starts, 7, 0.97).unwrap();

        let s0: Vec<f64> = starts.iter().flatten().copied().collect();
        for k in 0..ens.k() {
            let g = build_member_graph(
                &ens,
                &vae,
                &policy,
                k,
                &s0,
                starts.len(),
                7,
                0.97,
                ds.header.env.goal,
            )
            .unwrap();
            assert_eq!(g.return_value, plain.returns[k], "member {k}");
        }

        // The penalty graph scores exactly the trajectories the batch holds.
        let trajs = plain.trajectories();
        let acc = vae.accumulate_penalty(&trajs).unwrap();
        let per_member: Vec<f64> = (0..ens.k())
            .map(|k| {
                build_member_graph(&ens, &vae, &policy, k, &s0, starts.len(), 7, 0.97, ds.header.env.goal)
                    .unwrap()
                    .penalty_value
            })
            .collect();
        let from_graphs = per_member.iter().sum::<f64>() / ens.k() as f64;
        assert!(
            (acc - from_graphs).abs() < 1e-9,
            "accumulate {acc} vs graphs {from_graphs}"
        );
    }

    #[test]
    fn assembled_policy_gradient_matches_finite_differences() {
        let (ds, ens, vae) = fixture(42);
        let mut rng = seeding::stream(35, "pol-test", 4);
        let policy = DeterministicPolicy::new(4, 2, &[8], &mut rng);
        let config = MooseConfig {
            horizon: 3,
            n_start: 4,
            lambda: 0.3,
            eta: 0.5,
            ..MooseConfig::default()
        };
        let goal = ds.header.env.goal;
        let starts: Vec<Vec<f64>> = ds.transitions.iter().take(4).map(|t| t.s.clone()).collect();
        let s0: Vec<f64> = starts.iter().flatten().copied().collect();

        let (_, grads) =
            step_loss_and_grads(&ens, &vae, &policy, &s0, 4, &config, goal).unwrap();

        // Independent loss evaluation through the plain rollout path.
        let loss_of = |mlp: &MlpParams| {
            let probe = DeterministicPolicy { mlp: mlp.clone() };
            let batch = rollout(&ens, &probe, goal, &starts, 3, config.gamma).unwrap();
            let e_r = weighted_return(&batch.returns, config.eta);
            let e_p = vae.accumulate_penalty(&batch.trajectories()).unwrap();
            moose_loss(e_r, e_p, config.lambda)
        };

        let mut flat_idx = 0;
        for (li, layer) in policy.mlp.layers.iter().enumerate() {
            for (pick, base) in [(0, &layer.v), (1, &layer.g), (2, &layer.b)] {
                let num = central_diff_grad(base, 1e-5, |p| {
                    let mut probe = policy.mlp.clone();
                    match pick {
                        0 => probe.layers[li].v = p.to_vec(),
                        1 => probe.layers[li].g = p.to_vec(),
                        _ => probe.layers[li].b = p.to_vec(),
                    }
                    loss_of(&probe)
                });
                let err = max_rel_err(&grads[flat_idx], &num);
                assert!(err < 1e-4, "layer {li} buffer {pick}: rel err {err}");
                flat_idx += 1;
            }
        }
    }

    #[test]
    fn mismatched_statistics_are_refused() {
        let (ds, ens, vae) = fixture(43);
        let (other_ds, ..) = fixture(44);
        let other_stats = compute_norm_stats(&other_ds).unwrap();
        let mut wrong_vae = vae.clone();
        wrong_vae.stats = other_stats;
        let config = MooseConfig {
            policy_steps: 1,
            horizon: 2,
            n_start: 2,
            ..MooseConfig::default()
        };
        let err = train_policy(&ds, &ens, &wrong_vae, &config).unwrap_err();
        assert!(err.to_string().contains("normalization"), "{err}");
        // Matching statistics pass.
        train_policy(&ds, &ens, &vae, &config).unwrap();
    }

    #[test]
    fn zero_steps_returns_the_initialized_policy_unchanged() {
        let (ds, ens, vae) = fixture(45);
        let config = MooseConfig {
            policy_steps: 0,
            ..MooseConfig::default()
        };
        let out = train_policy(&ds, &ens, &vae, &config).unwrap();
        assert!(out.diagnostics.is_empty());
        let mut rng = seeding::stream(config.seed, "policy-init", 0);
        let fresh = DeterministicPolicy::new(4, 2, &config.hidden, &mut rng);
        assert_eq!(out.policy, fresh);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, ens, vae) = fixture(46);
        let config = MooseConfig {
            policy_steps: 3,
            horizon: 4,
            n_start: 6,
            seed: 9,
            ..MooseConfig::default()
        };
        let a = train_policy(&ds, &ens, &vae, &config).unwrap();
        let b = train_policy(&ds, &ens, &vae, &config).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.diagnostics, b.diagnostics);
    }

    #[test]
    fn penalty_only_descent_reduces_the_penalty() {
        let (ds, ens, vae) = fixture(47);
        let config = MooseConfig {
            lambda: 0.0,
            policy_steps: 30,
            horizon: 5,
            n_start: 16,
            lr: 1e-2,
            seed: 5,
            ..MooseConfig::default()
        };
        let out = train_policy(&ds, &ens, &vae, &config).unwrap();
        let first = out.diagnostics.first().unwrap().expected_penalty;
        let last = out.diagnostics.last().unwrap().expected_penalty;
        assert!(
            last <= first,
            "penalty should not increase under pure penalty descent: {first} -> {last}"
        );
    }

    #[test]
    fn degenerate_horizon_gap_is_zero() {
        let (ds, ens, _) = fixture(48);
        let mut rng = seeding::stream(36, "pol-test", 5);
        let policy = DeterministicPolicy::new(4, 2, &[8], &mut rng);
        let (im, tr) = imagined_vs_true_gap(
            &policy,
            &ens,
            &ds.header.env,
            &ds,
            0,
            0.97,
            4,
            1,
        )
        .unwrap();
        assert_eq!((im, tr), (0.0, 0.0));
    }

    #[test]
    fn policy_checkpoint_round_trips_and_validates() {
        let mut rng = seeding::stream(37, "pol-test", 6);
        let policy = DeterministicPolicy::new(4, 2, &[8, 8], &mut rng);
        let dir = std::env::temp_dir().join("moose-policy-ckpt-test");
        let path = dir.join("policy.ckpt");
        policy.save(&path).unwrap();
        let back = DeterministicPolicy::load(&path).unwrap();
        assert_eq!(policy, back);
        std::fs::remove_dir_all(&dir).ok();

        // A non-tanh head is not a valid policy.
        let mlp = crate::nn::MlpParams::new(&[4, 4, 2], Activation::Relu, Activation::Linear, &mut rng);
        assert!(DeterministicPolicy::from_mlp(mlp).is_err());
    }

    #[test]
    fn actions_stay_strictly_inside_the_box() {
        let mut rng = seeding::stream(38, "pol-test", 7);
        let mut policy = DeterministicPolicy::new(4, 2, &[8], &mut rng);
        // Saturate the output layer hard.
        let last = policy.mlp.layers.len() - 1;
        policy.mlp.layers[last].b = vec![50.0, -50.0];
        let a = policy.act(&[0.1, 0.2, 0.3, 0.4]);
        assert!(a[0] < 1.0 && a[0] > 0.99);
        assert!(a[1] > -1.0 && a[1] < -0.99);
    }
}
