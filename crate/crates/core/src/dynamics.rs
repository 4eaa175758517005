//! Transition-model ensembles on normalized data.
//!
//! Each of the K members is an independent weight-normalized MLP mapping
//! `(normalized state, action)` to either the normalized state delta
//! ("delta" mode) or the normalized next state ("direct" mode), optionally
//! with one extra output predicting the normalized reward. Members share one
//! set of normalization statistics; diversity comes solely from independent
//! initialization and independent minibatch shuffling. Predictions are
//! clamped per dimension to the range observed in the batch, with zero
//! gradient outside.

use crate::autodiff::{Tape, TensorId};
use crate::checkpoint::{self, Reader, Writer, TAG_ENSEMBLE};
use crate::dataset::Dataset;
use crate::nn::{forward_mlp, Activation, MlpParams, MlpVars};
use crate::opt::Optimizer;
use crate::seeding;
use crate::{Error, Result};
use rayon::prelude::*;
use std::path::Path;

/// Floor applied to every standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Normalization statistics shared by every model trained on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mu_s: Vec<f64>,
    pub sigma_s: Vec<f64>,
    pub mu_ds: Vec<f64>,
    pub sigma_ds: Vec<f64>,
    pub mu_r: f64,
    pub sigma_r: f64,
    /// Observed per-dimension state range (over both s and s').
    pub min_s: Vec<f64>,
    pub max_s: Vec<f64>,
}

impl NormStats {
    pub fn state_dim(&self) -> usize {
        self.mu_s.len()
    }

    /// Computed as `x * (1/sigma) + (-mu/sigma)` so that it is bit-identical
    /// to the taped column-affine normalization.
    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.mu_s.iter().zip(&self.sigma_s))
            .map(|(&x, (&m, &sd))| x * (1.0 / sd) + (-m / sd))
            .collect()
    }

    pub fn denormalize_state(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mu_s.iter().zip(&self.sigma_s))
            .map(|(&x, (&m, &sd))| x * sd + m)
            .collect()
    }

    pub fn normalize_reward(&self, r: f64) -> f64 {
        (r - self.mu_r) / self.sigma_r
    }

    pub fn denormalize_reward(&self, z: f64) -> f64 {
        z * self.sigma_r + self.mu_r
    }

    /// Column scales/shifts implementing `normalize_state` as one affine op.
    pub(crate) fn state_norm_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self.sigma_s.iter().map(|&s| 1.0 / s).collect();
        let shift: Vec<f64> = self
            .mu_s
            .iter()
            .zip(&self.sigma_s)
            .map(|(&m, &s)| -m / s)
            .collect();
        (scale, shift)
    }
}

/// Population means/stds per dimension, sigmas floored at 1e-6, ranges from
/// the batch extremes.
pub fn compute_norm_stats(dataset: &Dataset) -> Result<NormStats> {
    if dataset.len() < 2 {
        return Err(Error::Contract(format!(
            "normalization needs at least 2 transitions, got {}",
            dataset.len()
        )));
    }
    let dim = dataset.header.env.state_dim;
    let n = dataset.len() as f64;

    let mut mu_s = vec![0.0; dim];
    let mut mu_ds = vec![0.0; dim];
    let mut mu_r = 0.0;
    for tr in &dataset.transitions {
        for d in 0..dim {
            mu_s[d] += tr.s[d];
            mu_ds[d] += tr.s_next[d] - tr.s[d];
        }
        mu_r += tr.r;
    }
    for d in 0..dim {
        mu_s[d] /= n;
        mu_ds[d] /= n;
    }
    mu_r /= n;

    let mut var_s = vec![0.0; dim];
    let mut var_ds = vec![0.0; dim];
    let mut var_r = 0.0;
    for tr in &dataset.transitions {
        for d in 0..dim {
            let es = tr.s[d] - mu_s[d];
            var_s[d] += es * es;
            let ed = (tr.s_next[d] - tr.s[d]) - mu_ds[d];
            var_ds[d] += ed * ed;
        }
        let er = tr.r - mu_r;
        var_r += er * er;
    }
    let sigma = |v: f64| (v / n).sqrt().max(SIGMA_FLOOR);
    let sigma_s: Vec<f64> = var_s.iter().map(|&v| sigma(v)).collect();
    let sigma_ds: Vec<f64> = var_ds.iter().map(|&v| sigma(v)).collect();
    let sigma_r = sigma(var_r);

    let (min_s, max_s) = dataset.state_ranges();
    Ok(NormStats {
        mu_s,
        sigma_s,
        mu_ds,
        sigma_ds,
        mu_r,
        sigma_r,
        min_s,
        max_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMode {
    /// Predict the normalized state delta and add it back onto the input.
    Delta,
    /// Predict the normalized next state directly.
    Direct,
}

impl ModelMode {
    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Delta => "delta",
            ModelMode::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(ModelMode::Delta),
            "direct" => Ok(ModelMode::Direct),
            other => Err(Error::Contract(format!(
                "unknown model mode '{other}' (expected delta or direct)"
            ))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            ModelMode::Delta => 0,
            ModelMode::Direct => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelMode::Delta),
            1 => Some(ModelMode::Direct),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    /// Learn a reward output alongside the transition. Off by default: the
    /// environment reward is known and differentiable.
    pub reward_head: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: ModelMode::Delta,
            k: 4,
            epochs: 50,
            batch_size: 500,
            lr: 1e-4,
            hidden: vec![64, 64],
            reward_head: false,
            seed: 0,
        }
    }
}

/// K trained members sharing one set of normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsEnsemble {
    pub mode: ModelMode,
    pub reward_head: bool,
    pub stats: NormStats,
    pub members: Vec<MlpParams>,
}

/// Training outcome: the ensemble plus per-member diagnostics.
#[derive(Debug, Clone)]
pub struct EnsembleTraining {
    pub ensemble: DynamicsEnsemble,
    /// Full-train-split loss after each epoch, per member.
    pub epoch_train_loss: Vec<Vec<f64>>,
    /// Final normalized state MSE on the held-out episode tail, per member.
    pub held_out_mse: Vec<f64>,
}

struct Batchs<'a> {
    dataset: &'a Dataset,
    stats: &'a NormStats,
    mode: ModelMode,
    reward_head: bool,
}

impl Batchs<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        let dim_s = self.dataset.header.env.state_dim;
        let dim_a = self.dataset.header.env.action_dim;
        let out = dim_s + if self.reward_head { 1 } else { 0 };
        (dim_s, dim_a, out)
    }

    /// Build (input, target) rows for the given transition indices.
    fn build(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let (dim_s, dim_a, dim_out) = self.dims();
        let mut input = Vec::with_capacity(idx.len() * (dim_s + dim_a));
        let mut target = Vec::with_capacity(idx.len() * dim_out);
        for &i in idx {
            let tr = &self.dataset.transitions[i];
            input.extend(self.stats.normalize_state(&tr.s));
            input.extend_from_slice(&tr.a);
            match self.mode {
                ModelMode::Delta => {
                    for d in 0..dim_s {
                        let delta = tr.s_next[d] - tr.s[d];
                        target.push((delta - self.stats.mu_ds[d]) / self.stats.sigma_ds[d]);
                    }
                }
                ModelMode::Direct => {
                    target.extend(self.stats.normalize_state(&tr.s_next));
                }
            }
            if self.reward_head {
                target.push(self.stats.normalize_reward(tr.r));
            }
        }
        (input, target)
    }

    /// Plain-forward MSE over all outputs for the given indices.
    fn loss(&self, mlp: &MlpParams, idx: &[usize]) -> Result<f64> {
        let (input, target) = self.build(idx);
        let pred = mlp.forward_values(&input, idx.len())?;
        let mut acc = 0.0;
        for (p, t) in pred.iter().zip(&target) {
            let e = p - t;
            acc += e * e;
        }
        Ok(acc / target.len() as f64)
    }

    /// Normalized state MSE (reward output excluded) for the given indices.
    fn state_mse(&self, mlp: &MlpParams, idx: &[usize]) -> Result<f64> {
        let (dim_s, _, dim_out) = self.dims();
        let (input, target) = self.build(idx);
        let pred = mlp.forward_values(&input, idx.len())?;
        let mut acc = 0.0;
        for row in 0..idx.len() {
            for d in 0..dim_s {
                let e = pred[row * dim_out + d] - target[row * dim_out + d];
                acc += e * e;
            }
        }
        Ok(acc / (idx.len() * dim_s) as f64)
    }
}

/// Train K members on the batch. Every member sees the same training split
/// (the leading 90% of episodes); the trailing 10% is held out for the
/// reported MSE.
pub fn train_ensemble(dataset: &Dataset, config: &ModelConfig) -> Result<EnsembleTraining> {
    if dataset.is_empty() {
        return Err(Error::Contract("ensemble training needs a nonempty dataset".into()));
    }
    if config.k == 0 {
        return Err(Error::Contract("ensemble size K must be at least 1".into()));
    }
    let stats = compute_norm_stats(dataset)?;
    let (train_idx, held_idx) = dataset.split_tail_episodes(0.10);
    let train_idx = if train_idx.is_empty() {
        (0..dataset.len()).collect::<Vec<_>>()
    } else {
        train_idx
    };
    let batches = Batchs {
        dataset,
        stats: &stats,
        mode: config.mode,
        reward_head: config.reward_head,
    };
    let (dim_s, dim_a, dim_out) = batches.dims();

    let results: Vec<Result<(MlpParams, Vec<f64>)>> = (0..config.k)
        .into_par_iter()
        .map(|member| {
            let mut sizes = vec![dim_s + dim_a];
            sizes.extend_from_slice(&config.hidden);
            sizes.push(dim_out);
            let mut init_rng = seeding::stream(config.seed, "model-member", member as u64);
            let mut mlp = MlpParams::new(&sizes, Activation::Relu, Activation::Linear, &mut init_rng);
            let mut optimizer = Optimizer::adam(config.lr);
            let mut shuffle_rng = seeding::stream(config.seed, "model-shuffle", member as u64);

            let mut epoch_loss = Vec::with_capacity(config.epochs);
            for epoch in 0..config.epochs {
                let mut order = train_idx.clone();
                crate::behavior::shuffle_indices(&mut order, &mut shuffle_rng);
                for chunk in order.chunks(config.batch_size) {
                    let (input, target) = batches.build(chunk);
                    let mut tape = Tape::new();
                    let vars = mlp.insert_into(&mut tape);
                    let x = tape.leaf(input, vec![chunk.len(), dim_s + dim_a]);
                    let y = forward_mlp(&mut tape, &mlp, &vars, x)?;
                    let tgt = tape.leaf(target, vec![chunk.len(), dim_out]);
                    let diff = tape.sub(y, tgt);
                    let sq = tape.square(diff);
                    let loss = tape.mean_all(sq);
                    let loss_val = tape.value_scalar(loss);
                    if !loss_val.is_finite() {
                        return Err(Error::Diverged(format!(
                            "member {member} loss became {loss_val} in epoch {epoch}"
                        )));
                    }
                    tape.backward(loss)?;
                    let grads = vars.grads(&tape);
                    optimizer.step(&mut mlp.param_buffers_mut(), &grads)?;
                }
                epoch_loss.push(batches.loss(&mlp, &train_idx)?);
            }
            Ok((mlp, epoch_loss))
        })
        .collect();

    let mut members = Vec::with_capacity(config.k);
    let mut epoch_train_loss = Vec::with_capacity(config.k);
    for r in results {
        let (mlp, losses) = r?;
        members.push(mlp);
        epoch_train_loss.push(losses);
    }
    let held_out_mse = members
        .iter()
        .map(|m| {
            if held_idx.is_empty() {
                Ok(f64::NAN)
            } else {
                batches.state_mse(m, &held_idx)
            }
        })
        .collect::<Result<Vec<f64>>>()?;

    Ok(EnsembleTraining {
        ensemble: DynamicsEnsemble {
            mode: config.mode,
            reward_head: config.reward_head,
            stats,
            members,
        },
        epoch_train_loss,
        held_out_mse,
    })
}

impl DynamicsEnsemble {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn state_dim(&self) -> usize {
        self.stats.state_dim()
    }

    fn check_member(&self, k: usize) -> Result<()> {
        if k >= self.members.len() {
            return Err(Error::Contract(format!(
                "member index {k} out of range for K = {}",
                self.members.len()
            )));
        }
        Ok(())
    }

    /// Predict the next state (and the reward, when a head was trained) for a
    /// batch of rows from plain buffers. `s` is [rows, state_dim] row-major,
    /// `a` is [rows, action_dim].
    pub fn predict_batch(
        &self,
        k: usize,
        s: &[f64],
        a: &[f64],
        rows: usize,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        self.check_member(k)?;
        let dim_s = self.state_dim();
        let dim_a = a.len() / rows;
        let dim_out = dim_s + if self.reward_head { 1 } else { 0 };
        let mut input = Vec::with_capacity(rows * (dim_s + dim_a));
        for row in 0..rows {
            input.extend(self.stats.normalize_state(&s[row * dim_s..(row + 1) * dim_s]));
            input.extend_from_slice(&a[row * dim_a..(row + 1) * dim_a]);
        }
        let raw = self.members[k].forward_values(&input, rows)?;
        let mut next = Vec::with_capacity(rows * dim_s);
        let mut rewards = if self.reward_head {
            Some(Vec::with_capacity(rows))
        } else {
            None
        };
        for row in 0..rows {
            for d in 0..dim_s {
                let y = raw[row * dim_out + d];
                let x = match self.mode {
                    ModelMode::Delta => {
                        s[row * dim_s + d] + (y * self.stats.sigma_ds[d] + self.stats.mu_ds[d])
                    }
                    ModelMode::Direct => y * self.stats.sigma_s[d] + self.stats.mu_s[d],
                };
                next.push(clamp_explicit(x, self.stats.min_s[d], self.stats.max_s[d]));
            }
            if let Some(rs) = rewards.as_mut() {
                rs.push(self.stats.denormalize_reward(raw[row * dim_out + dim_s]));
            }
        }
        Ok((next, rewards))
    }

    /// Single-row convenience wrapper around [`Self::predict_batch`].
    pub fn predict(&self, k: usize, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, Option<f64>)> {
        let (next, r) = self.predict_batch(k, s, a, 1)?;
        Ok((next, r.map(|v| v[0])))
    }

    /// Record member k's prediction on the tape: input state tensor
    /// [rows, state_dim] in raw units, action tensor [rows, action_dim].
    /// Returns the clamped next state (raw units) and the normalized reward
    /// output when a head exists. Differentiable w.r.t. `s` and `a`; the
    /// clamp passes zero gradient outside the observed range.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        member_vars: &MlpVars,
        k: usize,
        s: TensorId,
        a: TensorId,
    ) -> Result<(TensorId, Option<TensorId>)> {
        self.check_member(k)?;
        let dim_s = self.state_dim();
        let (scale, shift) = self.stats.state_norm_affine();
        let s_norm = tape.col_affine(s, &scale, &shift);
        let input = tape.concat_cols(s_norm, a);
        let raw = forward_mlp(tape, &self.members[k], member_vars, input)?;
        let state_out = if self.reward_head {
            tape.slice_cols(raw, 0, dim_s)
        } else {
            raw
        };
        let next_unclamped = match self.mode {
            ModelMode::Delta => {
                let delta = tape.col_affine(state_out, &self.stats.sigma_ds, &self.stats.mu_ds);
                tape.add(s, delta)
            }
            ModelMode::Direct => tape.col_affine(state_out, &self.stats.sigma_s, &self.stats.mu_s),
        };
        let next = tape.clamp_cols(next_unclamped, &self.stats.min_s, &self.stats.max_s);
        let reward = if self.reward_head {
            Some(tape.slice_cols(raw, dim_s, dim_s + 1))
        } else {
            None
        };
        Ok((next, reward))
    }

    /// Mean pairwise L2 distance between member next-state predictions.
    /// A diagnostic only; it never enters any training loss.
    pub fn model_disagreement(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        if self.members.len() < 2 {
            return Err(Error::Contract(
                "model disagreement needs at least 2 members".into(),
            ));
        }
        let preds: Vec<Vec<f64>> = (0..self.members.len())
            .map(|k| self.predict(k, s, a).map(|(n, _)| n))
            .collect::<Result<_>>()?;
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for i in 0..preds.len() {
            for j in i + 1..preds.len() {
                let d2: f64 = preds[i]
                    .iter()
                    .zip(&preds[j])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                acc += d2.sqrt();
                pairs += 1;
            }
        }
        Ok(acc / pairs as f64)
    }

    // ── checkpoints ──────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(TAG_ENSEMBLE);
        w.u8(self.mode.tag());
        w.u8(self.reward_head as u8);
        w.u32(self.members.len() as u32);
        write_stats(&mut w, &self.stats);
        for m in &self.members {
            w.mlp(m);
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = checkpoint::load_bytes(path)?;
        let mut r = Reader::new(&bytes, TAG_ENSEMBLE, path)?;
        let mode = ModelMode::from_tag(r.u8()?)
            .ok_or_else(|| Error::format(path, "unknown model mode tag"))?;
        let reward_head = r.u8()? != 0;
        let k = r.u32()? as usize;
        let stats = read_stats(&mut r)?;
        let members = (0..k).map(|_| r.mlp()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(DynamicsEnsemble {
            mode,
            reward_head,
            stats,
            members,
        })
    }
}

fn clamp_explicit(x: f64, lo: f64, hi: f64) -> f64 {
    // NaN passes through so divergence stays visible.
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

pub(crate) fn write_stats(w: &mut Writer, stats: &NormStats) {
    w.u32(stats.state_dim() as u32);
    w.f64_run(&stats.mu_s);
    w.f64_run(&stats.sigma_s);
    w.f64_run(&stats.mu_ds);
    w.f64_run(&stats.sigma_ds);
    w.f64(stats.mu_r);
    w.f64(stats.sigma_r);
    w.f64_run(&stats.min_s);
    w.f64_run(&stats.max_s);
}

pub(crate) fn read_stats(r: &mut Reader) -> Result<NormStats> {
    let dim = r.u32()? as usize;
    Ok(NormStats {
        mu_s: r.f64_run(dim)?,
        sigma_s: r.f64_run(dim)?,
        mu_ds: r.f64_run(dim)?,
        sigma_ds: r.f64_run(dim)?,
        mu_r: r.f64()?,
        sigma_r: r.f64()?,
        min_s: r.f64_run(dim)?,
        max_s: r.f64_run(dim)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::{generate_dataset, BehaviorPolicy, Tier};
    use crate::env::EnvSpec;
    use rand::Rng;

    fn small_dataset(epsilon: f64, steps: usize, seed: u64) -> Dataset {
        let env = EnvSpec::point_mass();
        let p = BehaviorPolicy::for_tier(Tier::Mediocre, &env);
        generate_dataset(&env, &p, epsilon, steps, seed).unwrap()
    }

    #[test]
    fn two_point_stats_are_mean_two_sigma_one() {
        // States {1, 3} in one dimension: population mean 2, std 1.
        let mut ds = small_dataset(0.0, 200, 1);
        ds.transitions.truncate(2);
        for (i, x) in [1.0, 3.0].iter().enumerate() {
            ds.transitions[i].s = vec![*x, 0.0, 0.0, 0.0];
            ds.transitions[i].s_next = vec![*x, 0.0, 0.0, 0.0];
        }
        let stats = compute_norm_stats(&ds).unwrap();
        assert!((stats.mu_s[0] - 2.0).abs() < 1e-15);
        assert!((stats.sigma_s[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_column_hits_the_sigma_floor() {
        let mut ds = small_dataset(0.0, 200, 2);
        for tr in &mut ds.transitions {
            tr.s[3] = 0.25;
            tr.s_next[3] = 0.25;
        }
        let stats = compute_norm_stats(&ds).unwrap();
        assert_eq!(stats.sigma_s[3], SIGMA_FLOOR);
        // Normalization maps the constant to exactly zero.
        let z = stats.normalize_state(&[0.0, 0.0, 0.0, 0.25]);
        assert_eq!(z[3], 0.0);
    }

    #[test]
    fn normalization_round_trips() {
        let ds = small_dataset(0.5, 400, 3);
        let stats = compute_norm_stats(&ds).unwrap();
        let mut rng = crate::seeding::stream(4, "dyn-test", 0);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let back = stats.denormalize_state(&stats.normalize_state(&x));
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let r = -0.73;
        assert!((stats.denormalize_reward(stats.normalize_reward(r)) - r).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut ds = small_dataset(0.0, 100, 5);
        ds.transitions.clear();
        assert!(compute_norm_stats(&ds).is_err());
    }

    #[test]
    fn zero_delta_member_is_the_identity_when_mu_ds_is_zero() {
        let ds = small_dataset(0.2, 300, 6);
        let mut stats = compute_norm_stats(&ds).unwrap();
        stats.mu_ds = vec![0.0; 4];
        // Keep the clamp inactive so the identity is visible.
        stats.min_s = vec![-10.0; 4];
        stats.max_s = vec![10.0; 4];
        // A member whose scales are all zero outputs exactly zero.
        let mut rng = crate::seeding::stream(7, "dyn-test", 1);
        let mut mlp = MlpParams::new(&[6, 8, 4], Activation::Relu, Activation::Linear, &mut rng);
        for l in &mut mlp.layers {
            l.g.iter_mut().for_each(|g| *g = 0.0);
            l.b.iter_mut().for_each(|b| *b = 0.0);
        }
        let ens = DynamicsEnsemble {
            mode: ModelMode::Delta,
            reward_head: false,
            stats,
            members: vec![mlp],
        };
        let s = [0.1, -0.2, 0.05, 0.3];
        let (next, r) = ens.predict(0, &s, &[0.4, -0.4]).unwrap();
        assert!(r.is_none());
        for (a, b) in next.iter().zip(&s) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn predictions_never_leave_the_observed_range() {
        let ds = small_dataset(0.4, 400, 8);
        let trained = train_ensemble(
            &ds,
            &ModelConfig {
                epochs: 2,
                k: 2,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let ens = &trained.ensemble;
        let mut rng = crate::seeding::stream(9, "dyn-test", 2);
        for _ in 0..2000 {
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-0.999..0.999)).collect();
            let (next, _) = ens.predict(0, &s, &a).unwrap();
            for d in 0..4 {
                assert!(next[d] >= ens.stats.min_s[d] && next[d] <= ens.stats.max_s[d]);
            }
        }
    }

    #[test]
    fn identical_seed_gives_bit_identical_ensembles() {
        let ds = small_dataset(0.3, 300, 10);
        let cfg = ModelConfig {
            epochs: 2,
            k: 2,
            ..ModelConfig::default()
        };
        let a = train_ensemble(&ds, &cfg).unwrap().ensemble;
        let b = train_ensemble(&ds, &cfg).unwrap().ensemble;
        assert_eq!(a, b);
    }

    #[test]
    fn single_member_training_is_just_model_training() {
        let ds = small_dataset(0.3, 300, 11);
        let one = train_ensemble(
            &ds,
            &ModelConfig {
                epochs: 2,
                k: 1,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let four = train_ensemble(
            &ds,
            &ModelConfig {
                epochs: 2,
                k: 4,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        // Member 0 trains identically regardless of how many siblings exist.
        assert_eq!(one.ensemble.members[0], four.ensemble.members[0]);
    }

    #[test]
    fn disagreement_contract_and_identities() {
        let ds = small_dataset(0.3, 300, 12);
        let stats = compute_norm_stats(&ds).unwrap();
        let mut rng = crate::seeding::stream(13, "dyn-test", 3);
        let mlp = MlpParams::new(&[6, 8, 4], Activation::Relu, Activation::Linear, &mut rng);

        // Identical members disagree by exactly zero.
        let twins = DynamicsEnsemble {
            mode: ModelMode::Direct,
            reward_head: false,
            stats: stats.clone(),
            members: vec![mlp.clone(), mlp.clone()],
        };
        let s = [0.1, 0.1, 0.0, 0.0];
        let a = [0.2, 0.2];
        assert_eq!(twins.model_disagreement(&s, &a).unwrap(), 0.0);

        // Two members differing by a constant c in one output dimension
        // disagree by exactly c (when the clamp is inactive).
        let mut shifted = mlp.clone();
        let c_shift = 0.05;
        let last = shifted.layers.len() - 1;
        // Bias is added before denormalization; shift by c / sigma.
        shifted.layers[last].b[0] += c_shift / stats.sigma_s[0];
        let mut wide_stats = stats.clone();
        wide_stats.min_s = vec![-10.0; 4];
        wide_stats.max_s = vec![10.0; 4];
        let pair = DynamicsEnsemble {
            mode: ModelMode::Direct,
            reward_head: false,
            stats: wide_stats,
            members: vec![mlp.clone(), shifted],
        };
        let d = pair.model_disagreement(&s, &a).unwrap();
        assert!((d - c_shift).abs() < 1e-12, "disagreement {d}");

        // K = 1 is a contract error.
        let solo = DynamicsEnsemble {
            mode: ModelMode::Direct,
            reward_head: false,
            stats,
            members: vec![mlp],
        };
        assert!(solo.model_disagreement(&s, &a).is_err());
    }

    #[test]
    fn ensemble_checkpoint_round_trips() {
        let ds = small_dataset(0.3, 300, 14);
        let trained = train_ensemble(
            &ds,
            &ModelConfig {
                epochs: 1,
                k: 2,
                reward_head: true,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let dir = std::env::temp_dir().join("moose-dyn-ckpt-test");
        let path = dir.join("ensemble.ckpt");
        trained.ensemble.save(&path).unwrap();
        let back = DynamicsEnsemble::load(&path).unwrap();
        assert_eq!(trained.ensemble, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn taped_prediction_matches_plain_prediction() {
        let ds = small_dataset(0.4, 300, 15);
        let trained = train_ensemble(
            &ds,
            &ModelConfig {
                epochs: 1,
                k: 1,
                reward_head: true,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let ens = &trained.ensemble;
        let s = vec![0.05, -0.1, 0.2, 0.0, 0.3, 0.1, -0.2, 0.4];
        let a = vec![0.3, -0.3, 0.1, 0.6];
        let (plain, plain_r) = ens.predict_batch(0, &s, &a, 2).unwrap();

        let mut tape = Tape::new();
        let vars = ens.members[0].insert_into(&mut tape);
        let sid = tape.leaf(s.clone(), vec![2, 4]);
        let aid = tape.leaf(a.clone(), vec![2, 2]);
        let (next, r) = ens.predict_on_tape(&mut tape, &vars, 0, sid, aid).unwrap();
        assert_eq!(tape.values(next), plain.as_slice());
        let taped_r: Vec<f64> = tape
            .values(r.unwrap())
            .iter()
            .map(|&z| ens.stats.denormalize_reward(z))
            .collect();
        for (a, b) in taped_r.iter().zip(&plain_r.unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_prediction_gradients_match_finite_differences() {
        use crate::gradcheck::{central_diff_grad, max_rel_err};
        let ds = small_dataset(0.4, 300, 16);
        let trained = train_ensemble(
            &ds,
            &ModelConfig {
                epochs: 2,
                k: 1,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let ens = trained.ensemble;
        // A point well inside the observed range so the clamp is inactive.
        let s0 = vec![0.3, 0.32, 0.01, 0.02];
        let a0 = vec![0.1, -0.1];

        let value = |s: &[f64], a: &[f64]| {
            let mut tape = Tape::new();
            let vars = ens.members[0].insert_into(&mut tape);
            let sid = tape.leaf(s.to_vec(), vec![1, 4]);
            let aid = tape.leaf(a.to_vec(), vec![1, 2]);
            let (next, _) = ens.predict_on_tape(&mut tape, &vars, 0, sid, aid).unwrap();
            let sq = tape.square(next);
            let l = tape.sum_all(sq);
            tape.value_scalar(l)
        };

        let mut tape = Tape::new();
        let vars = ens.members[0].insert_into(&mut tape);
        let sid = tape.leaf(s0.clone(), vec![1, 4]);
        let aid = tape.leaf(a0.clone(), vec![1, 2]);
        let (next, _) = ens.predict_on_tape(&mut tape, &vars, 0, sid, aid).unwrap();
        let sq = tape.square(next);
        let l = tape.sum_all(sq);
        tape.backward(l).unwrap();

        let num_s = central_diff_grad(&s0, 1e-5, |s| value(s, &a0));
        let num_a = central_diff_grad(&a0, 1e-5, |a| value(&s0, a));
        assert!(max_rel_err(tape.grad(sid), &num_s) < 1e-5);
        assert!(max_rel_err(tape.grad(aid), &num_a) < 1e-5);
    }
}
