//! Behavior-support scoring with a variational autoencoder.
//!
//! The autoencoder learns the batch's distribution of (state, action) pairs:
//! encoder trunk to one hidden layer, two parallel heads for the latent mean
//! and log-variance (latent width 2 x action_dim), and a two-hidden-layer
//! decoder back to the pair. Training maximizes the ELBO via the
//! reparameterization trick; scoring is deterministic — encode to the latent
//! mean, decode, return the mean squared reconstruction error over the pair's
//! coordinates. In-support pairs reconstruct well; pairs far from the batch
//! reconstruct poorly, which is what the policy optimizer penalizes.
//!
//! Pairs are scored in normalized state space and raw action space, with the
//! same statistics the dynamics models use.

use crate::autodiff::{Tape, TensorId};
use crate::checkpoint::{self, Reader, Writer, TAG_VAE};
use crate::dataset::Dataset;
use crate::dynamics::{read_stats, write_stats, NormStats};
use crate::nn::{forward_mlp, Activation, MlpParams, MlpVars};
use crate::opt::Optimizer;
use crate::seeding;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct VaeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Hidden width of the encoder trunk and both decoder hidden layers.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            epochs: 50,
            batch_size: 500,
            lr: 1e-4,
            hidden: 64,
            seed: 0,
        }
    }
}

/// Encoder/decoder over normalized (state, action) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportVae {
    pub stats: NormStats,
    pub state_dim: usize,
    pub action_dim: usize,
    /// (s + a) -> hidden, ReLU.
    pub enc_trunk: MlpParams,
    /// hidden -> latent mean, linear.
    pub enc_mean: MlpParams,
    /// hidden -> latent log-variance, linear.
    pub enc_logvar: MlpParams,
    /// latent -> hidden -> hidden -> (s + a), linear output.
    pub decoder: MlpParams,
}

/// Tape handles for the scoring path (training additionally inserts the
/// log-variance head).
#[derive(Debug, Clone)]
pub struct VaeVars {
    pub trunk: MlpVars,
    pub mean: MlpVars,
    pub decoder: MlpVars,
}

/// One imagined trajectory's states and actions, borrowed for scoring.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryRef<'a> {
    pub states: &'a [Vec<f64>],
    pub actions: &'a [Vec<f64>],
}

impl SupportVae {
    pub fn latent_dim(&self) -> usize {
        2 * self.action_dim
    }

    fn pair_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    /// Normalized input row for one pair.
    fn pair_row(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut row = self.stats.normalize_state(s);
        row.extend_from_slice(a);
        row
    }

    /// Insert scoring parameters as tape leaves.
    pub fn insert_into(&self, tape: &mut Tape) -> VaeVars {
        VaeVars {
            trunk: self.enc_trunk.insert_into(tape),
            mean: self.enc_mean.insert_into(tape),
            decoder: self.decoder.insert_into(tape),
        }
    }

    /// Record the deterministic penalty of each row of `pairs`
    /// ([rows, state_dim + action_dim], already normalized): encode to the
    /// latent mean, decode, mean squared reconstruction error per row.
    pub fn penalty_rows_on_tape(
        &self,
        tape: &mut Tape,
        vars: &VaeVars,
        pairs: TensorId,
    ) -> Result<TensorId> {
        let h = forward_mlp(tape, &self.enc_trunk, &vars.trunk, pairs)?;
        let mu = forward_mlp(tape, &self.enc_mean, &vars.mean, h)?;
        let xhat = forward_mlp(tape, &self.decoder, &vars.decoder, mu)?;
        let diff = tape.sub(xhat, pairs);
        let sq = tape.square(diff);
        let per_row = tape.sum_rows(sq);
        Ok(tape.scale(per_row, 1.0 / self.pair_dim() as f64))
    }

    /// Deterministic support penalty of one raw pair; always >= 0, zero only
    /// for an exact reconstruction.
    pub fn penalty(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.penalty_batch(&[(s.to_vec(), a.to_vec())])?[0])
    }

    /// Penalties for many raw pairs at once.
    pub fn penalty_batch(&self, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
        let rows = pairs.len();
        let width = self.pair_dim();
        let mut input = Vec::with_capacity(rows * width);
        for (s, a) in pairs {
            for &x in s.iter().chain(a.iter()) {
                if !x.is_finite() {
                    return Err(Error::Contract("non-finite pair scored".into()));
                }
            }
            input.extend(self.pair_row(s, a));
        }
        let h = self.enc_trunk.forward_values(&input, rows)?;
        let mu = self.enc_mean.forward_values(&h, rows)?;
        let xhat = self.decoder.forward_values(&mu, rows)?;
        Ok((0..rows)
            .map(|r| {
                let mut acc = 0.0;
                for c in 0..width {
                    let e = xhat[r * width + c] - input[r * width + c];
                    acc += e * e;
                }
                acc / width as f64
            })
            .collect())
    }

    /// Mean over trajectories of the undiscounted per-step penalty sum.
    pub fn accumulate_penalty(&self, trajectories: &[TrajectoryRef<'_>]) -> Result<f64> {
        if trajectories.is_empty() {
            return Err(Error::Contract("no trajectories to score".into()));
        }
        let mut total = 0.0;
        for traj in trajectories {
            debug_assert_eq!(traj.states.len(), traj.actions.len());
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = traj
                .states
                .iter()
                .zip(traj.actions)
                .map(|(s, a)| (s.clone(), a.clone()))
                .collect();
            total += self.penalty_batch(&pairs)?.iter().sum::<f64>();
        }
        Ok(total / trajectories.len() as f64)
    }

    // ── checkpoints ──────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(TAG_VAE);
        w.u32(self.state_dim as u32);
        w.u32(self.action_dim as u32);
        write_stats(&mut w, &self.stats);
        w.mlp(&self.enc_trunk);
        w.mlp(&self.enc_mean);
        w.mlp(&self.enc_logvar);
        w.mlp(&self.decoder);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = checkpoint::load_bytes(path)?;
        let mut r = Reader::new(&bytes, TAG_VAE, path)?;
        let state_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let stats = read_stats(&mut r)?;
        let enc_trunk = r.mlp()?;
        let enc_mean = r.mlp()?;
        let enc_logvar = r.mlp()?;
        let decoder = r.mlp()?;
        r.finish()?;
        let vae = SupportVae {
            stats,
            state_dim,
            action_dim,
            enc_trunk,
            enc_mean,
            enc_logvar,
            decoder,
        };
        if vae.enc_mean.output_dim() != vae.latent_dim()
            || vae.decoder.output_dim() != vae.pair_dim()
        {
            return Err(Error::format(path, "autoencoder dimensions are inconsistent"));
        }
        Ok(vae)
    }
}

/// Training outcome: the autoencoder plus its deterministic epoch losses.
#[derive(Debug, Clone)]
pub struct VaeTraining {
    pub vae: SupportVae,
    /// Deterministic (latent-mean) reconstruction-plus-KL loss on the full
    /// training split after each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Train the autoencoder on the batch's pairs: reconstruction error plus
/// KL(q(z|s,a) || N(0, I)) through the reparameterization z = mu + e^(lv/2) xi.
pub fn train_vae(dataset: &Dataset, stats: &NormStats, config: &VaeConfig) -> Result<VaeTraining> {
    if dataset.is_empty() {
        return Err(Error::Contract("autoencoder training needs a nonempty dataset".into()));
    }
    let dim_s = dataset.header.env.state_dim;
    let dim_a = dataset.header.env.action_dim;
    let pair_dim = dim_s + dim_a;
    let latent = 2 * dim_a;

    let mut init_rng = seeding::stream(config.seed, "vae-init", 0);
    let enc_trunk = MlpParams::new(&[pair_dim, config.hidden], Activation::Relu, Activation::Relu, &mut init_rng);
    let enc_mean = MlpParams::new(&[config.hidden, latent], Activation::Relu, Activation::Linear, &mut init_rng);
    let enc_logvar = MlpParams::new(&[config.hidden, latent], Activation::Relu, Activation::Linear, &mut init_rng);
    let decoder = MlpParams::new(
        &[latent, config.hidden, config.hidden, pair_dim],
        Activation::Relu,
        Activation::Linear,
        &mut init_rng,
    );
    let mut vae = SupportVae {
        stats: stats.clone(),
        state_dim: dim_s,
        action_dim: dim_a,
        enc_trunk,
        enc_mean,
        enc_logvar,
        decoder,
    };

    let rows_all: Vec<Vec<f64>> = dataset
        .transitions
        .iter()
        .map(|tr| vae.pair_row(&tr.s, &tr.a))
        .collect();

    let mut optimizer = Optimizer::adam(config.lr);
    let mut shuffle_rng = seeding::stream(config.seed, "vae-shuffle", 0);
    let mut noise_rng = seeding::stream(config.seed, "vae-noise", 0);
    let mut epoch_loss = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..rows_all.len()).collect();
        crate::behavior::shuffle_indices(&mut order, &mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let rows = chunk.len();
            let mut input = Vec::with_capacity(rows * pair_dim);
            for &i in chunk {
                input.extend_from_slice(&rows_all[i]);
            }
            let xi: Vec<f64> = (0..rows * latent)
                .map(|_| noise_rng.sample(StandardNormal))
                .collect();

            let mut tape = Tape::new();
            let trunk_vars = vae.enc_trunk.insert_into(&mut tape);
            let mean_vars = vae.enc_mean.insert_into(&mut tape);
            let logvar_vars = vae.enc_logvar.insert_into(&mut tape);
            let dec_vars = vae.decoder.insert_into(&mut tape);

            let x = tape.leaf(input, vec![rows, pair_dim]);
            let h = forward_mlp(&mut tape, &vae.enc_trunk, &trunk_vars, x)?;
            let mu = forward_mlp(&mut tape, &vae.enc_mean, &mean_vars, h)?;
            let lv = forward_mlp(&mut tape, &vae.enc_logvar, &logvar_vars, h)?;

            // z = mu + exp(lv / 2) * xi
            let half_lv = tape.scale(lv, 0.5);
            let std = tape.exp(half_lv);
            let noise = tape.leaf(xi, vec![rows, latent]);
            let scaled = tape.mul_elem(std, noise);
            let z = tape.add(mu, scaled);

            let xhat = forward_mlp(&mut tape, &vae.decoder, &dec_vars, z)?;
            let diff = tape.sub(xhat, x);
            let sq = tape.square(diff);
            let recon = tape.sum_rows(sq);

            // KL(N(mu, e^lv) || N(0,1)) = 1/2 sum(mu^2 + e^lv - lv - 1)
            let mu_sq = tape.square(mu);
            let e_lv = tape.exp(lv);
            let neg_lv = tape.neg(lv);
            let inner = tape.add_many(&[mu_sq, e_lv, neg_lv]);
            let inner = tape.add_const(inner, -1.0);
            let kl_row = tape.sum_rows(inner);
            let kl = tape.scale(kl_row, 0.5);

            let per_row = tape.add(recon, kl);
            let loss = tape.mean_all(per_row);
            let loss_val = tape.value_scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "autoencoder loss became {loss_val} in epoch {epoch}"
                )));
            }
            tape.backward(loss)?;

            let mut grads = trunk_vars.grads(&tape);
            grads.extend(mean_vars.grads(&tape));
            grads.extend(logvar_vars.grads(&tape));
            grads.extend(dec_vars.grads(&tape));
            let mut params = vae.enc_trunk.param_buffers_mut();
            params.extend(vae.enc_mean.param_buffers_mut());
            params.extend(vae.enc_logvar.param_buffers_mut());
            params.extend(vae.decoder.param_buffers_mut());
            optimizer.step(&mut params, &grads)?;
        }
        epoch_loss.push(deterministic_loss(&vae, &rows_all)?);
    }

    Ok(VaeTraining { vae, epoch_loss })
}

/// Scoring-style loss over prepared rows: latent-mean reconstruction plus KL,
/// with no sampling, for monotonicity diagnostics.
fn deterministic_loss(vae: &SupportVae, rows_all: &[Vec<f64>]) -> Result<f64> {
    let rows = rows_all.len();
    let width = vae.pair_dim();
    let latent = vae.latent_dim();
    let mut input = Vec::with_capacity(rows * width);
    for r in rows_all {
        input.extend_from_slice(r);
    }
    let h = vae.enc_trunk.forward_values(&input, rows)?;
    let mu = vae.enc_mean.forward_values(&h, rows)?;
    let lv = vae.enc_logvar.forward_values(&h, rows)?;
    let xhat = vae.decoder.forward_values(&mu, rows)?;
    let mut total = 0.0;
    for r in 0..rows {
        let mut recon = 0.0;
        for c in 0..width {
            let e = xhat[r * width + c] - input[r * width + c];
            recon += e * e;
        }
        let mut kl = 0.0;
        for l in 0..latent {
            let m = mu[r * latent + l];
            let v = lv[r * latent + l];
            kl += m * m + v.exp() - v - 1.0;
        }
        total += recon + 0.5 * kl;
    }
    Ok(total / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::{generate_dataset, BehaviorPolicy, Tier};
    use crate::dynamics::compute_norm_stats;
    use crate::env::EnvSpec;
    use rand::Rng;

    fn tiny_vae_setup(epsilon: f64, seed: u64) -> (Dataset, NormStats) {
        let env = EnvSpec::point_mass();
        let p = BehaviorPolicy::for_tier(Tier::Mediocre, &env);
        let ds = generate_dataset(&env, &p, epsilon, 400, seed).unwrap();
        let stats = compute_norm_stats(&ds).unwrap();
        (ds, stats)
    }

    #[test]
    fn exact_decoder_scores_zero() {
        // All-zero scales collapse the network; the decoder bias then decides
        // the reconstruction. Score the pair the decoder reproduces exactly.
        let (_, stats) = tiny_vae_setup(0.0, 1);
        let mut rng = crate::seeding::stream(2, "vae-test", 0);
        let mut vae = SupportVae {
            stats: stats.clone(),
            state_dim: 4,
            action_dim: 2,
            enc_trunk: MlpParams::new(&[6, 8], Activation::Relu, Activation::Relu, &mut rng),
            enc_mean: MlpParams::new(&[8, 4], Activation::Relu, Activation::Linear, &mut rng),
            enc_logvar: MlpParams::new(&[8, 4], Activation::Relu, Activation::Linear, &mut rng),
            decoder: MlpParams::new(&[4, 8, 8, 6], Activation::Relu, Activation::Linear, &mut rng),
        };
        for mlp in [&mut vae.enc_trunk, &mut vae.enc_mean, &mut vae.decoder] {
            for l in &mut mlp.layers {
                l.g.iter_mut().for_each(|g| *g = 0.0);
                l.b.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let s = vec![0.1, -0.2, 0.3, 0.0];
        let a = vec![0.25, -0.5];
        let pair = vae.pair_row(&s, &a);
        let last = vae.decoder.layers.len() - 1;
        vae.decoder.layers[last].b = pair;
        assert_eq!(vae.penalty(&s, &a).unwrap(), 0.0);
    }

    #[test]
    fn penalty_is_pure() {
        let (ds, stats) = tiny_vae_setup(0.2, 3);
        let trained = train_vae(&ds, &stats, &VaeConfig { epochs: 2, ..VaeConfig::default() }).unwrap();
        let s = vec![0.1, 0.1, 0.0, 0.0];
        let a = vec![0.3, 0.3];
        let p1 = trained.vae.penalty(&s, &a).unwrap();
        let p2 = trained.vae.penalty(&s, &a).unwrap();
        assert_eq!(p1, p2);
        assert!(p1 >= 0.0);
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let (ds, stats) = tiny_vae_setup(0.2, 4);
        let cfg = VaeConfig { epochs: 2, ..VaeConfig::default() };
        let a = train_vae(&ds, &stats, &cfg).unwrap().vae;
        let b = train_vae(&ds, &stats, &cfg).unwrap().vae;
        assert_eq!(a, b);
    }

    #[test]
    fn training_loss_decreases() {
        let (ds, stats) = tiny_vae_setup(0.2, 5);
        let trained = train_vae(
            &ds,
            &stats,
            &VaeConfig { epochs: 8, lr: 1e-3, ..VaeConfig::default() },
        )
        .unwrap();
        let losses = &trained.epoch_loss;
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "epoch losses {losses:?}"
        );
    }

    #[test]
    fn in_batch_pairs_reconstruct_better_than_uniform_random() {
        let (ds, stats) = tiny_vae_setup(0.0, 6);
        let trained = train_vae(
            &ds,
            &stats,
            &VaeConfig { epochs: 20, lr: 1e-3, ..VaeConfig::default() },
        )
        .unwrap();
        let vae = &trained.vae;

        let in_batch: Vec<(Vec<f64>, Vec<f64>)> = ds
            .transitions
            .iter()
            .step_by(4)
            .map(|tr| (tr.s.clone(), tr.a.clone()))
            .collect();
        let mut rng = crate::seeding::stream(7, "vae-test", 1);
        let random: Vec<(Vec<f64>, Vec<f64>)> = (0..in_batch.len())
            .map(|_| {
                (
                    (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let p_in = mean(&vae.penalty_batch(&in_batch).unwrap());
        let p_rand = mean(&vae.penalty_batch(&random).unwrap());
        assert!(
            p_in < p_rand,
            "in-batch {p_in} should be below uniform-random {p_rand}"
        );
    }

    #[test]
    fn accumulated_penalty_identities() {
        let (ds, stats) = tiny_vae_setup(0.2, 8);
        let trained = train_vae(&ds, &stats, &VaeConfig { epochs: 2, ..VaeConfig::default() }).unwrap();
        let vae = &trained.vae;

        let states = vec![vec![0.1, 0.0, 0.0, 0.0]];
        let actions = vec![vec![0.2, -0.2]];
        let single = TrajectoryRef {
            states: &states,
            actions: &actions,
        };
        // A one-step trajectory accumulates exactly its single pair penalty.
        let acc = vae.accumulate_penalty(&[single]).unwrap();
        let p = vae.penalty(&states[0], &actions[0]).unwrap();
        assert!((acc - p).abs() < 1e-15);

        // Duplicating every trajectory leaves the mean unchanged.
        let acc2 = vae.accumulate_penalty(&[single, single]).unwrap();
        assert!((acc2 - acc).abs() < 1e-15);

        // Doubling the horizon of a repeating loop doubles the sum.
        let states2: Vec<Vec<f64>> = vec![states[0].clone(), states[0].clone()];
        let actions2: Vec<Vec<f64>> = vec![actions[0].clone(), actions[0].clone()];
        let doubled = vae
            .accumulate_penalty(&[TrajectoryRef {
                states: &states2,
                actions: &actions2,
            }])
            .unwrap();
        assert!((doubled - 2.0 * acc).abs() < 1e-12);
    }

    #[test]
    fn taped_penalty_matches_plain_and_its_gradient_checks() {
        use crate::gradcheck::{central_diff_grad, max_rel_err};
        let (ds, stats) = tiny_vae_setup(0.3, 9);
        let trained = train_vae(&ds, &stats, &VaeConfig { epochs: 3, ..VaeConfig::default() }).unwrap();
        let vae = &trained.vae;
        let s0 = vec![0.12, -0.08, 0.2, 0.05];
        let a0 = vec![0.4, -0.3];

        let plain = vae.penalty(&s0, &a0).unwrap();
        let value = |s: &[f64], a: &[f64]| {
            let mut tape = Tape::new();
            let vars = vae.insert_into(&mut tape);
            let row = vae.pair_row(s, a);
            let x = tape.leaf(row, vec![1, 6]);
            let pen = vae.penalty_rows_on_tape(&mut tape, &vars, x).unwrap();
            let l = tape.sum_all(pen);
            tape.value_scalar(l)
        };
        assert!((value(&s0, &a0) - plain).abs() < 1e-12);

        // Gradient w.r.t. the normalized pair row.
        let row0 = vae.pair_row(&s0, &a0);
        let mut tape = Tape::new();
        let vars = vae.insert_into(&mut tape);
        let x = tape.leaf(row0.clone(), vec![1, 6]);
        let pen = vae.penalty_rows_on_tape(&mut tape, &vars, x).unwrap();
        let l = tape.sum_all(pen);
        tape.backward(l).unwrap();
        let num = central_diff_grad(&row0, 1e-5, |r| {
            let mut t = Tape::new();
            let vars = vae.insert_into(&mut t);
            let x = t.leaf(r.to_vec(), vec![1, 6]);
            let pen = vae.penalty_rows_on_tape(&mut t, &vars, x).unwrap();
            let l = t.sum_all(pen);
            t.value_scalar(l)
        });
        assert!(max_rel_err(tape.grad(x), &num) < 1e-5);
    }

    #[test]
    fn checkpoint_round_trips() {
        let (ds, stats) = tiny_vae_setup(0.2, 10);
        let trained = train_vae(&ds, &stats, &VaeConfig { epochs: 1, ..VaeConfig::default() }).unwrap();
        let dir = std::env::temp_dir().join("moose-vae-ckpt-test");
        let path = dir.join("vae.ckpt");
        trained.vae.save(&path).unwrap();
        let back = SupportVae::load(&path).unwrap();
        assert_eq!(trained.vae, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
