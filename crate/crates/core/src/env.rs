//! Desk-scale continuous-control environments.
//!
//! The point-mass plant: state `(x, y, vx, vy)` in the box `[-1,1]^4`,
//! actions in the open box `(-1,1)^2`. One step updates
//!
//! ```text
//! v' = clamp(0.9 v + 0.1 a + noise * xi, ±1)      xi ~ N(0, I)
//! p' = clamp(p + 0.05 v', ±1)
//! r  = -||p' - goal||
//! ```
//!
//! The deterministic variant has `noise = 0` and its step is a pure function;
//! the noisy variant uses `noise = 0.05`. The reward is differentiable in
//! `(s, a, s')` away from the clamp boundaries and depends only on the next
//! position, so imagined rollouts can score it analytically.

use crate::seeding::Stream;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// Velocity persistence and control gain of the plant.
const V_DECAY: f64 = 0.9;
const A_GAIN: f64 = 0.1;
const P_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    PointMass,
    NoisyPointMass,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointMass => "point-mass",
            EnvKind::NoisyPointMass => "noisy-point-mass",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "point-mass" => Ok(EnvKind::PointMass),
            "noisy-point-mass" => Ok(EnvKind::NoisyPointMass),
            other => Err(Error::Contract(format!(
                "unknown environment '{other}' (expected point-mass or noisy-point-mass)"
            ))),
        }
    }
}

/// Everything that defines an environment instance. Random streams are
/// passed into [`EnvSpec::step`] and [`EnvSpec::reset`] by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Standard deviation of the velocity noise; 0 means deterministic.
    pub noise: f64,
    pub goal: [f64; 2],
    pub episode_len: usize,
    /// Episodes start uniformly inside `[-w, w]^4`.
    pub reset_half_width: f64,
}

impl EnvSpec {
    pub fn point_mass() -> Self {
        EnvSpec {
            kind: EnvKind::PointMass,
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            noise: 0.0,
            goal: [0.8, 0.8],
            episode_len: 100,
            reset_half_width: 0.2,
        }
    }

    pub fn noisy_point_mass() -> Self {
        EnvSpec {
            kind: EnvKind::NoisyPointMass,
            noise: 0.05,
            ..EnvSpec::point_mass()
        }
    }

    pub fn of_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::PointMass => EnvSpec::point_mass(),
            EnvKind::NoisyPointMass => EnvSpec::noisy_point_mass(),
        }
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(Error::Contract(format!(
                "state has {} entries, expected {}",
                s.len(),
                self.state_dim
            )));
        }
        for (i, &x) in s.iter().enumerate() {
            if !x.is_finite() || x.abs() > 1.0 {
                return Err(Error::Contract(format!(
                    "state[{i}] = {x} outside the box [-1, 1]"
                )));
            }
        }
        Ok(())
    }

    fn check_action(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.action_dim {
            return Err(Error::Contract(format!(
                "action has {} entries, expected {}",
                a.len(),
                self.action_dim
            )));
        }
        for (i, &x) in a.iter().enumerate() {
            // Policies emit strictly interior actions; the boundary itself is
            // tolerated so hand-written probes at ±1 evaluate.
            if !x.is_finite() || x.abs() > 1.0 {
                return Err(Error::Contract(format!(
                    "action[{i}] = {x} outside the box (-1, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Advance one step. Consumes random draws only when `noise > 0`.
    pub fn step(&self, s: &[f64], a: &[f64], rng: &mut Stream) -> Result<(Vec<f64>, f64)> {
        self.check_state(s)?;
        self.check_action(a)?;
        let mut next = vec![0.0; 4];
        for d in 0..2 {
            let xi: f64 = if self.noise > 0.0 {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
            let v = (V_DECAY * s[2 + d] + A_GAIN * a[d] + self.noise * xi).clamp(-1.0, 1.0);
            next[2 + d] = v;
            next[d] = (s[d] + P_STEP * v).clamp(-1.0, 1.0);
        }
        let r = self.reward(s, a, &next);
        Ok((next, r))
    }

    /// Reward of a transition; depends only on the next position.
    pub fn reward(&self, _s: &[f64], _a: &[f64], s_next: &[f64]) -> f64 {
        let dx = s_next[0] - self.goal[0];
        let dy = s_next[1] - self.goal[1];
        -(dx * dx + dy * dy).sqrt()
    }

    /// Analytic reward gradient w.r.t. (s, a, s'); the only nonzero block is
    /// the next-position one. Undefined exactly at the goal.
    pub fn reward_grad(&self, s_next: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dx = s_next[0] - self.goal[0];
        let dy = s_next[1] - self.goal[1];
        let dist = (dx * dx + dy * dy).sqrt();
        let mut dnext = vec![0.0; self.state_dim];
        if dist > 0.0 {
            dnext[0] = -dx / dist;
            dnext[1] = -dy / dist;
        }
        (vec![0.0; self.state_dim], vec![0.0; self.action_dim], dnext)
    }

    /// Draw an episode start state.
    pub fn reset(&self, rng: &mut Stream) -> Vec<f64> {
        let w = self.reset_half_width;
        (0..self.state_dim)
            .map(|_| if w > 0.0 { rng.random_range(-w..w) } else { 0.0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff_grad;
    use crate::seeding;

    #[test]
    fn zero_everything_scores_distance_to_goal() {
        let env = EnvSpec::point_mass();
        let mut rng = seeding::stream(0, "env-test", 0);
        let (next, r) = env.step(&[0.0; 4], &[0.0; 2], &mut rng).unwrap();
        assert_eq!(next, vec![0.0; 4]);
        // -sqrt(0.8^2 + 0.8^2) = -sqrt(1.28)
        assert!((r - -1.28f64.sqrt()).abs() < 1e-15);
        assert!((r - -1.131370849898476).abs() < 1e-12);
    }

    #[test]
    fn full_throttle_from_rest_hand_evaluated() {
        let env = EnvSpec::point_mass();
        let mut rng = seeding::stream(0, "env-test", 1);
        let (next, r) = env.step(&[0.0; 4], &[1.0, 1.0], &mut rng).unwrap();
        // v' = 0.1, p' = 0.05 * 0.1 = 0.005, r = -||(0.795, 0.795)||.
        for (got, want) in next.iter().zip(&[0.005, 0.005, 0.1, 0.1]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        let expect = -(0.795f64 * 0.795 + 0.795 * 0.795).sqrt();
        assert!((r - expect).abs() < 1e-12, "r={r} expect={expect}");
    }

    #[test]
    fn at_goal_with_zero_velocity_reward_is_zero() {
        let env = EnvSpec::point_mass();
        let mut rng = seeding::stream(0, "env-test", 2);
        let (_, r) = env
            .step(&[0.8, 0.8, 0.0, 0.0], &[0.0, 0.0], &mut rng)
            .unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn deterministic_variant_is_a_pure_function() {
        let env = EnvSpec::point_mass();
        let s = [0.1, -0.2, 0.3, 0.05];
        let a = [0.5, -0.5];
        let (n1, r1) = env
            .step(&s, &a, &mut seeding::stream(1, "env-test", 3))
            .unwrap();
        let (n2, r2) = env
            .step(&s, &a, &mut seeding::stream(99, "env-test", 4))
            .unwrap();
        assert_eq!(n1, n2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn states_stay_in_their_boxes() {
        let env = EnvSpec::noisy_point_mass();
        let mut rng = seeding::stream(2, "env-test", 5);
        let mut s = vec![0.9, 0.9, 0.9, 0.9];
        for _ in 0..500 {
            let (next, _) = env.step(&s, &[0.99, 0.99], &mut rng).unwrap();
            for &x in &next {
                assert!(x.abs() <= 1.0);
            }
            s = next;
        }
    }

    #[test]
    fn out_of_box_action_is_a_contract_error() {
        let env = EnvSpec::point_mass();
        let mut rng = seeding::stream(0, "env-test", 6);
        let err = env.step(&[0.0; 4], &[1.5, 0.0], &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn reward_gradient_matches_finite_differences_away_from_clamps() {
        let env = EnvSpec::point_mass();
        let s_next = vec![0.3, -0.4, 0.2, 0.1];
        let (_, _, dnext) = env.reward_grad(&s_next);
        let num = central_diff_grad(&s_next, 1e-5, |sn| env.reward(&[0.0; 4], &[0.0; 2], sn));
        for (g, n) in dnext.iter().zip(&num) {
            let denom = n.abs().max(1e-6);
            assert!(
                (g - n).abs() / denom < 1e-6,
                "analytic {g} vs numeric {n}"
            );
        }
    }

    #[test]
    fn noisy_variant_depends_on_the_stream() {
        let env = EnvSpec::noisy_point_mass();
        let s = [0.0; 4];
        let a = [0.2, 0.2];
        let (n1, _) = env
            .step(&s, &a, &mut seeding::stream(1, "env-test", 7))
            .unwrap();
        let (n2, _) = env
            .step(&s, &a, &mut seeding::stream(2, "env-test", 8))
            .unwrap();
        assert_ne!(n1, n2);
    }
}
