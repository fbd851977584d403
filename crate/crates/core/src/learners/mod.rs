//! SAC and A2C update rules with independently switchable curiosity
//! components.

mod a2c;
mod losses;
mod sac;

pub use a2c::{A2cAgent, A2cHyper, A2cMetrics, Rollout, RolloutCollector};
pub use losses::{
    a2c_losses, actor_and_alpha_losses, averaged_target, bellman_target, drq_critic_loss, gae,
    regularized_critic_loss, regularized_target, soft_value, A2cLosses, TwinQ,
};
pub use sac::{SacAgent, SacHyper, SacMetrics};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On/off switches for the four curiosity components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentToggles {
    pub selection: bool,
    pub prioritization: bool,
    pub regularization: bool,
    pub reward: bool,
}

impl ComponentToggles {
    pub const NONE: Self = Self {
        selection: false,
        prioritization: false,
        regularization: false,
        reward: false,
    };

    pub const ALL: Self = Self {
        selection: true,
        prioritization: true,
        regularization: true,
        reward: true,
    };

    /// Combination number `bits`, reading selection, prioritization,
    /// regularization, reward from the most significant bit down.
    pub fn from_index(bits: u8) -> Result<Self> {
        if bits > 15 {
            return Err(Error::invalid(format!("toggle index {bits} outside 0..16")));
        }
        Ok(Self {
            selection: bits & 8 != 0,
            prioritization: bits & 4 != 0,
            regularization: bits & 2 != 0,
            reward: bits & 1 != 0,
        })
    }

    pub fn index(&self) -> u8 {
        (self.selection as u8) << 3
            | (self.prioritization as u8) << 2
            | (self.regularization as u8) << 1
            | self.reward as u8
    }

    /// All 16 combinations in lexicographic order, all-off first.
    pub fn all_combinations() -> Vec<Self> {
        (0..16).map(|b| Self::from_index(b).expect("in range")).collect()
    }

    /// `CURL+` when everything is off, `CCLF` when everything is on,
    /// otherwise the enabled components joined by `+`.
    pub fn label(&self) -> String {
        match self.index() {
            0 => "CURL+".into(),
            15 => "CCLF".into(),
            _ => {
                let names = [
                    (self.selection, "selection"),
                    (self.prioritization, "prioritization"),
                    (self.regularization, "regularization"),
                    (self.reward, "reward"),
                ];
                names
                    .iter()
                    .filter(|(on, _)| *on)
                    .map(|(_, n)| *n)
                    .collect::<Vec<_>>()
                    .join("+")
            }
        }
    }
}

/// Lower bound on both running reward maxima.
pub const REWARD_MAX_FLOOR: f64 = 1e-8;

/// Running state of the decayed, normalised curiosity bonus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicRewardState {
    pub lambda: f64,
    pub eta: f64,
    r_e_max: f64,
    r_i_max: f64,
    t: u64,
}

impl IntrinsicRewardState {
    pub fn new(lambda: f64, eta: f64) -> Self {
        Self {
            lambda,
            eta,
            r_e_max: REWARD_MAX_FLOOR,
            r_i_max: REWARD_MAX_FLOOR,
            t: 0,
        }
    }

    /// State with explicit maxima and step, floored.
    pub fn with_maxima(lambda: f64, eta: f64, t: u64, r_e_max: f64, r_i_max: f64) -> Self {
        Self {
            lambda,
            eta,
            r_e_max: r_e_max.max(REWARD_MAX_FLOOR),
            r_i_max: r_i_max.max(REWARD_MAX_FLOOR),
            t,
        }
    }

    pub fn r_e_max(&self) -> f64 {
        self.r_e_max
    }

    pub fn r_i_max(&self) -> f64 {
        self.r_i_max
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    pub fn observe_extrinsic(&mut self, r: f64) {
        if r.is_finite() {
            self.r_e_max = self.r_e_max.max(r);
        }
    }

    /// Moves the environment-step counter forward.
    pub fn advance_to(&mut self, t: u64) -> Result<()> {
        if t < self.t {
            return Err(Error::invalid(format!(
                "intrinsic reward step went backwards: {} -> {t}",
                self.t
            )));
        }
        self.t = t;
        Ok(())
    }

    /// `λ·exp(−ηt)·(r_e_max / r_i_max)·(c + c′)/2` per sample. The batch's
    /// curiosity terms enter `r_i_max` before normalising.
    pub fn compute(&mut self, c: &[f64], c_next: &[f64]) -> Result<Vec<f64>> {
        if c.len() != c_next.len() {
            return Err(Error::shape(
                "intrinsic_reward",
                format!("{} curiosities vs {} next", c.len(), c_next.len()),
            ));
        }
        if let Some(v) = c.iter().chain(c_next).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("curiosity {v} outside [0, 1]")));
        }
        let terms: Vec<f64> = c.iter().zip(c_next).map(|(a, b)| 0.5 * (a + b)).collect();
        for &x in &terms {
            self.r_i_max = self.r_i_max.max(x);
        }
        let scale = self.lambda * (-self.eta * self.t as f64).exp() * self.r_e_max / self.r_i_max;
        Ok(terms.into_iter().map(|x| scale * x).collect())
    }

    /// The bound `λ·exp(−ηt)·r_e_max/r_i_max` on every value [`compute`](Self::compute) returns
    /// from a term no larger than 1.
    pub fn envelope(&self) -> f64 {
        self.lambda * (-self.eta * self.t as f64).exp() * self.r_e_max / self.r_i_max
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_ordered_combinations() {
        let all = ComponentToggles::all_combinations();
        assert_eq!(all.len(), 16);
        assert_eq!(all[0], ComponentToggles::NONE);
        assert_eq!(all[15], ComponentToggles::ALL);
        assert_eq!(all[0].label(), "CURL+");
        assert_eq!(all[15].label(), "CCLF");
        assert_eq!(all[8].label(), "selection");
        assert_eq!(all[5].label(), "prioritization+reward");
        for (i, t) in all.iter().enumerate() {
            assert_eq!(t.index() as usize, i);
        }
        let mut labels: Vec<String> = all.iter().map(|t| t.label()).collect();
        labels.dedup();
        assert_eq!(labels.len(), 16);
        assert!(ComponentToggles::from_index(16).is_err());
    }

    #[test]
    fn worked_example() {
        let mut s = IntrinsicRewardState::with_maxima(0.2, 2e-5, 0, 1.0, 0.5);
        let r = s.compute(&[0.5], &[0.5]).unwrap();
        assert!((r[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_curiosity_zero_reward() {
        let mut s = IntrinsicRewardState::with_maxima(0.2, 2e-5, 10, 3.0, 0.1);
        assert_eq!(s.compute(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn decays_with_steps() {
        let mut s = IntrinsicRewardState::with_maxima(0.2, 2e-5, 0, 1.0, 1.0);
        let early = s.compute(&[0.6], &[0.6]).unwrap()[0];
        s.advance_to(1_000_000).unwrap();
        let late = s.compute(&[0.6], &[0.6]).unwrap()[0];
        assert!(late < early * 1e-8);
        assert!(s.advance_to(5).is_err());
    }

    #[test]
    fn floors_and_maxima() {
        let mut s = IntrinsicRewardState::new(0.2, 0.0);
        assert_eq!(s.r_e_max(), REWARD_MAX_FLOOR);
        s.observe_extrinsic(-3.0);
        assert_eq!(s.r_e_max(), REWARD_MAX_FLOOR);
        s.observe_extrinsic(2.5);
        s.observe_extrinsic(1.0);
        assert_eq!(s.r_e_max(), 2.5);
        let r = s.compute(&[0.2, 0.8], &[0.4, 0.6]).unwrap();
        assert_eq!(s.r_i_max(), 0.7);
        assert!((r[1] - 0.2 * 2.5).abs() < 1e-12);
        assert!((r[0] - 0.2 * 2.5 * 0.3 / 0.7).abs() < 1e-12);
        assert!(s.compute(&[1.1], &[0.0]).is_err());
    }
}
