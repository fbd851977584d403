use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{self, ActionSpace};
use crate::error::{Error, Result};
use crate::learners::{A2cHyper, ComponentToggles, SacHyper};

/// Which update rule drives a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Learner {
    /// SAC with the toggled curiosity components.
    SacCclf,
    /// A2C with the toggled curiosity components.
    A2cCclf,
    /// SAC with an InfoNCE auxiliary on `curl_views` crops.
    CurlBaseline,
    /// SAC with two crops per observation and target averaging.
    DrqBaseline,
    /// A2C without curiosity or contrastive term.
    A2cBaseline,
}

impl Learner {
    pub fn is_a2c(&self) -> bool {
        matches!(self, Learner::A2cCclf | Learner::A2cBaseline)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Learner::SacCclf => "sac-cclf",
            Learner::A2cCclf => "a2c-cclf",
            Learner::CurlBaseline => "curl-baseline",
            Learner::DrqBaseline => "drq-baseline",
            Learner::A2cBaseline => "a2c-baseline",
        }
    }
}

/// One experiment, read from flat JSON. Missing keys take the defaults below;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `pendulum`, `empty-N` or `doorkey-N`.
    pub env: String,
    pub learner: Learner,
    pub seed: u64,
    /// Environment steps (physics frames, action repeat included).
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub selection: bool,
    pub prioritization: bool,
    pub regularization: bool,
    pub reward: bool,
    /// Environment steps of uniform random actions before SAC updates start.
    pub init_steps: u64,
    pub replay_capacity: usize,
    /// Crops per observation for `curl-baseline`.
    pub curl_views: usize,
    /// Write `checkpoint.bin` at the end of the run.
    pub checkpoint: bool,
    /// Write every evaluation frame as a PGM image under `frames/`.
    pub dump_frames: bool,

    pub gamma: f64,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Defaults to 0.2 for SAC learners and 2e-4 for A2C learners.
    pub intrinsic_lambda: Option<f64>,
    pub intrinsic_eta: f64,

    pub batch_size: usize,
    pub views: usize,
    pub crop: usize,
    pub filters: usize,
    pub init_alpha: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub encoder_lr: f64,
    pub w_lr: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub actor_update_freq: u64,
    pub target_update_freq: u64,
    pub critic_tau: f64,
    pub encoder_tau: f64,
    pub priority_beta: f64,
    /// Defaults to `−|A|`.
    pub target_entropy: Option<f64>,

    pub envs: usize,
    pub rollout: usize,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub a2c_lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub contrastive_coef: f64,
    pub key_tau: f64,
    pub obs_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = SacHyper::default();
        let a = A2cHyper::default();
        Self {
            env: "pendulum".into(),
            learner: Learner::SacCclf,
            seed: 0,
            total_steps: 50_000,
            eval_interval: 2_000,
            eval_episodes: 10,
            selection: true,
            prioritization: true,
            regularization: true,
            reward: true,
            init_steps: 1_000,
            replay_capacity: 20_000,
            curl_views: 1,
            checkpoint: true,
            dump_frames: false,
            gamma: s.gamma,
            hidden: s.hidden,
            feature_dim: s.feature_dim,
            intrinsic_lambda: None,
            intrinsic_eta: s.intrinsic_eta,
            batch_size: s.batch_size,
            views: s.views,
            crop: s.crop,
            filters: s.filters,
            init_alpha: s.init_alpha,
            actor_lr: s.actor_lr,
            critic_lr: s.critic_lr,
            encoder_lr: s.encoder_lr,
            w_lr: s.w_lr,
            alpha_lr: s.alpha_lr,
            alpha_beta1: s.alpha_beta1,
            actor_update_freq: s.actor_update_freq,
            target_update_freq: s.target_update_freq,
            critic_tau: s.critic_tau,
            encoder_tau: s.encoder_tau,
            priority_beta: s.priority_beta,
            target_entropy: None,
            envs: a.envs,
            rollout: a.rollout,
            gae_lambda: a.gae_lambda,
            entropy_coef: a.entropy_coef,
            value_coef: a.value_coef,
            max_grad_norm: a.max_grad_norm,
            a2c_lr: a.lr,
            rms_alpha: a.rms_alpha,
            rms_eps: a.rms_eps,
            contrastive_coef: a.contrastive_coef,
            key_tau: a.key_tau,
            obs_scale: a.obs_scale,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Defaults for the learning criteria on the A2C path.
    pub fn a2c(env: &str) -> Self {
        Self {
            env: env.into(),
            learner: Learner::A2cCclf,
            ..Self::default()
        }
    }

    pub fn toggles(&self) -> ComponentToggles {
        ComponentToggles {
            selection: self.selection,
            prioritization: self.prioritization,
            regularization: self.regularization,
            reward: self.reward,
        }
    }

    pub fn set_toggles(&mut self, t: ComponentToggles) {
        self.selection = t.selection;
        self.prioritization = t.prioritization;
        self.regularization = t.regularization;
        self.reward = t.reward;
    }

    pub fn intrinsic_lambda(&self) -> f64 {
        self.intrinsic_lambda
            .unwrap_or(if self.learner.is_a2c() { 2e-4 } else { 0.2 })
    }

    /// The config with learner-dependent defaults filled in, as echoed next
    /// to results.
    pub fn resolved(&self) -> Self {
        Self {
            intrinsic_lambda: Some(self.intrinsic_lambda()),
            ..self.clone()
        }
    }

    /// Run-group name used by plots and summaries.
    pub fn label(&self) -> String {
        match self.learner {
            Learner::SacCclf => self.toggles().label(),
            Learner::A2cCclf => format!("A2C-{}", self.toggles().label()),
            Learner::CurlBaseline if self.curl_views <= 1 => "CURL".into(),
            Learner::CurlBaseline => format!("CURL+DrQ[{0},{0}]", self.curl_views),
            Learner::DrqBaseline => "DrQ".into(),
            Learner::A2cBaseline => "A2C".into(),
        }
    }

    pub fn sac_hyper(&self) -> SacHyper {
        SacHyper {
            batch_size: self.batch_size,
            views: self.views,
            crop: self.crop,
            gamma: self.gamma,
            init_alpha: self.init_alpha,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            encoder_lr: self.encoder_lr,
            w_lr: self.w_lr,
            alpha_lr: self.alpha_lr,
            alpha_beta1: self.alpha_beta1,
            actor_update_freq: self.actor_update_freq,
            target_update_freq: self.target_update_freq,
            critic_tau: self.critic_tau,
            encoder_tau: self.encoder_tau,
            priority_beta: self.priority_beta,
            intrinsic_lambda: self.intrinsic_lambda(),
            intrinsic_eta: self.intrinsic_eta,
            hidden: self.hidden,
            feature_dim: self.feature_dim,
            filters: self.filters,
            target_entropy: self.target_entropy,
        }
    }

    pub fn a2c_hyper(&self) -> A2cHyper {
        A2cHyper {
            envs: self.envs,
            rollout: self.rollout,
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
            entropy_coef: self.entropy_coef,
            value_coef: self.value_coef,
            max_grad_norm: self.max_grad_norm,
            lr: self.a2c_lr,
            rms_alpha: self.rms_alpha,
            rms_eps: self.rms_eps,
            contrastive_coef: self.contrastive_coef,
            key_tau: self.key_tau,
            intrinsic_lambda: self.intrinsic_lambda(),
            intrinsic_eta: self.intrinsic_eta,
            hidden: self.hidden,
            feature_dim: self.feature_dim,
            obs_scale: self.obs_scale,
        }
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let env = env::make(&self.env)?;
        match (self.learner.is_a2c(), env.action_space()) {
            (true, ActionSpace::Discrete { .. }) | (false, ActionSpace::Continuous { .. }) => {}
            _ => {
                return bad(format!(
                    "learner {} does not fit the action space of `{}`",
                    self.learner.name(),
                    self.env
                ))
            }
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("eval_interval and eval_episodes must be positive".into());
        }
        let rates = [
            ("gamma", self.gamma),
            ("priority_beta", self.priority_beta),
            ("critic_tau", self.critic_tau),
            ("encoder_tau", self.encoder_tau),
            ("key_tau", self.key_tau),
            ("gae_lambda", self.gae_lambda),
            ("rms_alpha", self.rms_alpha),
            ("alpha_beta1", self.alpha_beta1),
        ];
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        let positive = [
            ("init_alpha", self.init_alpha),
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("encoder_lr", self.encoder_lr),
            ("w_lr", self.w_lr),
            ("alpha_lr", self.alpha_lr),
            ("a2c_lr", self.a2c_lr),
            ("rms_eps", self.rms_eps),
            ("max_grad_norm", self.max_grad_norm),
            ("obs_scale", self.obs_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        let non_negative = [
            ("intrinsic_lambda", self.intrinsic_lambda()),
            ("intrinsic_eta", self.intrinsic_eta),
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("contrastive_coef", self.contrastive_coef),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be non-negative"));
            }
        }
        let sizes = [
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("filters", self.filters),
            ("crop", self.crop),
            ("envs", self.envs),
            ("rollout", self.rollout),
            ("curl_views", self.curl_views),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.actor_update_freq == 0 || self.target_update_freq == 0 {
            return bad("update frequencies must be positive".into());
        }
        if self.learner.is_a2c() {
            if self.envs * self.rollout < 2 {
                return bad("envs × rollout must be at least 2".into());
            }
        } else {
            let [h, w, _] = env.observation_shape();
            if self.crop > h.min(w) {
                return bad(format!("crop {} exceeds the {h}x{w} frame", self.crop));
            }
            if self.batch_size < 2 || self.views < 2 {
                return bad("batch_size and views must be at least 2".into());
            }
            if self.replay_capacity < self.batch_size {
                return bad("replay_capacity must hold one batch".into());
            }
            let repeat = env.action_repeat() as u64;
            if self.init_steps.div_ceil(repeat) < self.batch_size as u64 {
                return bad(format!(
                    "init_steps = {} yields fewer transitions than one batch of {}",
                    self.init_steps, self.batch_size
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.intrinsic_lambda(), 0.2);
        assert_eq!(ExperimentConfig::a2c("empty-6").intrinsic_lambda(), 2e-4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ExperimentConfig::from_json(r#"{"batch": 3}"#).unwrap_err();
        assert!(e.to_string().contains("unknown field"), "{e}");
    }

    #[test]
    fn learner_must_fit_env() {
        assert!(ExperimentConfig::from_json(r#"{"learner": "a2c-cclf"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"learner": "a2c-cclf", "env": "empty-6"}"#).is_ok());
        assert!(ExperimentConfig::from_json(r#"{"env": "doorkey-6"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"env": "mars"}"#).is_err());
    }

    #[test]
    fn bad_values_rejected() {
        for text in [
            r#"{"gamma": 1.5}"#,
            r#"{"crop": 49}"#,
            r#"{"eval_interval": 0}"#,
            r#"{"init_steps": 100}"#,
            r#"{"actor_lr": -1}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let c = ExperimentConfig::a2c("empty-6").resolved();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn labels() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.label(), "CCLF");
        c.set_toggles(ComponentToggles::NONE);
        assert_eq!(c.label(), "CURL+");
        c.learner = Learner::CurlBaseline;
        assert_eq!(c.label(), "CURL");
        c.curl_views = 2;
        assert_eq!(c.label(), "CURL+DrQ[2,2]");
    }
}
