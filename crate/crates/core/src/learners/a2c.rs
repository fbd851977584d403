use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{a2c_losses, gae};
use super::{ComponentToggles, IntrinsicRewardState};
use crate::augment::{stack_views, CropSpec};
use crate::curiosity::{curiosity, weighted_contrastive_loss};
use crate::env::{Action, ActionSpace, Environment, Observation};
use crate::error::{Error, Result};
use crate::nn::{CategoricalActor, ContrastiveHead, Encoder, EncoderSpec, Module, ValueHead};
use crate::tensor::{clip_grad_norm, ema_update, zero_grad, Param, Real, RmsProp, Tape, Tensor, Var};

/// A2C settings, desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A2cHyper {
    /// Parallel environments `E`.
    pub envs: usize,
    /// Frames per environment per update `L`.
    pub rollout: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub contrastive_coef: f64,
    /// EMA rate of the key encoder.
    pub key_tau: f64,
    pub intrinsic_lambda: f64,
    pub intrinsic_eta: f64,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Multiplies the raw grid codes before encoding.
    pub obs_scale: f64,
}

impl Default for A2cHyper {
    fn default() -> Self {
        Self {
            envs: 8,
            rollout: 8,
            gamma: 0.99,
            gae_lambda: 0.95,
            entropy_coef: 0.001,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            lr: 5e-3,
            rms_alpha: 0.99,
            rms_eps: 0.05,
            contrastive_coef: 1e-4,
            key_tau: 0.001,
            intrinsic_lambda: 2e-4,
            intrinsic_eta: 2e-5,
            hidden: 128,
            feature_dim: 32,
            obs_scale: 0.1,
        }
    }
}

/// What one update did.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct A2cMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
    /// Zero when the step has no contrastive term.
    pub contrastive_loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// NaN when curiosity was not evaluated.
    pub mean_c: f64,
    pub mean_c_next: f64,
    pub mean_r_i: f64,
}

/// `L` frames from `E` environments, time-major: entry `t·E + e` is frame
/// `t` of environment `e`.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub envs: usize,
    pub obs: Vec<Observation>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Episode ended after this frame (terminated or truncated).
    pub done: Vec<bool>,
    /// The observation the action led to, before any reset.
    pub next_obs: Vec<Observation>,
    /// Observation of each environment after the last frame.
    pub last_obs: Vec<Observation>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.obs.len();
        if self.envs == 0 || n == 0 {
            return Err(Error::invalid("rollout must hold at least one frame per environment"));
        }
        if !n.is_multiple_of(self.envs)
            || self.actions.len() != n
            || self.rewards.len() != n
            || self.done.len() != n
            || self.next_obs.len() != n
            || self.last_obs.len() != self.envs
        {
            return Err(Error::shape(
                "rollout",
                format!(
                    "{n} obs, {} actions, {} rewards, {} done, {} next, {} last for {} envs",
                    self.actions.len(),
                    self.rewards.len(),
                    self.done.len(),
                    self.next_obs.len(),
                    self.last_obs.len(),
                    self.envs
                ),
            ));
        }
        Ok(())
    }
}

/// `E` environments stepped one after another, each reset with a seed drawn
/// from the collector's own generator.
pub struct RolloutCollector {
    envs: Vec<Box<dyn Environment>>,
    obs: Vec<Observation>,
    returns: Vec<f64>,
    seeds: ChaCha8Rng,
    frames: u64,
}

impl RolloutCollector {
    pub fn new(mut envs: Vec<Box<dyn Environment>>, seed: u64) -> Result<Self> {
        if envs.is_empty() {
            return Err(Error::invalid("collector needs at least one environment"));
        }
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let obs = envs.iter_mut().map(|e| e.reset(seeds.random())).collect();
        Ok(Self {
            returns: vec![0.0; envs.len()],
            envs,
            obs,
            seeds,
            frames: 0,
        })
    }

    /// Environment frames taken so far.
    pub fn frames(&self) -> u64 {
        self.frames
    }

    /// Runs `steps` frames in every environment with actions sampled from
    /// `agent`. Also returns the returns of episodes that finished.
    pub fn collect<R: Real>(
        &mut self,
        agent: &A2cAgent<R>,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<(Rollout, Vec<f64>)> {
        if steps == 0 {
            return Err(Error::invalid("rollout length must be at least 1"));
        }
        let e = self.envs.len();
        let mut r = Rollout {
            envs: e,
            obs: Vec::with_capacity(steps * e),
            actions: Vec::with_capacity(steps * e),
            rewards: Vec::with_capacity(steps * e),
            done: Vec::with_capacity(steps * e),
            next_obs: Vec::with_capacity(steps * e),
            last_obs: Vec::new(),
        };
        let mut finished = Vec::new();
        for _ in 0..steps {
            let refs: Vec<&Observation> = self.obs.iter().collect();
            let actions = agent.act(&refs, false, rng)?;
            for (k, env) in self.envs.iter_mut().enumerate() {
                let s = env.step(&Action::Discrete(actions[k]))?;
                self.returns[k] += s.reward;
                let done = s.done();
                let next = if done {
                    finished.push(std::mem::take(&mut self.returns[k]));
                    env.reset(self.seeds.random())
                } else {
                    s.observation.clone()
                };
                r.obs.push(std::mem::replace(&mut self.obs[k], next));
                r.actions.push(actions[k]);
                r.rewards.push(s.reward);
                r.done.push(done);
                r.next_obs.push(s.observation);
            }
            self.frames += e as u64;
        }
        r.last_obs = self.obs.clone();
        Ok((r, finished))
    }
}

/// Actor-critic over a shared embedding encoder, with a momentum key encoder
/// and bilinear head for the contrastive curiosity.
#[derive(Clone, Debug)]
pub struct A2cAgent<R: Real> {
    pub hyper: A2cHyper,
    pub encoder: Encoder<R>,
    pub key_encoder: Encoder<R>,
    pub actor: CategoricalActor<R>,
    pub value: ValueHead<R>,
    pub head: ContrastiveHead<R>,
    pub intrinsic: IntrinsicRewardState,
    opt: RmsProp<R>,
    obs_shape: [usize; 3],
    updates: u64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn to_f64<R: Real>(v: &[R]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Categorical draw from unnormalised logits by inverse CDF.
fn sample_logits<R: Real>(logits: &[R], rng: &mut impl Rng) -> usize {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let p: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let mut u = rng.random::<f64>() * p.iter().sum::<f64>();
    for (k, &pk) in p.iter().enumerate() {
        if u < pk {
            return k;
        }
        u -= pk;
    }
    p.len() - 1
}

fn argmax<R: Real>(v: &[R]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

/// Forward pass of a rollout: logits, values and the online features.
struct Forward {
    z: Var,
    logits: Var,
    values: Var,
}

impl<R: Real> A2cAgent<R> {
    pub fn new(hyper: A2cHyper, obs_shape: [usize; 3], space: ActionSpace, rng: &mut impl Rng) -> Result<Self> {
        let ActionSpace::Discrete { n } = space else {
            return Err(Error::Config("A2C needs a discrete action space".into()));
        };
        if hyper.envs == 0 || hyper.rollout == 0 {
            return Err(Error::Config("envs and rollout must be at least 1".into()));
        }
        if hyper.envs * hyper.rollout < 2 {
            return Err(Error::Config("contrastive batch needs at least 2 frames".into()));
        }
        let [height, width, channels] = obs_shape;
        let spec = EncoderSpec::Embedding {
            height,
            width,
            channels,
            hidden: hyper.hidden,
            feature_dim: hyper.feature_dim,
        };
        let encoder = Encoder::new(spec, rng);
        let actor = CategoricalActor::new(hyper.feature_dim, hyper.hidden, n, rng);
        let value = ValueHead::new(hyper.feature_dim, hyper.hidden, rng);
        let head = ContrastiveHead::new(hyper.feature_dim, rng);
        Ok(Self {
            key_encoder: encoder.clone(),
            encoder,
            actor,
            value,
            head,
            intrinsic: IntrinsicRewardState::new(hyper.intrinsic_lambda, hyper.intrinsic_eta),
            opt: RmsProp::new(R::lit(hyper.lr), R::lit(hyper.rms_alpha), R::lit(hyper.rms_eps)),
            obs_shape,
            updates: 0,
            hyper,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn stack(&self, obs: &[&Observation]) -> Result<Tensor<R>> {
        let spec = CropSpec::identity((self.obs_shape[0], self.obs_shape[1]));
        stack_views(obs, &vec![spec; obs.len()], R::lit(self.hyper.obs_scale))
    }

    fn embed(encoder: &Encoder<R>, x: Tensor<R>) -> Result<Tensor<R>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let z = encoder.forward(&mut tape, xv, false)?;
        Ok(tape.value(z).clone())
    }

    /// One action per observation: sampled, or the most likely when
    /// `deterministic`.
    pub fn act(&self, obs: &[&Observation], deterministic: bool, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let x = self.stack(obs)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let z = self.encoder.forward(&mut tape, xv, false)?;
        let logits = self.actor.logits(&mut tape, z, false)?;
        let l = tape.value(logits);
        Ok((0..l.rows())
            .map(|b| {
                if deterministic {
                    argmax(l.row(b))
                } else {
                    sample_logits(l.row(b), rng)
                }
            })
            .collect())
    }

    fn forward(&self, tape: &mut Tape<R>, x: Tensor<R>) -> Result<Forward> {
        let xv = tape.constant(x);
        let z = self.encoder.forward(tape, xv, true)?;
        let logits = self.actor.logits(tape, z, true)?;
        let values = self.value.forward(tape, z, true)?;
        Ok(Forward { z, logits, values })
    }

    fn last_values(&self, rollout: &Rollout) -> Result<Vec<R>> {
        let refs: Vec<&Observation> = rollout.last_obs.iter().collect();
        let mut tape = Tape::new();
        let xv = tape.constant(self.stack(&refs)?);
        let z = self.encoder.forward(&mut tape, xv, false)?;
        let v = self.value.forward(&mut tape, z, false)?;
        Ok(tape.value(v).data().to_vec())
    }

    fn advantages(&self, rollout: &Rollout, values: &[R], rewards: &[f64]) -> Result<(Vec<R>, Vec<R>)> {
        let r: Vec<R> = rewards.iter().map(|&v| R::lit(v)).collect();
        gae(
            &r,
            values,
            &self.last_values(rollout)?,
            &rollout.done,
            R::lit(self.hyper.gamma),
            R::lit(self.hyper.gae_lambda),
        )
    }

    /// Clips and applies the gradients of the encoder and heads, plus `W`
    /// when `with_head`. Returns the norm before clipping.
    fn apply(&mut self, grads: &crate::tensor::Gradients<R>, with_head: bool) -> Result<R> {
        let mut params = self.encoder.params_mut();
        params.extend(self.actor.params_mut());
        params.extend(self.value.params_mut());
        if with_head {
            params.extend(self.head.params_mut());
        }
        zero_grad(&mut params);
        grads.accumulate(&mut params);
        let norm = clip_grad_norm(&mut params, R::lit(self.hyper.max_grad_norm));
        self.opt.step(&mut params)?;
        Ok(norm)
    }

    /// Plain A2C on `rollout`: no curiosity, no contrastive term.
    pub fn a2c_step(&mut self, rollout: &Rollout) -> Result<A2cMetrics> {
        rollout.validate()?;
        let refs: Vec<&Observation> = rollout.obs.iter().collect();
        let x = self.stack(&refs)?;
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x)?;
        let values = tape.value(f.values).data().to_vec();
        let (adv, ret) = self.advantages(rollout, &values, &rollout.rewards)?;
        let h = &self.hyper;
        let losses = a2c_losses(
            &mut tape,
            f.logits,
            f.values,
            &rollout.actions,
            &adv,
            &ret,
            R::lit(h.entropy_coef),
            R::lit(h.value_coef),
        )?;
        let grads = tape.backward(losses.total)?;
        let norm = self.apply(&grads, false)?;
        self.updates += 1;
        Ok(A2cMetrics {
            policy_loss: tape.scalar(losses.policy).as_f64(),
            value_loss: tape.scalar(losses.value).as_f64(),
            entropy: tape.scalar(losses.entropy).as_f64(),
            total_loss: tape.scalar(losses.total).as_f64(),
            contrastive_loss: 0.0,
            grad_norm: norm.as_f64(),
            mean_c: f64::NAN,
            mean_c_next: f64::NAN,
            mean_r_i: 0.0,
        })
    }

    /// A2C with contrastive curiosity on duplicated (unaugmented) embeddings:
    /// query `f_θ(o)`, key `f_θ̄(o)`. Regularization weights the contrastive
    /// term by `c`; reward adds the intrinsic bonus before the advantages.
    /// Selection and prioritization have no effect here: there is one view
    /// and no replay.
    pub fn a2c_cclf_step(
        &mut self,
        rollout: &Rollout,
        toggles: ComponentToggles,
        env_step: u64,
    ) -> Result<A2cMetrics> {
        rollout.validate()?;
        let refs: Vec<&Observation> = rollout.obs.iter().collect();
        let next_refs: Vec<&Observation> = rollout.next_obs.iter().collect();
        let x = self.stack(&refs)?;
        let keys = Self::embed(&self.key_encoder, x.clone())?;
        let w = self.head.w.value.clone();

        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x)?;
        let c = curiosity(tape.value(f.z), &keys, &w)?;
        let c64 = to_f64(&c);

        let mut rewards = rollout.rewards.clone();
        let (mean_c_next, mean_r_i) = if toggles.reward {
            let xn = self.stack(&next_refs)?;
            let qn = Self::embed(&self.encoder, xn.clone())?;
            let kn = Self::embed(&self.key_encoder, xn)?;
            let c_next = to_f64(&curiosity(&qn, &kn, &w)?);
            for &r in &rollout.rewards {
                self.intrinsic.observe_extrinsic(r);
            }
            self.intrinsic.advance_to(env_step)?;
            let r_i = self.intrinsic.compute(&c64, &c_next)?;
            for (r, ri) in rewards.iter_mut().zip(&r_i) {
                *r += ri;
            }
            (mean(&c_next), mean(&r_i))
        } else {
            (f64::NAN, 0.0)
        };

        let values = tape.value(f.values).data().to_vec();
        let (adv, ret) = self.advantages(rollout, &values, &rewards)?;
        let h = self.hyper.clone();
        let losses = a2c_losses(
            &mut tape,
            f.logits,
            f.values,
            &rollout.actions,
            &adv,
            &ret,
            R::lit(h.entropy_coef),
            R::lit(h.value_coef),
        )?;
        let k = tape.constant(keys);
        let logits = self.head.logits(&mut tape, f.z, k, true)?;
        let weights = if toggles.regularization {
            c
        } else {
            vec![R::one(); rollout.len()]
        };
        let contrastive = weighted_contrastive_loss(&mut tape, logits, &weights)?;
        let scaled = tape.scale(contrastive, R::lit(h.contrastive_coef));
        let total = tape.add(losses.total, scaled)?;

        let grads = tape.backward(total)?;
        let norm = self.apply(&grads, true)?;

        let src: Vec<&Param<R>> = self.encoder.params();
        ema_update(&mut self.key_encoder.params_mut(), &src, R::lit(h.key_tau))?;
        self.updates += 1;
        Ok(A2cMetrics {
            policy_loss: tape.scalar(losses.policy).as_f64(),
            value_loss: tape.scalar(losses.value).as_f64(),
            entropy: tape.scalar(losses.entropy).as_f64(),
            total_loss: tape.scalar(total).as_f64(),
            contrastive_loss: tape.scalar(contrastive).as_f64(),
            grad_norm: norm.as_f64(),
            mean_c: mean(&c64),
            mean_c_next,
            mean_r_i,
        })
    }

    /// Every parameter under a unique name, key encoder prefixed with `target.`.
    pub fn named_params(&self) -> Vec<(String, &Param<R>)> {
        let mut out: Vec<(String, &Param<R>)> = Vec::new();
        for p in self.encoder.params() {
            out.push((p.name.clone(), p));
        }
        for p in self.actor.params() {
            out.push((p.name.clone(), p));
        }
        for p in self.value.params() {
            out.push((p.name.clone(), p));
        }
        for p in self.key_encoder.params() {
            out.push((format!("target.{}", p.name), p));
        }
        out.push((self.head.w.name.clone(), &self.head.w));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        let mut out: Vec<(String, &mut Param<R>)> = Vec::new();
        for p in self.encoder.params_mut() {
            out.push((p.name.clone(), p));
        }
        for p in self.actor.params_mut() {
            out.push((p.name.clone(), p));
        }
        for p in self.value.params_mut() {
            out.push((p.name.clone(), p));
        }
        for p in self.key_encoder.params_mut() {
            out.push((format!("target.{}", p.name), p));
        }
        out.push((self.head.w.name.clone(), &mut self.head.w));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{GridKind, GridWorld};

    fn setup(seed: u64, hyper: A2cHyper) -> (A2cAgent<f32>, RolloutCollector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let envs: Vec<Box<dyn Environment>> = (0..hyper.envs)
            .map(|_| Box::new(GridWorld::new(GridKind::Empty, 6).unwrap()) as Box<dyn Environment>)
            .collect();
        let shape = envs[0].observation_shape();
        let space = envs[0].action_space();
        let agent = A2cAgent::new(hyper, shape, space, &mut rng).unwrap();
        (agent, RolloutCollector::new(envs, seed).unwrap())
    }

    fn small() -> A2cHyper {
        A2cHyper {
            envs: 3,
            rollout: 4,
            hidden: 16,
            feature_dim: 8,
            ..A2cHyper::default()
        }
    }

    #[test]
    fn rollout_layout() {
        let (agent, mut col) = setup(0, small());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, _) = col.collect(&agent, 4, &mut rng).unwrap();
        assert_eq!(r.len(), 12);
        assert_eq!(col.frames(), 12);
        for t in 0..3 {
            for e in 0..3 {
                let i = t * 3 + e;
                if !r.done[i] {
                    assert_eq!(r.next_obs[i], r.obs[i + 3]);
                }
            }
        }
        assert!(col.collect(&agent, 0, &mut rng).is_err());
    }

    #[test]
    fn reward_off_without_contrastive_is_plain_a2c() {
        let mut hyper = small();
        hyper.contrastive_coef = 0.0;
        let (mut a, mut col) = setup(2, hyper);
        let mut b = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let toggles = ComponentToggles {
            reward: false,
            ..ComponentToggles::ALL
        };
        for step in 0..5 {
            let (r, _) = col.collect(&a, 4, &mut rng).unwrap();
            let ma = a.a2c_cclf_step(&r, toggles, step * 12).unwrap();
            let mb = b.a2c_step(&r).unwrap();
            assert_eq!(ma.policy_loss, mb.policy_loss);
            assert_eq!(ma.value_loss, mb.value_loss);
            assert_eq!(ma.total_loss, mb.total_loss);
            assert_eq!(ma.grad_norm, mb.grad_norm);
        }
        for p in [a.encoder.params(), a.actor.params(), a.value.params()].concat() {
            let q = b
                .named_params()
                .into_iter()
                .find(|(n, _)| *n == p.name)
                .unwrap()
                .1;
            assert_eq!(p.value, q.value, "{}", p.name);
        }
    }

    #[test]
    fn cclf_step_is_finite_and_reproducible() {
        let run = || {
            let (mut a, mut col) = setup(4, small());
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut out = Vec::new();
            for step in 0..4 {
                let (r, _) = col.collect(&a, 4, &mut rng).unwrap();
                out.push(a.a2c_cclf_step(&r, ComponentToggles::ALL, step * 12).unwrap());
            }
            out
        };
        let m = run();
        assert_eq!(m, run());
        for x in &m {
            assert!(x.total_loss.is_finite() && x.contrastive_loss.is_finite());
            assert!((0.0..=1.0).contains(&x.mean_c));
            assert!(x.mean_r_i >= 0.0);
            assert!(x.entropy > 0.0);
        }
    }

    #[test]
    fn key_encoder_moves_by_ema_only() {
        let (mut a, mut col) = setup(6, small());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let before: Vec<Tensor<f32>> = a.key_encoder.params().iter().map(|p| p.value.clone()).collect();
        let (r, _) = col.collect(&a, 4, &mut rng).unwrap();
        a.a2c_cclf_step(&r, ComponentToggles::ALL, 0).unwrap();
        let tau = a.hyper.key_tau as f32;
        for ((k, b), o) in a.key_encoder.params().iter().zip(&before).zip(a.encoder.params()) {
            assert!(k.grad.is_none());
            for ((&kv, &bv), &ov) in k.value.data().iter().zip(b.data()).zip(o.value.data()) {
                assert!((kv - ((1.0 - tau) * bv + tau * ov)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_action_is_argmax() {
        let (a, col) = setup(8, small());
        let refs: Vec<&Observation> = col.obs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d1 = a.act(&refs, true, &mut rng).unwrap();
        assert_eq!(d1, a.act(&refs, true, &mut rng).unwrap());
        assert!(d1.iter().all(|&k| k < 7));
    }

    #[test]
    fn sampler_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = [0.0f64, (2.0f64).ln(), f64::NEG_INFINITY];
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[sample_logits(&logits, &mut rng)] += 1;
        }
        assert_eq!(counts[2], 0);
        let p1 = counts[1] as f64 / 30_000.0;
        assert!((p1 - 2.0 / 3.0).abs() < 0.015);
    }
}
