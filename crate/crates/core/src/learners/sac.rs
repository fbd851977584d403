use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::losses::{
    actor_and_alpha_losses, averaged_target, bellman_target, drq_critic_loss, regularized_critic_loss,
    regularized_target, soft_value, TwinQ,
};
use super::{ComponentToggles, IntrinsicRewardState};
use crate::augment::{stack_views, CropSpec};
use crate::curiosity::{curiosity, info_nce_loss, select_max_curiosity, weighted_contrastive_loss, Selection};
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::{ContrastiveHead, CriticPair, Encoder, EncoderSpec, GaussianActor, Module};
use crate::replay::ReplayBuffer;
use crate::tensor::{ema_update, zero_grad, Adam, Gradients, Param, Real, Tape, Tensor};

/// SAC settings, desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacHyper {
    pub batch_size: usize,
    /// Augmented views per observation when selection is on (`K = M`).
    pub views: usize,
    /// Side of the square random crop.
    pub crop: usize,
    pub gamma: f64,
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
    /// Momentum of the prioritisation weights.
    pub priority_beta: f64,
    pub intrinsic_lambda: f64,
    pub intrinsic_eta: f64,
    pub hidden: usize,
    pub feature_dim: usize,
    pub filters: usize,
    /// Defaults to `−|A|`.
    pub target_entropy: Option<f64>,
}

impl Default for SacHyper {
    fn default() -> Self {
        Self {
            batch_size: 64,
            views: 5,
            crop: 40,
            gamma: 0.99,
            init_alpha: 0.1,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            encoder_lr: 1e-3,
            w_lr: 1e-4,
            alpha_lr: 1e-4,
            alpha_beta1: 0.5,
            actor_update_freq: 2,
            target_update_freq: 2,
            critic_tau: 0.01,
            encoder_tau: 0.05,
            priority_beta: 0.99,
            intrinsic_lambda: 0.2,
            intrinsic_eta: 2e-5,
            hidden: 128,
            feature_dim: 32,
            filters: 16,
            target_entropy: None,
        }
    }
}

/// What one update did.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SacMetrics {
    pub critic_loss: f64,
    /// Present on steps that updated the actor.
    pub actor_loss: Option<f64>,
    pub alpha_loss: Option<f64>,
    pub alpha: f64,
    /// Zero when the step has no contrastive term.
    pub contrastive_loss: f64,
    pub mean_c: f64,
    /// NaN when only one next view exists.
    pub mean_c_next: f64,
    pub mean_r_i: f64,
}

/// Pixel SAC with a momentum key encoder and a bilinear contrastive head.
/// The key encoder doubles as the target critic's encoder.
#[derive(Clone, Debug)]
pub struct SacAgent<R: Real> {
    pub hyper: SacHyper,
    pub encoder: Encoder<R>,
    pub critic: CriticPair<R>,
    pub actor: GaussianActor<R>,
    pub target_encoder: Encoder<R>,
    pub target_critic: CriticPair<R>,
    pub head: ContrastiveHead<R>,
    pub log_alpha: Param<R>,
    pub intrinsic: IntrinsicRewardState,
    critic_opt: Adam<R>,
    actor_opt: Adam<R>,
    alpha_opt: Adam<R>,
    encoder_opt: Adam<R>,
    w_opt: Adam<R>,
    frame: (usize, usize),
    action_dim: usize,
    updates: u64,
}

/// The replayed columns of one minibatch.
struct Batch<'a, R> {
    obs: Vec<&'a Observation>,
    next: Vec<&'a Observation>,
    actions: Tensor<R>,
    rewards: Vec<f64>,
    done: Vec<bool>,
}

impl<'a, R: Real> Batch<'a, R> {
    fn gather(buffer: &'a ReplayBuffer, idx: &[usize], action_dim: usize) -> Result<Self> {
        let mut actions = Vec::with_capacity(idx.len() * action_dim);
        for &i in idx {
            let a = &buffer.get(i).action;
            if a.len() != action_dim {
                return Err(Error::shape(
                    "replay batch",
                    format!("stored action of length {} for dimension {action_dim}", a.len()),
                ));
            }
            actions.extend(a.iter().map(|&v| R::lit(v as f64)));
        }
        Ok(Self {
            obs: idx.iter().map(|&i| &buffer.get(i).obs).collect(),
            next: idx.iter().map(|&i| &buffer.get(i).next_obs).collect(),
            actions: Tensor::new(&[idx.len(), action_dim], actions)?,
            rewards: idx.iter().map(|&i| buffer.get(i).reward as f64).collect(),
            done: idx.iter().map(|&i| buffer.get(i).done).collect(),
        })
    }
}

fn to_f64<R: Real>(v: &[R]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Zeroes, fills and applies one optimiser step to `params`.
fn apply<R: Real>(opt: &mut Adam<R>, grads: &Gradients<R>, params: &mut [&mut Param<R>]) -> Result<()> {
    zero_grad(params);
    grads.accumulate(params);
    opt.step(params)
}

/// Per-sample choice between views: row `b` uses `crops[pick[b]][b]`.
fn picked_specs(crops: &[Vec<CropSpec>], pick: &[usize]) -> Vec<CropSpec> {
    pick.iter().enumerate().map(|(b, &v)| crops[v][b]).collect()
}

impl<R: Real> SacAgent<R> {
    /// Builds the networks for `[h, w, c]` frames and an `action_dim`-dimensional
    /// action space. Target networks start as exact copies.
    pub fn new(hyper: SacHyper, obs_shape: [usize; 3], action_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let [h, w, c] = obs_shape;
        if hyper.crop == 0 || hyper.crop > h.min(w) {
            return Err(Error::Config(format!("crop {} does not fit {h}x{w} frames", hyper.crop)));
        }
        if hyper.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if hyper.views < 2 {
            return Err(Error::Config("views must be at least 2".into()));
        }
        if action_dim == 0 {
            return Err(Error::Config("action_dim must be positive".into()));
        }
        let spec = EncoderSpec::Pixel {
            size: hyper.crop,
            channels: c,
            filters: hyper.filters,
            feature_dim: hyper.feature_dim,
        };
        let encoder = Encoder::new(spec, rng);
        let critic = CriticPair::new(hyper.feature_dim, action_dim, hyper.hidden, rng);
        let actor = GaussianActor::new(hyper.feature_dim, hyper.hidden, action_dim, rng);
        let head = ContrastiveHead::new(hyper.feature_dim, rng);
        let log_alpha = Param::new("log_alpha", Tensor::scalar(R::lit(hyper.init_alpha.ln())));
        let lr = R::lit;
        Ok(Self {
            target_encoder: encoder.clone(),
            target_critic: critic.clone(),
            encoder,
            critic,
            actor,
            head,
            log_alpha,
            intrinsic: IntrinsicRewardState::new(hyper.intrinsic_lambda, hyper.intrinsic_eta),
            critic_opt: Adam::new(lr(hyper.critic_lr)),
            actor_opt: Adam::new(lr(hyper.actor_lr)),
            alpha_opt: Adam::with_betas(lr(hyper.alpha_lr), lr(hyper.alpha_beta1), lr(0.999)),
            encoder_opt: Adam::new(lr(hyper.encoder_lr)),
            w_opt: Adam::new(lr(hyper.w_lr)),
            frame: (h, w),
            action_dim,
            updates: 0,
            hyper,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.value.data()[0].as_f64().exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn target_entropy(&self) -> f64 {
        self.hyper.target_entropy.unwrap_or(-(self.action_dim as f64))
    }

    fn scale(&self) -> R {
        R::lit(1.0 / 255.0)
    }

    fn crop_size(&self) -> (usize, usize) {
        (self.hyper.crop, self.hyper.crop)
    }

    /// Action for one frame stack seen through the centre crop: `tanh(μ)` when
    /// `deterministic`, otherwise a policy sample.
    pub fn act(&self, obs: &Observation, deterministic: bool, rng: &mut impl Rng) -> Result<Vec<f32>> {
        let spec = CropSpec::centered(self.frame, self.crop_size())?;
        let x = stack_views(&[obs], &[spec], self.scale())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let z = self.encoder.forward(&mut tape, xv, false)?;
        let a = if deterministic {
            self.actor.mean_action(&mut tape, z)?
        } else {
            let noise = self.noise(1, rng)?;
            self.actor.sample(&mut tape, z, false, noise)?.action
        };
        Ok(tape.value(a).data().iter().map(|v| v.as_f64() as f32).collect())
    }

    fn noise(&self, batch: usize, rng: &mut impl Rng) -> Result<Tensor<R>> {
        let n = batch * self.action_dim;
        let data = (0..n).map(|_| R::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        Tensor::new(&[batch, self.action_dim], data)
    }

    /// `views × batch` random crops, drawn view-major.
    fn draw_crops(&self, views: usize, batch: usize, rng: &mut impl Rng) -> Result<Vec<Vec<CropSpec>>> {
        (0..views)
            .map(|_| {
                (0..batch)
                    .map(|_| CropSpec::random(self.frame, self.crop_size(), rng))
                    .collect()
            })
            .collect()
    }

    fn stack(&self, obs: &[&Observation], specs: &[CropSpec]) -> Result<Tensor<R>> {
        stack_views(obs, specs, self.scale())
    }

    fn embed(encoder: &Encoder<R>, x: Tensor<R>) -> Result<Tensor<R>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let z = encoder.forward(&mut tape, xv, false)?;
        Ok(tape.value(z).clone())
    }

    /// Soft value of one next view: the actor sees the online embedding, the
    /// target critic the target embedding.
    fn next_value(&self, z_online: Tensor<R>, z_target: Tensor<R>, noise: Tensor<R>) -> Result<Vec<R>> {
        let mut tape = Tape::new();
        let s = tape.constant(z_online);
        let sample = self.actor.sample(&mut tape, s, false, noise)?;
        let st = tape.constant(z_target);
        let (q1, q2) = self.target_critic.forward(&mut tape, st, sample.action, false)?;
        let alpha = R::lit(self.alpha());
        soft_value(
            tape.value(q1).data(),
            tape.value(q2).data(),
            tape.value(sample.log_prob).data(),
            alpha,
        )
    }

    fn update_critic(&mut self, grads: &Gradients<R>) -> Result<()> {
        let mut p = self.encoder.params_mut();
        p.extend(self.critic.params_mut());
        apply(&mut self.critic_opt, grads, &mut p)
    }

    /// Actor and temperature step on detached features. Returns the two losses.
    fn update_actor_and_alpha(&mut self, z: Tensor<R>, rng: &mut impl Rng) -> Result<(f64, f64)> {
        let noise = self.noise(z.rows(), rng)?;
        let mut tape = Tape::new();
        let s = tape.constant(z);
        let sample = self.actor.sample(&mut tape, s, true, noise)?;
        let (q1, q2) = self.critic.forward(&mut tape, s, sample.action, false)?;
        let la = tape.bind(&self.log_alpha, true);
        let target = R::lit(self.target_entropy());
        let (actor_loss, alpha_loss) = actor_and_alpha_losses(&mut tape, q1, q2, sample.log_prob, la, target)?;
        let ga = tape.backward(actor_loss)?;
        apply(&mut self.actor_opt, &ga, &mut self.actor.params_mut())?;
        let gl = tape.backward(alpha_loss)?;
        apply(&mut self.alpha_opt, &gl, &mut [&mut self.log_alpha])?;
        Ok((tape.scalar(actor_loss).as_f64(), tape.scalar(alpha_loss).as_f64()))
    }

    /// Encoder and `W` step on the contrastive loss of `queries` (graph on
    /// `tape`) against constant `keys`.
    fn update_contrastive(&mut self, tape: &mut Tape<R>, loss: crate::tensor::Var) -> Result<f64> {
        let g = tape.backward(loss)?;
        apply(&mut self.encoder_opt, &g, &mut self.encoder.params_mut())?;
        apply(&mut self.w_opt, &g, &mut [&mut self.head.w])?;
        Ok(tape.scalar(loss).as_f64())
    }

    fn sync_targets(&mut self) -> Result<()> {
        let tau_c = R::lit(self.hyper.critic_tau);
        let tau_e = R::lit(self.hyper.encoder_tau);
        let src: Vec<&Param<R>> = self.critic.params();
        ema_update(&mut self.target_critic.params_mut(), &src, tau_c)?;
        let src: Vec<&Param<R>> = self.encoder.params();
        ema_update(&mut self.target_encoder.params_mut(), &src, tau_e)
    }

    fn after_update(&mut self) -> Result<()> {
        if self.updates.is_multiple_of(self.hyper.target_update_freq.max(1)) {
            self.sync_targets()?;
        }
        self.updates += 1;
        Ok(())
    }

    fn actor_due(&self) -> bool {
        self.updates.is_multiple_of(self.hyper.actor_update_freq.max(1))
    }

    /// One CCLF update on a minibatch from `buffer`.
    ///
    /// `env_step` drives the intrinsic-reward decay. With every toggle off this
    /// performs exactly the computation of [`baseline_step`](Self::baseline_step)
    /// with two views and the contrastive term.
    pub fn cclf_step(
        &mut self,
        buffer: &mut ReplayBuffer,
        toggles: ComponentToggles,
        env_step: u64,
        rng: &mut impl Rng,
    ) -> Result<SacMetrics> {
        let b = self.hyper.batch_size;
        let idx = if toggles.prioritization {
            buffer.sample(b, rng)?
        } else {
            buffer.sample_uniform(b, rng)?
        };
        let batch: Batch<R> = Batch::gather(buffer, &idx, self.action_dim)?;
        let m = if toggles.selection { self.hyper.views } else { 2 };
        let crops = self.draw_crops(m, b, rng)?;
        let crops_next = self.draw_crops(m, b, rng)?;
        // Views are i.i.d. crops, so the fixed query view 0 is a uniformly
        // random one; o and o' use independent crops.
        let (i, i_next) = (0, 0);
        let w = self.head.w.value.clone();

        let x_i = self.stack(&batch.obs, &crops[i])?;
        let mut keys = Vec::with_capacity(m);
        for (v, specs) in crops.iter().enumerate() {
            keys.push(if v == i {
                Tensor::zeros(&[0])
            } else {
                Self::embed(&self.target_encoder, self.stack(&batch.obs, specs)?)?
            });
        }
        let keys_next = crops_next
            .iter()
            .map(|specs| Self::embed(&self.target_encoder, self.stack(&batch.next, specs)?))
            .collect::<Result<Vec<_>>>()?;
        let q_next = Self::embed(&self.encoder, self.stack(&batch.next, &crops_next[i_next])?)?;

        let mut tape = Tape::new();
        let xv = tape.constant(x_i.clone());
        let z_i = self.encoder.forward(&mut tape, xv, true)?;
        let query = tape.value(z_i).clone();
        keys[i] = query.clone();

        let (sel, sel_next) = if toggles.selection {
            (
                select_max_curiosity(&query, &keys, &w, i)?,
                select_max_curiosity(&q_next, &keys_next, &w, i_next)?,
            )
        } else {
            (
                Selection {
                    j: vec![1; b],
                    c: curiosity(&query, &keys[1], &w)?,
                },
                Selection {
                    j: vec![1; b],
                    c: curiosity(&q_next, &keys_next[1], &w)?,
                },
            )
        };
        let (c, c_next) = (to_f64(&sel.c), to_f64(&sel_next.c));

        let r_i = if toggles.reward {
            for &r in &batch.rewards {
                self.intrinsic.observe_extrinsic(r);
            }
            self.intrinsic.advance_to(env_step)?;
            self.intrinsic.compute(&c, &c_next)?
        } else {
            vec![0.0; b]
        };
        let reward: Vec<R> = batch
            .rewards
            .iter()
            .zip(&r_i)
            .map(|(&re, &ri)| if toggles.reward { R::lit(re + ri) } else { R::lit(re) })
            .collect();


        let noise_i = self.noise(b, rng)?;
        let t_i = self.next_value(q_next, keys_next[i_next].clone(), noise_i)?;
        let x_next_j = self.stack(&batch.next, &picked_specs(&crops_next, &sel_next.j))?;
        let z_next_j = Self::embed(&self.encoder, x_next_j)?;
        let key_refs: Vec<&Tensor<R>> = keys_next.iter().collect();
        let zt_next_j = Tensor::gather_rows(&key_refs, &sel_next.j)?;
        let noise_j = self.noise(b, rng)?;
        let t_j = self.next_value(z_next_j, zt_next_j, noise_j)?;
        let target = if toggles.regularization {
            regularized_target(&t_i, &t_j, &sel_next.c)?
        } else {
            averaged_target(&[t_i, t_j])?
        };
        let y = bellman_target(&reward, &batch.done, R::lit(self.hyper.gamma), &target)?;

        let x_j = self.stack(&batch.obs, &picked_specs(&crops, &sel.j))?;
        let xjv = tape.constant(x_j);
        let z_j = self.encoder.forward(&mut tape, xjv, true)?;
        let a = tape.constant(batch.actions.clone());
        let (q1i, q2i) = self.critic.forward(&mut tape, z_i, a, true)?;
        let (q1j, q2j) = self.critic.forward(&mut tape, z_j, a, true)?;
        let yv = tape.constant(Tensor::new(&[b], y)?);
        let qi = TwinQ { q1: q1i, q2: q2i };
        let qj = TwinQ { q1: q1j, q2: q2j };
        let critic_loss = if toggles.regularization {
            regularized_critic_loss(&mut tape, qi, qj, yv, &sel.c)?
        } else {
            drq_critic_loss(&mut tape, &[qi, qj], yv)?
        };
        let grads = tape.backward(critic_loss)?;
        let critic_loss = tape.scalar(critic_loss).as_f64();
        self.update_critic(&grads)?;

        let mut tape = Tape::new();
        let xv = tape.constant(x_i);
        let z = self.encoder.forward(&mut tape, xv, true)?;
        let (actor_loss, alpha_loss) = if self.actor_due() {
            let (a, l) = self.update_actor_and_alpha(tape.value(z).clone(), rng)?;
            (Some(a), Some(l))
        } else {
            (None, None)
        };
        let key_refs: Vec<&Tensor<R>> = keys.iter().collect();
        let k = tape.constant(Tensor::gather_rows(&key_refs, &sel.j)?);
        let logits = self.head.logits(&mut tape, z, k, true)?;
        let weights = if toggles.regularization {
            sel.c.clone()
        } else {
            vec![R::one(); b]
        };
        let loss = weighted_contrastive_loss(&mut tape, logits, &weights)?;
        let contrastive_loss = self.update_contrastive(&mut tape, loss)?;
        self.after_update()?;
        drop(batch);
        if toggles.prioritization {
            for (k, &slot) in idx.iter().enumerate() {
                buffer.update_weight(slot, c[k], c_next[k], self.hyper.priority_beta)?;
            }
        }

        Ok(SacMetrics {
            critic_loss,
            actor_loss,
            alpha_loss,
            alpha: self.alpha(),
            contrastive_loss,
            mean_c: mean(&c),
            mean_c_next: mean(&c_next),
            mean_r_i: mean(&r_i),
        })
    }

    /// One update of the reference learners on uniform replay: critics on
    /// `views` crops of `o` against the mean target over `views` crops of `o′`,
    /// plus, when `contrastive`, InfoNCE between crop 0 (query) and crop 1
    /// (key) of `o`. `views = 1` with the contrastive term is CURL; `views = 2`
    /// is the CURL+DrQ[2,2] hybrid; `views = 2` without it is DrQ.
    pub fn baseline_step(
        &mut self,
        buffer: &mut ReplayBuffer,
        views: usize,
        contrastive: bool,
        rng: &mut impl Rng,
    ) -> Result<SacMetrics> {
        if views == 0 {
            return Err(Error::invalid("baseline needs at least one view"));
        }
        let b = self.hyper.batch_size;
        let idx = buffer.sample_uniform(b, rng)?;
        let batch: Batch<R> = Batch::gather(buffer, &idx, self.action_dim)?;
        let crops = self.draw_crops(views.max(2), b, rng)?;
        let crops_next = self.draw_crops(views, b, rng)?;
        let w = self.head.w.value.clone();

        let positive = Self::embed(&self.target_encoder, self.stack(&batch.obs, &crops[1])?)?;
        let mut targets = Vec::with_capacity(views);
        let mut next_online = Vec::with_capacity(views);
        let mut next_target = Vec::with_capacity(views);
        for specs in &crops_next {
            let x = self.stack(&batch.next, specs)?;
            next_online.push(Self::embed(&self.encoder, x.clone())?);
            next_target.push(Self::embed(&self.target_encoder, x)?);
        }
        for (zo, zt) in next_online.iter().zip(&next_target) {
            let noise = self.noise(b, rng)?;
            targets.push(self.next_value(zo.clone(), zt.clone(), noise)?);
        }
        let reward: Vec<R> = batch.rewards.iter().map(|&r| R::lit(r)).collect();
        let target = averaged_target(&targets)?;
        let y = bellman_target(&reward, &batch.done, R::lit(self.hyper.gamma), &target)?;

        let mut tape = Tape::new();
        let a = tape.constant(batch.actions.clone());
        let mut zs = Vec::with_capacity(views);
        for specs in crops.iter().take(views) {
            let xv = tape.constant(self.stack(&batch.obs, specs)?);
            zs.push(self.encoder.forward(&mut tape, xv, true)?);
        }
        let query = tape.value(zs[0]).clone();
        let mut qs = Vec::with_capacity(views);
        for z in zs {
            let (q1, q2) = self.critic.forward(&mut tape, z, a, true)?;
            qs.push(TwinQ { q1, q2 });
        }
        let yv = tape.constant(Tensor::new(&[b], y)?);
        let critic_loss = drq_critic_loss(&mut tape, &qs, yv)?;
        let grads = tape.backward(critic_loss)?;
        let critic_loss = tape.scalar(critic_loss).as_f64();
        self.update_critic(&grads)?;

        let c = to_f64(&curiosity(&query, &positive, &w)?);
        let c_next = if views >= 2 {
            to_f64(&curiosity(&next_online[0], &next_target[1], &w)?)
        } else {
            vec![f64::NAN]
        };

        let mut tape = Tape::new();
        let xv = tape.constant(self.stack(&batch.obs, &crops[0])?);
        let z = self.encoder.forward(&mut tape, xv, contrastive)?;
        let (actor_loss, alpha_loss) = if self.actor_due() {
            let (a, l) = self.update_actor_and_alpha(tape.value(z).clone(), rng)?;
            (Some(a), Some(l))
        } else {
            (None, None)
        };
        let contrastive_loss = if contrastive {
            let k = tape.constant(positive);
            let logits = self.head.logits(&mut tape, z, k, true)?;
            let loss = info_nce_loss(&mut tape, logits)?;
            self.update_contrastive(&mut tape, loss)?
        } else {
            0.0
        };
        self.after_update()?;

        Ok(SacMetrics {
            critic_loss,
            actor_loss,
            alpha_loss,
            alpha: self.alpha(),
            contrastive_loss,
            mean_c: mean(&c),
            mean_c_next: mean(&c_next),
            mean_r_i: 0.0,
        })
    }

    /// Every parameter under a unique name, targets prefixed with `target.`.
    pub fn named_params(&self) -> Vec<(String, &Param<R>)> {
        let mut out: Vec<(String, &Param<R>)> = Vec::new();
        for p in self.encoder.params() {
            out.push((p.name.clone(), p));
        }
        for p in self.critic.params() {
            out.push((p.name.clone(), p));
        }
        for p in self.actor.params() {
            out.push((p.name.clone(), p));
        }
        for p in self.target_encoder.params() {
            out.push((format!("target.{}", p.name), p));
        }
        for p in self.target_critic.params() {
            out.push((format!("target.{}", p.name), p));
        }
        out.push((self.head.w.name.clone(), &self.head.w));
        out.push((self.log_alpha.name.clone(), &self.log_alpha));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        let mut out: Vec<(String, &mut Param<R>)> = Vec::new();
        for p in self.encoder.params_mut() {
            out.push((p.name.clone(), p));
        }
        for p in self.critic.params_mut() {
            out.push((p.name.clone(), p));
        }
        for p in self.actor.params_mut() {
            out.push((p.name.clone(), p));
        }
        for p in self.target_encoder.params_mut() {
            out.push((format!("target.{}", p.name), p));
        }
        for p in self.target_critic.params_mut() {
            out.push((format!("target.{}", p.name), p));
        }
        out.push((self.head.w.name.clone(), &mut self.head.w));
        out.push((self.log_alpha.name.clone(), &mut self.log_alpha));
        out
    }
}
