use rand::Rng;

use super::{Linear, Module};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Param, Real, Tape, Tensor, Var};

/// Tanh-squashed diagonal Gaussian policy over `[-1, 1]^A`.
#[derive(Clone, Debug)]
pub struct GaussianActor<R> {
    layers: [Linear<R>; 3],
    action_dim: usize,
    pub log_std_min: R,
    pub log_std_max: R,
}

/// A reparameterised draw from [`GaussianActor`].
#[derive(Clone, Copy, Debug)]
pub struct ActorSample {
    /// `[B, A]` squashed actions.
    pub action: Var,
    /// `[B]` log-density of `action`, including the tanh correction.
    pub log_prob: Var,
    /// `[B, A]` pre-squash mean.
    pub mu: Var,
    pub log_std: Var,
}

impl<R: Real> GaussianActor<R> {
    pub fn new(feature_dim: usize, hidden: usize, action_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            layers: [
                Linear::new("actor.l1", feature_dim, hidden, rng),
                Linear::new("actor.l2", hidden, hidden, rng),
                Linear::new("actor.l3", hidden, 2 * action_dim, rng),
            ],
            action_dim,
            log_std_min: R::lit(-10.0),
            log_std_max: R::lit(2.0),
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Mean and bounded log standard deviation, each `[B, A]`.
    pub fn forward(&self, tape: &mut Tape<R>, state: Var, grad: bool) -> Result<(Var, Var)> {
        let mut h = self.layers[0].forward(tape, state, grad)?;
        h = tape.relu(h);
        h = self.layers[1].forward(tape, h, grad)?;
        h = tape.relu(h);
        let out = self.layers[2].forward(tape, h, grad)?;
        let a = self.action_dim;
        let mu = tape.slice_cols(out, 0, a)?;
        let raw = tape.slice_cols(out, a, 2 * a)?;
        let squashed = tape.tanh(raw);
        let half_range = R::lit(0.5) * (self.log_std_max - self.log_std_min);
        let scaled = tape.scale(squashed, half_range);
        let log_std = tape.add_scalar(scaled, self.log_std_min + half_range);
        Ok((mu, log_std))
    }

    /// Draws `tanh(mu + σ·noise)` with `noise: [B, A]` standard normal.
    pub fn sample(
        &self,
        tape: &mut Tape<R>,
        state: Var,
        grad: bool,
        noise: Tensor<R>,
    ) -> Result<ActorSample> {
        let (mu, log_std) = self.forward(tape, state, grad)?;
        let a = self.action_dim;
        let half_log_2pi = R::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
        let gauss_const: Vec<R> = noise
            .data()
            .chunks(a)
            .map(|row| {
                -R::lit(0.5) * row.iter().map(|&e| e * e).sum::<R>() - half_log_2pi * R::lit(a as f64)
            })
            .collect();
        let rows = gauss_const.len();
        let pre = tape.gaussian_rsample(mu, log_std, noise)?;
        let action = tape.tanh(pre);
        let sq = tape.square(action);
        let neg_sq = tape.neg(sq);
        let one_minus = tape.add_scalar(neg_sq, R::one() + R::lit(1e-6));
        let log_jac = tape.log(one_minus);
        let jac = tape.sum_cols(log_jac)?;
        let std_sum = tape.sum_cols(log_std)?;
        let c = tape.constant(Tensor::new(&[rows], gauss_const)?);
        let lp = tape.sub(c, std_sum)?;
        let log_prob = tape.sub(lp, jac)?;
        Ok(ActorSample {
            action,
            log_prob,
            mu,
            log_std,
        })
    }

    /// `tanh(mu)`, the deterministic action used for evaluation.
    pub fn mean_action(&self, tape: &mut Tape<R>, state: Var) -> Result<Var> {
        let (mu, _) = self.forward(tape, state, false)?;
        Ok(tape.tanh(mu))
    }
}

impl<R: Real> Module<R> for GaussianActor<R> {
    fn params(&self) -> Vec<&Param<R>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// `Q(z, a)`: an MLP over the concatenated feature and action.
#[derive(Clone, Debug)]
pub struct Critic<R> {
    layers: [Linear<R>; 3],
}

impl<R: Real> Critic<R> {
    pub fn new(name: &str, feature_dim: usize, action_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            layers: [
                Linear::new(&format!("{name}.l1"), feature_dim + action_dim, hidden, rng),
                Linear::new(&format!("{name}.l2"), hidden, hidden, rng),
                Linear::new(&format!("{name}.l3"), hidden, 1, rng),
            ],
        }
    }

    /// `[B]` action values.
    pub fn forward(&self, tape: &mut Tape<R>, state: Var, action: Var, grad: bool) -> Result<Var> {
        let x = tape.concat_cols(state, action)?;
        let mut h = self.layers[0].forward(tape, x, grad)?;
        h = tape.relu(h);
        h = self.layers[1].forward(tape, h, grad)?;
        h = tape.relu(h);
        let q = self.layers[2].forward(tape, h, grad)?;
        let b = tape.value(q).shape()[0];
        tape.reshape(q, &[b])
    }
}

impl<R: Real> Module<R> for Critic<R> {
    fn params(&self) -> Vec<&Param<R>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Twin Q heads; the soft target uses their minimum.
#[derive(Clone, Debug)]
pub struct CriticPair<R> {
    pub q1: Critic<R>,
    pub q2: Critic<R>,
}

impl<R: Real> CriticPair<R> {
    pub fn new(feature_dim: usize, action_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            q1: Critic::new("critic.q1", feature_dim, action_dim, hidden, rng),
            q2: Critic::new("critic.q2", feature_dim, action_dim, hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<R>, state: Var, action: Var, grad: bool) -> Result<(Var, Var)> {
        Ok((
            self.q1.forward(tape, state, action, grad)?,
            self.q2.forward(tape, state, action, grad)?,
        ))
    }
}

impl<R: Real> Module<R> for CriticPair<R> {
    fn params(&self) -> Vec<&Param<R>> {
        let mut p = self.q1.params();
        p.extend(self.q2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        let mut p = self.q1.params_mut();
        p.extend(self.q2.params_mut());
        p
    }
}

/// Softmax policy over a discrete action set.
#[derive(Clone, Debug)]
pub struct CategoricalActor<R> {
    hidden: Linear<R>,
    out: Linear<R>,
}

impl<R: Real> CategoricalActor<R> {
    pub fn new(feature_dim: usize, hidden: usize, actions: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new("policy.hidden", feature_dim, hidden, rng),
            out: Linear::new("policy.out", hidden, actions, rng),
        }
    }

    pub fn actions(&self) -> usize {
        self.out.output_dim()
    }

    /// `[B, n]` unnormalised logits.
    pub fn logits(&self, tape: &mut Tape<R>, state: Var, grad: bool) -> Result<Var> {
        let h = self.hidden.forward(tape, state, grad)?;
        let h = tape.tanh(h);
        self.out.forward(tape, h, grad)
    }
}

impl<R: Real> Module<R> for CategoricalActor<R> {
    fn params(&self) -> Vec<&Param<R>> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        let mut p = self.hidden.params_mut();
        p.extend(self.out.params_mut());
        p
    }
}

/// State-value head `V(z)`.
#[derive(Clone, Debug)]
pub struct ValueHead<R> {
    hidden: Linear<R>,
    out: Linear<R>,
}

impl<R: Real> ValueHead<R> {
    pub fn new(feature_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new("value.hidden", feature_dim, hidden, rng),
            out: Linear::new("value.out", hidden, 1, rng),
        }
    }

    /// `[B]` state values.
    pub fn forward(&self, tape: &mut Tape<R>, state: Var, grad: bool) -> Result<Var> {
        let h = self.hidden.forward(tape, state, grad)?;
        let h = tape.tanh(h);
        let v = self.out.forward(tape, h, grad)?;
        let b = tape.value(v).shape()[0];
        tape.reshape(v, &[b])
    }
}

impl<R: Real> Module<R> for ValueHead<R> {
    fn params(&self) -> Vec<&Param<R>> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        let mut p = self.hidden.params_mut();
        p.extend(self.out.params_mut());
        p
    }
}

/// The learnable bilinear similarity `W` shared by the contrastive loss and
/// the curiosity signal.
#[derive(Clone, Debug)]
pub struct ContrastiveHead<R> {
    pub w: Param<R>,
}

impl<R: Real> ContrastiveHead<R> {
    /// `W` starts uniform on `[0, 1)`.
    pub fn new(feature_dim: usize, rng: &mut impl Rng) -> Self {
        let data = (0..feature_dim * feature_dim)
            .map(|_| R::lit(rng.random::<f64>()))
            .collect();
        Self {
            w: Param::new(
                "contrastive.w",
                Tensor::new(&[feature_dim, feature_dim], data).expect("shape"),
            ),
        }
    }

    /// `[B, B]` logits `q_bᵀ W k_l` on the tape.
    pub fn logits(&self, tape: &mut Tape<R>, queries: Var, keys: Var, grad: bool) -> Result<Var> {
        let b = tape.value(queries).shape()[0];
        if b < 2 {
            return Err(Error::invalid(format!(
                "contrastive logits need at least 2 samples, got {b}"
            )));
        }
        let w = tape.bind(&self.w, grad);
        tape.bilinear(queries, w, keys)
    }
}

impl<R: Real> Module<R> for ContrastiveHead<R> {
    fn params(&self) -> Vec<&Param<R>> {
        vec![&self.w]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        vec![&mut self.w]
    }
}

/// Off-tape `[B, B]` logits `q W kᵀ` for batches of `B ≥ 2` queries and keys.
pub fn similarity_logits<R: Real>(queries: &Tensor<R>, w: &Tensor<R>, keys: &Tensor<R>) -> Result<Tensor<R>> {
    let (qs, ws, ks) = (queries.shape(), w.shape(), keys.shape());
    if qs.len() != 2 || ks.len() != 2 || ws.len() != 2 {
        return Err(Error::shape(
            "similarity_logits",
            format!("q {qs:?}, w {ws:?}, k {ks:?}"),
        ));
    }
    let (b, d) = (qs[0], qs[1]);
    if ws != [d, d] || ks != [b, d] {
        return Err(Error::shape(
            "similarity_logits",
            format!("q {qs:?}, w {ws:?}, k {ks:?}"),
        ));
    }
    if b < 2 {
        return Err(Error::invalid(format!(
            "contrastive logits need at least 2 samples, got {b}"
        )));
    }
    let mut qw = vec![R::zero(); b * d];
    gemm(b, d, d, queries.data(), false, w.data(), false, &mut qw, false);
    let mut out = vec![R::zero(); b * b];
    gemm(b, d, b, &qw, false, keys.data(), true, &mut out, false);
    Tensor::new(&[b, b], out)
}
