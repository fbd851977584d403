//! Loss terms shared by the learners. Everything taking a [`Tape`] builds a
//! differentiable graph; the target helpers work on plain values because
//! targets never carry gradients.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Both critics' `[B]` estimates for one view.
#[derive(Clone, Copy, Debug)]
pub struct TwinQ {
    pub q1: Var,
    pub q2: Var,
}

fn check_unit_weights<R: Real>(op: &'static str, w: &[R], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::shape(op, format!("{} weights for batch {n}", w.len())));
    }
    if let Some(v) = w.iter().find(|v| !(**v >= R::zero() && **v <= R::one())) {
        return Err(Error::invalid(format!("{op}: weight {v} outside [0, 1]")));
    }
    Ok(())
}

fn batch_of<R: Real>(tape: &Tape<R>, op: &'static str, vars: &[Var]) -> Result<usize> {
    let s = tape.value(vars[0]).shape().to_vec();
    if s.len() != 1 || vars.iter().any(|v| tape.value(*v).shape() != s.as_slice()) {
        return Err(Error::shape(op, "Q-values and target must share one [B] shape"));
    }
    Ok(s[0])
}

/// Curiosity-weighted critic loss summed over both critics:
/// `mean_b[(1 − c)(Q(g_i(o), a) − y)² + c(Q(g_j(o), a) − y)²]`.
pub fn regularized_critic_loss<R: Real>(
    tape: &mut Tape<R>,
    q_i: TwinQ,
    q_j: TwinQ,
    y: Var,
    c: &[R],
) -> Result<Var> {
    let b = batch_of(tape, "regularized_critic_loss", &[q_i.q1, q_i.q2, q_j.q1, q_j.q2, y])?;
    check_unit_weights("regularized_critic_loss", c, b)?;
    let keep = tape.constant(Tensor::new(&[b], c.iter().map(|&v| R::one() - v).collect())?);
    let take = tape.constant(Tensor::new(&[b], c.to_vec())?);
    let mut total = None;
    for (a, bq) in [(q_i.q1, q_j.q1), (q_i.q2, q_j.q2)] {
        let ei = tape.sub(a, y)?;
        let ej = tape.sub(bq, y)?;
        let si = tape.square(ei);
        let sj = tape.square(ej);
        let wi = tape.mul(si, keep)?;
        let wj = tape.mul(sj, take)?;
        let s = tape.add(wi, wj)?;
        let m = tape.mean(s);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(total.expect("two critics"))
}

/// Augmentation-averaged critic loss summed over both critics:
/// `(1/M) Σ_m mean_b (Q(g_m(o), a) − y)²`.
pub fn drq_critic_loss<R: Real>(tape: &mut Tape<R>, views: &[TwinQ], y: Var) -> Result<Var> {
    if views.is_empty() {
        return Err(Error::invalid("critic loss needs at least one view"));
    }
    let mut vars = vec![y];
    vars.extend(views.iter().flat_map(|v| [v.q1, v.q2]));
    batch_of(tape, "drq_critic_loss", &vars)?;
    let mut total = None;
    for v in views {
        for q in [v.q1, v.q2] {
            let e = tape.sub(q, y)?;
            let s = tape.square(e);
            let m = tape.mean(s);
            total = Some(match total {
                None => m,
                Some(t) => tape.add(t, m)?,
            });
        }
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, R::one() / R::lit(views.len() as f64)))
}

/// Soft state value `min(Q̄₁, Q̄₂) − α·log π` per sample.
pub fn soft_value<R: Real>(q1: &[R], q2: &[R], log_prob: &[R], alpha: R) -> Result<Vec<R>> {
    if q1.len() != q2.len() || q1.len() != log_prob.len() {
        return Err(Error::shape("soft_value", "q1, q2 and log_prob differ in length"));
    }
    Ok(q1
        .iter()
        .zip(q2)
        .zip(log_prob)
        .map(|((&a, &b), &lp)| a.min(b) - alpha * lp)
        .collect())
}

/// `(1 − c′)·T_i + c′·T_j` per sample.
pub fn regularized_target<R: Real>(t_i: &[R], t_j: &[R], c_next: &[R]) -> Result<Vec<R>> {
    if t_i.len() != t_j.len() {
        return Err(Error::shape("regularized_target", "target lengths differ"));
    }
    check_unit_weights("regularized_target", c_next, t_i.len())?;
    Ok(t_i
        .iter()
        .zip(t_j)
        .zip(c_next)
        .map(|((&a, &b), &c)| (R::one() - c) * a + c * b)
        .collect())
}

/// `(1/K) Σ_k T_k` per sample.
pub fn averaged_target<R: Real>(targets: &[Vec<R>]) -> Result<Vec<R>> {
    let first = targets
        .first()
        .ok_or_else(|| Error::invalid("averaging needs at least one target"))?;
    if targets.iter().any(|t| t.len() != first.len()) {
        return Err(Error::shape("averaged_target", "target lengths differ"));
    }
    let k = R::lit(targets.len() as f64);
    Ok((0..first.len())
        .map(|b| targets.iter().map(|t| t[b]).sum::<R>() / k)
        .collect())
}

/// `r + γ(1 − d)·T` per sample.
pub fn bellman_target<R: Real>(reward: &[R], done: &[bool], gamma: R, value: &[R]) -> Result<Vec<R>> {
    if reward.len() != done.len() || reward.len() != value.len() {
        return Err(Error::shape("bellman_target", "reward, done and value differ in length"));
    }
    Ok(reward
        .iter()
        .zip(done)
        .zip(value)
        .map(|((&r, &d), &v)| if d { r } else { r + gamma * v })
        .collect())
}

/// Actor and temperature losses from the critics' values of fresh actions:
/// `L_π = mean(α·log π − min(Q₁, Q₂))` with `α` held fixed, and
/// `L_α = mean(α·(−log π − H̄))` with `log π` held fixed and `α = exp(log α)`.
pub fn actor_and_alpha_losses<R: Real>(
    tape: &mut Tape<R>,
    q1: Var,
    q2: Var,
    log_prob: Var,
    log_alpha: Var,
    target_entropy: R,
) -> Result<(Var, Var)> {
    batch_of(tape, "actor_and_alpha_losses", &[q1, q2, log_prob])?;
    if tape.value(log_alpha).numel() != 1 {
        return Err(Error::shape("actor_and_alpha_losses", "log_alpha must be a scalar"));
    }
    let alpha = tape.scalar(log_alpha).exp();
    let min_q = tape.minimum(q1, q2)?;
    let weighted = tape.scale(log_prob, alpha);
    let diff = tape.sub(weighted, min_q)?;
    let actor = tape.mean(diff);

    let lp = tape.detach(log_prob);
    let neg = tape.neg(lp);
    let gap = tape.add_scalar(neg, -target_entropy);
    let alpha_var = tape.exp(log_alpha);
    let prod = tape.mul_scalar(gap, alpha_var)?;
    let alpha_loss = tape.mean(prod);
    Ok((actor, alpha_loss))
}

/// Generalised advantage estimates and value targets for a time-major
/// rollout of `L` steps over `E` environments. `done[t·E + e]` marks that the
/// episode ended at step `t`, so step `t + 1` is not bootstrapped into it.
pub fn gae<R: Real>(
    rewards: &[R],
    values: &[R],
    last_values: &[R],
    done: &[bool],
    gamma: R,
    lambda: R,
) -> Result<(Vec<R>, Vec<R>)> {
    let e = last_values.len();
    if e == 0 || !rewards.len().is_multiple_of(e) || rewards.is_empty() {
        return Err(Error::invalid(format!(
            "rollout of {} rewards does not tile {e} environments",
            rewards.len()
        )));
    }
    if values.len() != rewards.len() || done.len() != rewards.len() {
        return Err(Error::shape("gae", "rewards, values and done differ in length"));
    }
    let steps = rewards.len() / e;
    let mut adv = vec![R::zero(); rewards.len()];
    for env in 0..e {
        let mut running = R::zero();
        for t in (0..steps).rev() {
            let i = t * e + env;
            let next_value = if t + 1 < steps { values[i + e] } else { last_values[env] };
            let mask = if done[i] { R::zero() } else { R::one() };
            let delta = rewards[i] + gamma * next_value * mask - values[i];
            running = delta + gamma * lambda * mask * running;
            adv[i] = running;
        }
    }
    let returns = adv.iter().zip(values).map(|(&a, &v)| a + v).collect();
    Ok((adv, returns))
}

/// The A2C objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct A2cLosses {
    /// `−mean(log π(a)·A)`
    pub policy: Var,
    /// `mean((V − R)²)`
    pub value: Var,
    /// Mean policy entropy.
    pub entropy: Var,
    /// `policy − c_ent·entropy + c_v·value`
    pub total: Var,
}

pub fn a2c_losses<R: Real>(
    tape: &mut Tape<R>,
    logits: Var,
    values: Var,
    actions: &[usize],
    advantages: &[R],
    returns: &[R],
    entropy_coef: R,
    value_coef: R,
) -> Result<A2cLosses> {
    let n = actions.len();
    if advantages.len() != n || returns.len() != n || tape.value(values).shape() != [n] {
        return Err(Error::shape(
            "a2c_losses",
            format!("{n} actions, {} advantages, {} returns", advantages.len(), returns.len()),
        ));
    }
    let log_p = tape.log_softmax(logits)?;
    let picked = tape.pick(log_p, actions)?;
    let adv = tape.constant(Tensor::new(&[n], advantages.to_vec())?);
    let pg = tape.mul(picked, adv)?;
    let pg = tape.mean(pg);
    let policy = tape.neg(pg);

    let p = tape.softmax(logits)?;
    let plogp = tape.mul(p, log_p)?;
    let row = tape.sum_cols(plogp)?;
    let neg_ent = tape.mean(row);
    let entropy = tape.neg(neg_ent);

    let ret = tape.constant(Tensor::new(&[n], returns.to_vec())?);
    let err = tape.sub(values, ret)?;
    let sq = tape.square(err);
    let value = tape.mean(sq);

    let e = tape.scale(entropy, entropy_coef);
    let v = tape.scale(value, value_coef);
    let pe = tape.sub(policy, e)?;
    let total = tape.add(pe, v)?;
    Ok(A2cLosses {
        policy,
        value,
        entropy,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn leaf(tape: &mut Tape<f64>, v: Vec<f64>) -> Var {
        let n = v.len();
        tape.leaf(Tensor::new(&[n], v).unwrap(), true)
    }

    #[test]
    fn regularized_loss_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = 7;
        let (q1i, q2i, q1j, q2j, y) = (
            randn(&mut rng, b),
            randn(&mut rng, b),
            randn(&mut rng, b),
            randn(&mut rng, b),
            randn(&mut rng, b),
        );
        let c: Vec<f64> = (0..b).map(|_| rng.random()).collect();
        let mut tape = Tape::new();
        let qi = TwinQ {
            q1: leaf(&mut tape, q1i.clone()),
            q2: leaf(&mut tape, q2i.clone()),
        };
        let qj = TwinQ {
            q1: leaf(&mut tape, q1j.clone()),
            q2: leaf(&mut tape, q2j.clone()),
        };
        let yv = tape.constant(Tensor::new(&[b], y.clone()).unwrap());
        let loss = regularized_critic_loss(&mut tape, qi, qj, yv, &c).unwrap();
        let mut want = 0.0;
        for s in 0..b {
            for (a, bb) in [(q1i[s], q1j[s]), (q2i[s], q2j[s])] {
                want += ((1.0 - c[s]) * (a - y[s]).powi(2) + c[s] * (bb - y[s]).powi(2)) / b as f64;
            }
        }
        assert!((tape.scalar(loss) - want).abs() < 1e-12);
        assert!(regularized_critic_loss(&mut tape, qi, qj, yv, &c[1..]).is_err());
        let mut bad = c.clone();
        bad[0] = 1.5;
        assert!(regularized_critic_loss(&mut tape, qi, qj, yv, &bad).is_err());
    }

    #[test]
    fn targets() {
        let v = soft_value(&[1.0, -2.0], &[0.5, 3.0], &[-1.0, 2.0], 0.1).unwrap();
        assert_eq!(v, vec![0.5 + 0.1, -2.0 - 0.2]);
        let y = bellman_target(&[1.0, 1.0], &[false, true], 0.9, &[2.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0 + 1.8, 1.0]);
        let t = regularized_target(&[1.0, 1.0], &[3.0, 3.0], &[0.0, 0.25]).unwrap();
        assert_eq!(t, vec![1.0, 1.5]);
        let a = averaged_target(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(a, vec![2.0, 4.0]);
        assert!(averaged_target::<f64>(&[]).is_err());
    }

    #[test]
    fn zero_alpha_actor_loss_is_negative_min_q() {
        let mut tape = Tape::new();
        let q1 = leaf(&mut tape, vec![1.0, 4.0]);
        let q2 = leaf(&mut tape, vec![2.0, 3.0]);
        let lp = leaf(&mut tape, vec![-0.3, 0.7]);
        let la = tape.leaf(Tensor::scalar(f64::NEG_INFINITY), true);
        let (actor, _) = actor_and_alpha_losses(&mut tape, q1, q2, lp, la, -1.0).unwrap();
        assert_eq!(tape.scalar(actor), -2.0);
    }

    #[test]
    fn alpha_gradient_vanishes_at_target_entropy() {
        let mut tape = Tape::new();
        let q = leaf(&mut tape, vec![0.0; 3]);
        // mean log π = 1 = −H̄
        let lp = leaf(&mut tape, vec![0.5, 1.0, 1.5]);
        let la = tape.leaf(Tensor::scalar(0.1f64.ln()), true);
        let (_, alpha_loss) = actor_and_alpha_losses(&mut tape, q, q, lp, la, -1.0).unwrap();
        let g = tape.backward(alpha_loss).unwrap();
        assert!(g.get(la).unwrap()[0].abs() < 1e-15);
        assert!(g.get(lp).is_none_or(|d| d.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn gae_with_zero_discount_is_one_step_advantage() {
        let r: [f64; 4] = [1.0, 2.0, 0.5, -1.0];
        let v = [0.3, 0.1, 0.2, 0.4];
        let (adv, ret) = gae(&r, &v, &[9.0, 9.0], &[false; 4], 0.0, 0.95).unwrap();
        for i in 0..4 {
            assert!((adv[i] - (r[i] - v[i])).abs() < 1e-15);
            assert!((ret[i] - r[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_matches_discounted_returns_at_lambda_one() {
        let (g, steps) = (0.9f64, 4);
        let r: [f64; 4] = [1.0, 0.0, 2.0, 1.0];
        let v = [0.5, -0.5, 0.25, 1.0];
        let last = 3.0;
        let (_, ret) = gae(&r, &v, &[last], &[false; 4], g, 1.0).unwrap();
        for t in 0..steps {
            let mut want = g.powi((steps - t) as i32) * last;
            for (k, rk) in r.iter().enumerate().skip(t) {
                want += g.powi((k - t) as i32) * rk;
            }
            assert!((ret[t] - want).abs() < 1e-12);
        }
        let (adv, _) = gae(&r, &v, &[last], &[false, true, false, false], g, 1.0).unwrap();
        assert!((adv[1] - (r[1] - v[1])).abs() < 1e-15);
        assert!(gae(&r, &v, &[], &[false; 4], g, 1.0).is_err());
    }

    #[test]
    fn a2c_entropy_of_deterministic_policy_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(&[1, 3], vec![800.0, 0.0, 0.0]).unwrap(), true);
        let v = leaf(&mut tape, vec![0.0]);
        let l = a2c_losses(&mut tape, logits, v, &[0], &[1.0], &[0.0], 0.0, 0.5).unwrap();
        assert!(tape.scalar(l.entropy).abs() < 1e-12);
        assert!(tape.scalar(l.total).abs() < 1e-12);
    }
}
