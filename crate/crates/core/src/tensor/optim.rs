use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

/// A trainable array with an optional accumulated gradient.
///
/// Cloning yields an independent parameter with a fresh id, which is how
/// target and key networks are created.
#[derive(Debug)]
pub struct Param<R> {
    id: ParamId,
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Option<Tensor<R>>,
}

impl<R: Real> Param<R> {
    pub fn new(name: impl Into<String>, value: Tensor<R>) -> Self {
        Self {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }
}

impl<R: Clone> Clone for Param<R> {
    fn clone(&self) -> Self {
        Self {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

pub fn zero_grad<R: Real>(params: &mut [&mut Param<R>]) {
    for p in params {
        p.grad = None;
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<R: Real>(params: &mut [&mut Param<R>], max_norm: R) -> R {
    let total = params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|&g| g * g)
        .sum::<R>()
        .sqrt();
    let coef = max_norm / (total + R::lit(1e-6));
    if coef < R::one() {
        for p in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                for v in g.data_mut() {
                    *v *= coef;
                }
            }
        }
    }
    total
}

/// `target ← (1 − rate)·target + rate·source`, elementwise.
pub fn ema_update<R: Real>(targets: &mut [&mut Param<R>], sources: &[&Param<R>], rate: R) -> Result<()> {
    if targets.len() != sources.len() {
        return Err(Error::shape(
            "ema_update",
            format!("{} targets for {} sources", targets.len(), sources.len()),
        ));
    }
    for (t, s) in targets.iter().zip(sources) {
        if t.value.shape() != s.value.shape() {
            return Err(Error::shape(
                "ema_update",
                format!("{}: {:?} vs {:?}", t.name, t.value.shape(), s.value.shape()),
            ));
        }
    }
    let keep = R::one() - rate;
    for (t, s) in targets.iter_mut().zip(sources) {
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = keep * *tv + rate * sv;
        }
    }
    Ok(())
}

fn check_grad<R: Real>(p: &Param<R>) -> Result<&[R]> {
    let g = p
        .grad
        .as_ref()
        .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
    if g.shape() != p.value.shape() {
        return Err(Error::shape(
            "optimizer",
            format!("{}: grad {:?} vs value {:?}", p.name, g.shape(), p.value.shape()),
        ));
    }
    Ok(g.data())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<R> {
    pub lr: R,
    pub beta1: R,
    pub beta2: R,
    pub eps: R,
    step: u64,
    moments: HashMap<ParamId, (Vec<R>, Vec<R>)>,
}

impl<R: Real> Adam<R> {
    pub fn new(lr: R) -> Self {
        Self::with_betas(lr, R::lit(0.9), R::lit(0.999))
    }

    pub fn with_betas(lr: R, beta1: R, beta2: R) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: R::lit(1e-8),
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Param<R>]) -> Result<()> {
        for p in params.iter() {
            check_grad(p)?;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = R::one() - self.beta1.powi(t);
        let bc2_sqrt = (R::one() - self.beta2.powi(t)).sqrt();
        let step_size = self.lr / bc1;
        for p in params.iter_mut() {
            let n = p.value.numel();
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![R::zero(); n], vec![R::zero(); n]));
            let grad = p.grad.as_ref().expect("checked").data();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (R::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (R::one() - self.beta2) * g * g;
            }
            let value = p.value.data_mut();
            for i in 0..n {
                let denom = v[i].sqrt() / bc2_sqrt + self.eps;
                value[i] -= step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

/// RMSprop without momentum: `v ← αv + (1−α)g²`, `p ← p − lr·g/(√v + ε)`.
#[derive(Clone, Debug)]
pub struct RmsProp<R> {
    pub lr: R,
    pub alpha: R,
    pub eps: R,
    step: u64,
    square_avg: HashMap<ParamId, Vec<R>>,
}

impl<R: Real> RmsProp<R> {
    pub fn new(lr: R, alpha: R, eps: R) -> Self {
        Self {
            lr,
            alpha,
            eps,
            step: 0,
            square_avg: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Param<R>]) -> Result<()> {
        for p in params.iter() {
            check_grad(p)?;
        }
        self.step += 1;
        for p in params.iter_mut() {
            let n = p.value.numel();
            let v = self
                .square_avg
                .entry(p.id())
                .or_insert_with(|| vec![R::zero(); n]);
            let grad = p.grad.as_ref().expect("checked").data().to_vec();
            let value = p.value.data_mut();
            for i in 0..n {
                v[i] = self.alpha * v[i] + (R::one() - self.alpha) * grad[i] * grad[i];
                value[i] -= self.lr * grad[i] / (v[i].sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: Option<f64>) -> Param<f64> {
        let mut p = Param::new("p", Tensor::scalar(v));
        p.grad = g.map(Tensor::scalar);
        p
    }

    /// Scalar Adam written straight from the published recurrence.
    fn adam_oracle(grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut x, mut m, mut v) = (0.0, 0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
        }
        x
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = param(0.0, Some(1.0));
        let mut opt = Adam::new(1e-3);
        opt.step(&mut [&mut p]).unwrap();
        // 1e-3 * 1 / (1 + 1e-8)
        assert!((p.value.data()[0] + 1e-3).abs() < 1e-10);
        assert_eq!(p.grad.as_ref().unwrap().data(), &[1.0]);
    }

    #[test]
    fn adam_two_steps_match_recurrence() {
        let mut p = param(0.0, Some(0.7));
        let mut opt = Adam::new(1e-2);
        opt.step(&mut [&mut p]).unwrap();
        p.grad = Some(Tensor::scalar(-0.3));
        opt.step(&mut [&mut p]).unwrap();
        let expect = adam_oracle(&[0.7, -0.3], 1e-2, 0.9, 0.999, 1e-8);
        assert!((p.value.data()[0] - expect).abs() < 1e-12);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = param(0.25, Some(0.0));
        Adam::new(1e-3).step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data()[0], 0.25);
        let mut q = param(0.25, Some(0.0));
        RmsProp::new(1e-3, 0.99, 1e-5).step(&mut [&mut q]).unwrap();
        assert_eq!(q.value.data()[0], 0.25);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut p = param(0.0, None);
        assert!(matches!(
            Adam::new(1e-3).step(&mut [&mut p]),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn rmsprop_single_step() {
        let mut p = param(1.0, Some(2.0));
        RmsProp::new(0.1, 0.99, 0.0).step(&mut [&mut p]).unwrap();
        // v = 0.01*4 = 0.04, step = 0.1*2/0.2 = 1
        assert!((p.value.data()[0] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn ema_rates() {
        let src = param(1.0, None);
        let mut t = param(0.0, None);
        ema_update(&mut [&mut t], &[&src], 0.01).unwrap();
        assert!((t.value.data()[0] - 0.01).abs() < 1e-15);
        ema_update(&mut [&mut t], &[&src], 0.0).unwrap();
        assert!((t.value.data()[0] - 0.01).abs() < 1e-15);
        ema_update(&mut [&mut t], &[&src], 1.0).unwrap();
        assert_eq!(t.value.data()[0], 1.0);
    }

    #[test]
    fn ema_shape_mismatch() {
        let src = Param::<f64>::new("a", Tensor::zeros(&[2]));
        let mut t = Param::<f64>::new("b", Tensor::zeros(&[3]));
        assert!(ema_update(&mut [&mut t], &[&src], 0.5).is_err());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut a = param(0.0, Some(3.0));
        let mut b = param(0.0, Some(4.0));
        let n = clip_grad_norm(&mut [&mut a, &mut b], 0.5);
        assert!((n - 5.0).abs() < 1e-12);
        let ga = a.grad.unwrap().data()[0];
        let gb = b.grad.unwrap().data()[0];
        assert!(((ga * ga + gb * gb).sqrt() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn clones_get_fresh_ids() {
        let p = param(1.0, None);
        assert_ne!(p.id(), p.clone().id());
    }
}
