//! Executable checks of the acceptance criteria. Each check returns a
//! [`Report`]; the acceptance test target and `cclf verify` print them.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::augment::{pixel_overlap, select_min_overlap, stack_views, CropSpec};
use crate::curiosity::{contrastive_loss, select_max_curiosity, weighted_contrastive_loss};
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::harness::{
    area_under_curve, read_curiosity, run, run_ablation, CuriosityRow, ExperimentConfig, Learner,
    MetricsRow, CHECKPOINT_FILE, CURIOSITY_FILE, SUMMARY_CSV, SUMMARY_MD,
};
use crate::learners::{
    a2c_losses, actor_and_alpha_losses, averaged_target, bellman_target, drq_critic_loss,
    regularized_critic_loss, regularized_target, soft_value, ComponentToggles, TwinQ,
};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{
    CategoricalActor, ContrastiveHead, CriticPair, Encoder, EncoderSpec, GaussianActor, Module,
    ValueHead,
};
use crate::replay::{momentum_weight, ReplayBuffer, Transition};
use crate::tensor::{Param, Tape, Tensor, Var};

/// Outcome of one criterion. `passed` also requires the runtime budget.
#[derive(Clone, Debug)]
pub struct Report {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {} {}: {} [{:.1}s of {:.0}s]",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds,
            self.budget_seconds
        )
    }
}

fn timed(
    id: u8,
    name: &'static str,
    budget_seconds: f64,
    check: impl FnOnce() -> Result<(bool, String)>,
) -> Result<Report> {
    let start = Instant::now();
    let (ok, detail) = check()?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(Report {
        id,
        name,
        passed: ok && seconds <= budget_seconds,
        detail,
        seconds,
        budget_seconds,
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn normal(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn frame(rng: &mut impl Rng, size: usize, channels: usize) -> Observation {
    let data = (0..size * size * channels).map(|_| rng.random()).collect();
    Observation::new(size, size, channels, data).expect("valid frame")
}

/// A small 64-bit critic stack and one random replay batch with two crops
/// of every observation and of every next observation.
struct CriticBatch {
    q_i: TwinQ,
    q_j: TwinQ,
    t_i: Vec<f64>,
    t_j: Vec<f64>,
    reward: Vec<f64>,
    done: Vec<bool>,
    gamma: f64,
}

fn critic_batch(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng) -> Result<CriticBatch> {
    let (source, size, channels) = (16, 12, 3);
    let b = rng.random_range(4..=16);
    let action_dim = rng.random_range(1..=3);
    let spec = EncoderSpec::Pixel {
        size,
        channels,
        filters: 4,
        feature_dim: 6,
    };
    let encoder = Encoder::<f64>::new(spec, rng);
    let critic = CriticPair::<f64>::new(6, action_dim, 16, rng);
    let target_encoder = Encoder::<f64>::new(spec, rng);
    let target_critic = CriticPair::<f64>::new(6, action_dim, 16, rng);
    let actor = GaussianActor::<f64>::new(6, 16, action_dim, rng);
    let alpha = rng.random_range(0.01..1.0);

    let obs: Vec<Observation> = (0..b).map(|_| frame(rng, source, channels)).collect();
    let next: Vec<Observation> = (0..b).map(|_| frame(rng, source, channels)).collect();
    let refs: Vec<&Observation> = obs.iter().collect();
    let next_refs: Vec<&Observation> = next.iter().collect();
    let actions = Tensor::new(
        &[b, action_dim],
        (0..b * action_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let crops = |rng: &mut ChaCha8Rng| -> Result<Vec<CropSpec>> {
        (0..b)
            .map(|_| CropSpec::random((source, source), (size, size), rng))
            .collect()
    };

    let mut q = Vec::new();
    for _ in 0..2 {
        let x = tape.constant(stack_views(&refs, &crops(rng)?, 1.0 / 255.0)?);
        let z = encoder.forward(tape, x, true)?;
        let a = tape.constant(actions.clone());
        let (q1, q2) = critic.forward(tape, z, a, true)?;
        q.push(TwinQ { q1, q2 });
    }
    let mut t = Vec::new();
    for _ in 0..2 {
        let mut side = Tape::new();
        let x = side.constant(stack_views(&next_refs, &crops(rng)?, 1.0 / 255.0)?);
        let z = target_encoder.forward(&mut side, x, false)?;
        let s = actor.sample(&mut side, z, false, normal(rng, &[b, action_dim], 1.0))?;
        let (q1, q2) = target_critic.forward(&mut side, z, s.action, false)?;
        t.push(soft_value(
            side.value(q1).data(),
            side.value(q2).data(),
            side.value(s.log_prob).data(),
            alpha,
        )?);
    }
    let t_j = t.pop().expect("two views");
    let t_i = t.pop().expect("two views");
    Ok(CriticBatch {
        q_i: q[0],
        q_j: q[1],
        t_i,
        t_j,
        reward: (0..b).map(|_| rng.random_range(-1.0..1.0)).collect(),
        done: (0..b).map(|_| rng.random_bool(0.1)).collect(),
        gamma: 0.99,
    })
}

const BATCHES: usize = 100;

/// Curiosity-weighted loss at `c = c′ = ½` against the two-view
/// augmentation-averaged loss.
pub fn criterion_1(seed: u64) -> Result<Report> {
    timed(1, "reduction to augmentation averaging", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..BATCHES {
            let mut tape = Tape::new();
            let cb = critic_batch(&mut tape, &mut rng)?;
            let b = cb.reward.len();
            let half = vec![0.5; b];
            let y = bellman_target(&cb.reward, &cb.done, cb.gamma, &regularized_target(&cb.t_i, &cb.t_j, &half)?)?;
            let y = tape.constant(Tensor::new(&[b], y)?);
            let ours = regularized_critic_loss(&mut tape, cb.q_i, cb.q_j, y, &half)?;
            let avg = averaged_target(&[cb.t_i.clone(), cb.t_j.clone()])?;
            let y2 = tape.constant(Tensor::new(&[b], bellman_target(&cb.reward, &cb.done, cb.gamma, &avg)?)?);
            let drq = drq_critic_loss(&mut tape, &[cb.q_i, cb.q_j], y2)?;
            worst = worst.max(rel(tape.scalar(ours), tape.scalar(drq)));
        }
        Ok((worst < 1e-6, format!("max relative gap {worst:.2e} over {BATCHES} batches")))
    })
}

/// Curiosity-weighted loss at `c = c′ = 0` (and `1`) against a plain
/// single-view squared Bellman error computed sample by sample.
pub fn criterion_2(seed: u64) -> Result<Report> {
    timed(2, "reduction to single-view Bellman error", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for n in 0..BATCHES {
            let mut tape = Tape::new();
            let cb = critic_batch(&mut tape, &mut rng)?;
            let b = cb.reward.len();
            // alternate between the first view (c = 0) and the second (c = 1)
            let (c, view, t_view) = if n % 2 == 0 {
                (0.0, cb.q_i, &cb.t_i)
            } else {
                (1.0, cb.q_j, &cb.t_j)
            };
            let cs = vec![c; b];
            let y = bellman_target(&cb.reward, &cb.done, cb.gamma, &regularized_target(&cb.t_i, &cb.t_j, &cs)?)?;
            let yv = tape.constant(Tensor::new(&[b], y)?);
            let ours = regularized_critic_loss(&mut tape, cb.q_i, cb.q_j, yv, &cs)?;
            let ours = tape.scalar(ours);

            let mut oracle = 0.0;
            for q in [view.q1, view.q2] {
                let qs = tape.value(q).data();
                let mut s = 0.0;
                for k in 0..b {
                    let mask = if cb.done[k] { 0.0 } else { 1.0 };
                    let target = cb.reward[k] + cb.gamma * mask * t_view[k];
                    s += (qs[k] - target).powi(2);
                }
                oracle += s / b as f64;
            }
            worst = worst.max(rel(ours, oracle));
        }
        Ok((worst < 1e-6, format!("max relative gap {worst:.2e} over {BATCHES} batches")))
    })
}

/// Weighted contrastive loss with unit weights against the softmax-form
/// InfoNCE loss and a direct log-sum-exp evaluation.
pub fn criterion_3(seed: u64) -> Result<Report> {
    timed(3, "reduction to unweighted contrastive loss", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..BATCHES {
            let b = rng.random_range(2..=32);
            let d = rng.random_range(2..=16);
            let head = ContrastiveHead::<f64>::new(d, &mut rng);
            let (q, k) = (normal(&mut rng, &[b, d], 1.0), normal(&mut rng, &[b, d], 1.0));
            let mut tape = Tape::new();
            let qv = tape.constant(q);
            let kv = tape.constant(k);
            let logits = head.logits(&mut tape, qv, kv, false)?;
            let weighted = weighted_contrastive_loss(&mut tape, logits, &vec![1.0; b])?;
            let plain = contrastive_loss(&mut tape, logits)?;
            let (weighted, plain) = (tape.scalar(weighted), tape.scalar(plain));
            let l = tape.value(logits);
            let direct: f64 = (0..b)
                .map(|r| {
                    let row = l.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    lse - row[r]
                })
                .sum();
            worst = worst.max(rel(weighted, plain)).max(rel(weighted, direct));
        }
        Ok((worst < 1e-6, format!("max relative gap {worst:.2e} over {BATCHES} batches")))
    })
}

/// Gradients below this magnitude are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;
const COORDS: usize = 48;
pub const GRAD_CONFIGS: usize = 20;

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over up to
/// [`COORDS`] sampled parameter coordinates, using central differences. A
/// non-scalar output is reduced by a fixed random projection.
fn grad_error<B: Clone>(
    bundle: &B,
    params: impl Fn(&B) -> Vec<&Param<f64>>,
    params_mut: impl Fn(&mut B) -> Vec<&mut Param<f64>>,
    f: impl Fn(&B, &mut Tape<f64>) -> Result<Var>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let shape = {
        let mut tape = Tape::new();
        let out = f(bundle, &mut tape)?;
        tape.value(out).shape().to_vec()
    };
    let projection = (shape.iter().product::<usize>() > 1).then(|| normal(rng, &shape, 1.0));
    let eval = |b: &B, tape: &mut Tape<f64>| -> Result<Var> {
        let out = f(b, tape)?;
        Ok(match &projection {
            None => out,
            Some(p) => {
                let pv = tape.constant(p.clone());
                let prod = tape.mul(out, pv)?;
                tape.sum(prod)
            }
        })
    };

    let mut tape = Tape::new();
    let loss = eval(bundle, &mut tape)?;
    let grads = tape.backward(loss)?;
    let ps = params(bundle);
    let mut coords: Vec<(usize, usize)> = ps
        .iter()
        .enumerate()
        .flat_map(|(k, p)| (0..p.value.numel()).map(move |i| (k, i)))
        .collect();
    if coords.len() > COORDS {
        for n in 0..COORDS {
            let m = rng.random_range(n..coords.len());
            coords.swap(n, m);
        }
        coords.truncate(COORDS);
    }
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(k, i)| grads.of_param(ps[k]).map_or(0.0, |g| g[i]))
        .collect();

    let mut worst = 0.0f64;
    for (&(k, i), a) in coords.iter().zip(analytic) {
        let side = |delta: f64| -> Result<f64> {
            let mut b = bundle.clone();
            params_mut(&mut b)[k].value.data_mut()[i] += delta;
            let mut tape = Tape::new();
            let l = eval(&b, &mut tape)?;
            Ok(tape.scalar(l))
        };
        let x = ps[k].value.data()[i];
        let h = FD_STEP * x.abs().max(1.0);
        let numeric = (side(h)? - side(-h)?) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        if !err.is_finite() {
            return Err(Error::invalid(format!("non-finite gradient error at param {k}[{i}]")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

type Leaves = Vec<Param<f64>>;

fn leaves(ts: Vec<Tensor<f64>>) -> Leaves {
    ts.into_iter().enumerate().map(|(i, t)| Param::new(format!("x{i}"), t)).collect()
}

/// Values bounded away from zero, so relu and friends are smooth nearby.
fn off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn positive(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.1..2.0)).collect()).expect("shape matches")
}

fn check_leaves(
    xs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    grad_error(
        &leaves(xs),
        |b: &Leaves| b.iter().collect(),
        |b: &mut Leaves| b.iter_mut().collect(),
        |b: &Leaves, tape: &mut Tape<f64>| {
            let vs: Vec<Var> = b.iter().map(|p| tape.bind(p, true)).collect();
            f(tape, &vs)
        },
        rng,
    )
}

type OpCase = fn(&mut ChaCha8Rng) -> Result<f64>;

fn dims(rng: &mut impl Rng) -> (usize, usize) {
    (rng.random_range(1..=5), rng.random_range(1..=5))
}

fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("matmul", |r| {
            let (m, k) = dims(r);
            let n = r.random_range(1..=5);
            check_leaves(vec![normal(r, &[m, k], 1.0), normal(r, &[k, n], 1.0)], |t, v| t.matmul(v[0], v[1]), r)
        }),
        ("matmul_t(aᵀ·b)", |r| {
            let (m, k) = dims(r);
            let n = r.random_range(1..=5);
            check_leaves(vec![normal(r, &[k, m], 1.0), normal(r, &[k, n], 1.0)], |t, v| t.matmul_t(v[0], v[1], true, false), r)
        }),
        ("matmul_t(a·bᵀ)", |r| {
            let (m, k) = dims(r);
            let n = r.random_range(1..=5);
            check_leaves(vec![normal(r, &[m, k], 1.0), normal(r, &[n, k], 1.0)], |t, v| t.matmul_t(v[0], v[1], false, true), r)
        }),
        ("matmul_t(aᵀ·bᵀ)", |r| {
            let (m, k) = dims(r);
            let n = r.random_range(1..=5);
            check_leaves(vec![normal(r, &[k, m], 1.0), normal(r, &[n, k], 1.0)], |t, v| t.matmul_t(v[0], v[1], true, true), r)
        }),
        ("add_row", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0), normal(r, &[n], 1.0)], |t, v| t.add_row(v[0], v[1]), r)
        }),
        ("add", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0), normal(r, &[m, n], 1.0)], |t, v| t.add(v[0], v[1]), r)
        }),
        ("sub", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0), normal(r, &[m, n], 1.0)], |t, v| t.sub(v[0], v[1]), r)
        }),
        ("mul", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0), normal(r, &[m, n], 1.0)], |t, v| t.mul(v[0], v[1]), r)
        }),
        ("minimum", |r| {
            let (m, n) = dims(r);
            let a = normal(r, &[m, n], 1.0);
            // keep the operands apart so no coordinate sits on a tie
            let gap = off_kink(r, &[m, n]);
            let b = Tensor::new(&[m, n], a.data().iter().zip(gap.data()).map(|(x, g)| x + g).collect())?;
            check_leaves(vec![a, b], |t, v| t.minimum(v[0], v[1]), r)
        }),
        ("scale", |r| {
            let (m, n) = dims(r);
            let c = r.random_range(-2.0..2.0);
            check_leaves(vec![normal(r, &[m, n], 1.0)], move |t, v| Ok(t.scale(v[0], c)), r)
        }),
        ("add_scalar", |r| {
            let (m, n) = dims(r);
            let c = r.random_range(-2.0..2.0);
            check_leaves(vec![normal(r, &[m, n], 1.0)], move |t, v| Ok(t.add_scalar(v[0], c)), r)
        }),
        ("neg", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0)], |t, v| Ok(t.neg(v[0])), r)
        }),
        ("mul_scalar", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0), normal(r, &[1], 1.0)], |t, v| t.mul_scalar(v[0], v[1]), r)
        }),
        ("relu", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![off_kink(r, &[m, n])], |t, v| Ok(t.relu(v[0])), r)
        }),
        ("tanh", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0)], |t, v| Ok(t.tanh(v[0])), r)
        }),
        ("exp", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0)], |t, v| Ok(t.exp(v[0])), r)
        }),
        ("log", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![positive(r, &[m, n])], |t, v| Ok(t.log(v[0])), r)
        }),
        ("square", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0)], |t, v| Ok(t.square(v[0])), r)
        }),
        ("softmax", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 2.0)], |t, v| t.softmax(v[0]), r)
        }),
        ("log_softmax", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 2.0)], |t, v| t.log_softmax(v[0]), r)
        }),
        ("layer_norm", |r| {
            let m = r.random_range(1..=5);
            let n = r.random_range(2..=6);
            check_leaves(
                vec![normal(r, &[m, n], 1.0), normal(r, &[n], 1.0), normal(r, &[n], 1.0)],
                |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
                r,
            )
        }),
        ("conv2d", |r| {
            let b = r.random_range(1..=2);
            let size = r.random_range(4..=7);
            let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
            let k = r.random_range(1..=3);
            let stride = r.random_range(1..=2);
            check_leaves(
                vec![
                    normal(r, &[b, size, size, cin], 1.0),
                    normal(r, &[cout, k, k, cin], 0.5),
                    normal(r, &[cout], 0.5),
                ],
                move |t, v| t.conv2d(v[0], v[1], v[2], stride),
                r,
            )
        }),
        ("sum", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0)], |t, v| Ok(t.sum(v[0])), r)
        }),
        ("mean", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0)], |t, v| Ok(t.mean(v[0])), r)
        }),
        ("sum_cols", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0)], |t, v| t.sum_cols(v[0]), r)
        }),
        ("reshape", |r| {
            let (m, n) = dims(r);
            check_leaves(vec![normal(r, &[m, n], 1.0)], move |t, v| t.reshape(v[0], &[n, m]), r)
        }),
        ("slice_cols", |r| {
            let m = r.random_range(1..=5);
            let n = r.random_range(2..=6);
            let start = r.random_range(0..n - 1);
            let end = r.random_range(start + 1..=n);
            check_leaves(vec![normal(r, &[m, n], 1.0)], move |t, v| t.slice_cols(v[0], start, end), r)
        }),
        ("concat_cols", |r| {
            let (m, n) = dims(r);
            let n2 = r.random_range(1..=5);
            check_leaves(vec![normal(r, &[m, n], 1.0), normal(r, &[m, n2], 1.0)], |t, v| t.concat_cols(v[0], v[1]), r)
        }),
        ("pick", |r| {
            let (m, n) = dims(r);
            let idx: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
            check_leaves(vec![normal(r, &[m, n], 1.0)], move |t, v| t.pick(v[0], &idx), r)
        }),
        ("bilinear", |r| {
            let (b, d) = dims(r);
            let l = r.random_range(1..=5);
            check_leaves(
                vec![normal(r, &[b, d], 1.0), normal(r, &[d, d], 1.0), normal(r, &[l, d], 1.0)],
                |t, v| t.bilinear(v[0], v[1], v[2]),
                r,
            )
        }),
        ("gaussian_rsample", |r| {
            let (m, n) = dims(r);
            let noise = normal(r, &[m, n], 1.0);
            check_leaves(
                vec![normal(r, &[m, n], 1.0), normal(r, &[m, n], 0.5)],
                move |t, v| t.gaussian_rsample(v[0], v[1], noise.clone()),
                r,
            )
        }),
    ]
}

#[derive(Clone)]
struct SacNets {
    encoder: Encoder<f64>,
    critic: CriticPair<f64>,
    actor: GaussianActor<f64>,
    head: ContrastiveHead<f64>,
    log_alpha: Param<f64>,
}

/// Moves every parameter off its initial value. Zero-initialised biases can
/// otherwise leave a relu input exactly at its kink when a whole layer is
/// inactive for a sample.
fn jitter(params: Vec<&mut Param<f64>>, rng: &mut impl Rng) {
    for p in params {
        for v in p.value.data_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

impl SacNets {
    fn new(rng: &mut ChaCha8Rng, action_dim: usize) -> Self {
        let spec = EncoderSpec::Pixel {
            size: 9,
            channels: 2,
            filters: 3,
            feature_dim: 5,
        };
        let mut nets = Self {
            encoder: Encoder::new(spec, rng),
            critic: CriticPair::new(5, action_dim, 8, rng),
            actor: GaussianActor::new(5, 8, action_dim, rng),
            head: ContrastiveHead::new(5, rng),
            log_alpha: Param::new("log_alpha", Tensor::scalar(rng.random_range(-2.0..0.5))),
        };
        let mut all = nets.encoder.params_mut();
        all.extend(nets.critic.params_mut());
        all.extend(nets.actor.params_mut());
        jitter(all, rng);
        nets
    }
}

fn composite_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("curiosity-weighted critic loss", |r| {
            let (b, a) = (r.random_range(2..=5), r.random_range(1..=2));
            let nets = SacNets::new(r, a);
            let (xi, xj) = (normal(r, &[b, 9, 9, 2], 1.0), normal(r, &[b, 9, 9, 2], 1.0));
            let act = normal(r, &[b, a], 0.5);
            let y = normal(r, &[b], 1.0);
            let c: Vec<f64> = (0..b).map(|_| r.random()).collect();
            grad_error(
                &nets,
                |n: &SacNets| [n.encoder.params(), n.critic.params()].concat(),
                |n: &mut SacNets| {
                    let mut p = n.encoder.params_mut();
                    p.extend(n.critic.params_mut());
                    p
                },
                |n: &SacNets, t: &mut Tape<f64>| {
                    let mut views = Vec::new();
                    for x in [&xi, &xj] {
                        let xv = t.constant(x.clone());
                        let z = n.encoder.forward(t, xv, true)?;
                        let av = t.constant(act.clone());
                        let (q1, q2) = n.critic.forward(t, z, av, true)?;
                        views.push(TwinQ { q1, q2 });
                    }
                    let yv = t.constant(y.clone());
                    regularized_critic_loss(t, views[0], views[1], yv, &c)
                },
                r,
            )
        }),
        ("augmentation-averaged critic loss", |r| {
            let (b, a) = (r.random_range(2..=5), r.random_range(1..=2));
            let nets = SacNets::new(r, a);
            let z = normal(r, &[b, 5], 1.0);
            let act = normal(r, &[b, a], 0.5);
            let y = normal(r, &[b], 1.0);
            grad_error(
                &nets,
                |n: &SacNets| n.critic.params(),
                |n: &mut SacNets| n.critic.params_mut(),
                |n: &SacNets, t: &mut Tape<f64>| {
                    let zv = t.constant(z.clone());
                    let av = t.constant(act.clone());
                    let (q1, q2) = n.critic.forward(t, zv, av, true)?;
                    let yv = t.constant(y.clone());
                    drq_critic_loss(t, &[TwinQ { q1, q2 }], yv)
                },
                r,
            )
        }),
        ("curiosity-weighted contrastive loss", |r| {
            let b = r.random_range(2..=5);
            let nets = SacNets::new(r, 1);
            let x = normal(r, &[b, 9, 9, 2], 1.0);
            let keys = normal(r, &[b, 5], 1.0);
            let w: Vec<f64> = (0..b).map(|_| r.random()).collect();
            grad_error(
                &nets,
                |n: &SacNets| [n.encoder.params(), n.head.params()].concat(),
                |n: &mut SacNets| {
                    let mut p = n.encoder.params_mut();
                    p.extend(n.head.params_mut());
                    p
                },
                |n: &SacNets, t: &mut Tape<f64>| {
                    let xv = t.constant(x.clone());
                    let q = n.encoder.forward(t, xv, true)?;
                    let k = t.constant(keys.clone());
                    let logits = n.head.logits(t, q, k, true)?;
                    weighted_contrastive_loss(t, logits, &w)
                },
                r,
            )
        }),
        ("actor loss", |r| {
            let (b, a) = (r.random_range(2..=5), r.random_range(1..=2));
            let nets = SacNets::new(r, a);
            let z = normal(r, &[b, 5], 1.0);
            let noise = normal(r, &[b, a], 1.0);
            grad_error(
                &nets,
                |n: &SacNets| n.actor.params(),
                |n: &mut SacNets| n.actor.params_mut(),
                |n: &SacNets, t: &mut Tape<f64>| {
                    let zv = t.constant(z.clone());
                    let s = n.actor.sample(t, zv, true, noise.clone())?;
                    let (q1, q2) = n.critic.forward(t, zv, s.action, false)?;
                    let la = t.bind(&n.log_alpha, false);
                    Ok(actor_and_alpha_losses(t, q1, q2, s.log_prob, la, -(a as f64))?.0)
                },
                r,
            )
        }),
        ("temperature loss", |r| {
            let (b, a) = (r.random_range(2..=5), r.random_range(1..=2));
            let nets = SacNets::new(r, a);
            let z = normal(r, &[b, 5], 1.0);
            let noise = normal(r, &[b, a], 1.0);
            let target = -(a as f64) * r.random_range(0.5..1.5);
            grad_error(
                &nets,
                |n: &SacNets| vec![&n.log_alpha],
                |n: &mut SacNets| vec![&mut n.log_alpha],
                |n: &SacNets, t: &mut Tape<f64>| {
                    let zv = t.constant(z.clone());
                    let s = n.actor.sample(t, zv, false, noise.clone())?;
                    let (q1, q2) = n.critic.forward(t, zv, s.action, false)?;
                    let la = t.bind(&n.log_alpha, true);
                    Ok(actor_and_alpha_losses(t, q1, q2, s.log_prob, la, target)?.1)
                },
                r,
            )
        }),
        ("A2C losses", |r| {
            let (b, acts) = (r.random_range(2..=6), r.random_range(2..=4));
            let spec = EncoderSpec::Embedding {
                height: 3,
                width: 3,
                channels: 2,
                hidden: 8,
                feature_dim: 5,
            };
            let mut nets = (
                Encoder::<f64>::new(spec, r),
                CategoricalActor::<f64>::new(5, 8, acts, r),
                ValueHead::<f64>::new(5, 8, r),
            );
            let mut all = nets.0.params_mut();
            all.extend(nets.1.params_mut());
            all.extend(nets.2.params_mut());
            jitter(all, r);
            let x = normal(r, &[b, 3, 3, 2], 1.0);
            let actions: Vec<usize> = (0..b).map(|_| r.random_range(0..acts)).collect();
            let adv: Vec<f64> = (0..b).map(|_| r.sample(StandardNormal)).collect();
            let ret: Vec<f64> = (0..b).map(|_| r.sample(StandardNormal)).collect();
            let (ent, val) = (r.random_range(0.0..0.1), r.random_range(0.1..1.0));
            type Nets = (Encoder<f64>, CategoricalActor<f64>, ValueHead<f64>);
            grad_error(
                &nets,
                |n: &Nets| [n.0.params(), n.1.params(), n.2.params()].concat(),
                |n: &mut Nets| {
                    let mut p = n.0.params_mut();
                    p.extend(n.1.params_mut());
                    p.extend(n.2.params_mut());
                    p
                },
                |n: &Nets, t: &mut Tape<f64>| {
                    let xv = t.constant(x.clone());
                    let z = n.0.forward(t, xv, true)?;
                    let logits = n.1.logits(t, z, true)?;
                    let v = n.2.forward(t, z, true)?;
                    Ok(a2c_losses(t, logits, v, &actions, &adv, &ret, ent, val)?.total)
                },
                r,
            )
        }),
    ]
}

/// Worst gradient error per case over [`GRAD_CONFIGS`] random configurations.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, case) in op_cases().into_iter().chain(composite_cases()) {
        let mut worst = 0.0f64;
        for _ in 0..GRAD_CONFIGS {
            worst = worst.max(case(&mut rng)?);
        }
        out.push((name, worst));
    }
    Ok(out)
}

pub fn criterion_4(seed: u64) -> Result<Report> {
    timed(4, "finite-difference gradient suite", 120.0, || {
        let suite = gradient_suite(seed)?;
        let (name, worst) = suite
            .iter()
            .copied()
            .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
        let failing: Vec<String> = suite
            .iter()
            .filter(|c| c.1 >= 1e-5)
            .map(|c| format!("{} ({:.2e})", c.0, c.1))
            .collect();
        let detail = if failing.is_empty() {
            format!(
                "{} cases x {GRAD_CONFIGS} configs, worst relative error {worst:.2e} ({name})",
                suite.len()
            )
        } else {
            format!("failing cases: {}", failing.join(", "))
        };
        Ok((failing.is_empty(), detail))
    })
}

const DRAWS: usize = 100_000;

/// Chi-square goodness of fit of weighted sampling, and the closed form of
/// repeated momentum updates.
pub fn criterion_5(seed: u64) -> Result<Report> {
    timed(5, "replay sampling and weight momentum", 30.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 50;
        let mut buffer = ReplayBuffer::new(n)?;
        let blank = Observation::new(1, 1, 1, vec![0])?;
        for _ in 0..n {
            let i = buffer.push(Transition::new(blank.clone(), vec![0.0], 0.0, false, blank.clone()));
            buffer.set_weight(i, rng.random_range(0.05..=1.0))?;
        }
        let p: Vec<f64> = (0..n).map(|i| buffer.probability(i)).collect();
        let mut counts = vec![0usize; n];
        for i in buffer.sample(DRAWS, &mut rng)? {
            counts[i] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(&p)
            .map(|(&o, &pi)| {
                let e = pi * DRAWS as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        let crit = ChiSquared::new((n - 1) as f64)
            .map_err(|e| Error::invalid(e.to_string()))?
            .inverse_cdf(0.99);

        let mut worst = 0.0f64;
        for _ in 0..100 {
            let (w0, c, cn) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            let beta = rng.random_range(0.5..1.0);
            let mut w = w0;
            for s in 1..=1000 {
                w = momentum_weight(w, c, cn, beta)?;
                let closed = beta.powi(s) * w0 + (1.0 - beta.powi(s)) * (c + cn) / 2.0;
                worst = worst.max((w - closed).abs());
            }
        }
        Ok((
            stat < crit && worst < 1e-9,
            format!("chi-square {stat:.1} < {crit:.1} (df {}); closed-form gap {worst:.1e}", n - 1),
        ))
    })
}

/// Exhaustive scans for both selectors with five views.
pub fn criterion_6(seed: u64) -> Result<Report> {
    timed(6, "view selection oracles", 30.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (views, trials) = (5, 1000);
        let (mut agree_c, mut agree_o) = (0, 0);
        for _ in 0..trials {
            let b = rng.random_range(2..=12);
            let d = rng.random_range(2..=8);
            let query = normal(&mut rng, &[b, d], 1.0);
            let keys: Vec<Tensor<f64>> = (0..views).map(|_| normal(&mut rng, &[b, d], 1.0)).collect();
            let w = normal(&mut rng, &[d, d], 1.0);
            let fixed = rng.random_range(0..views);
            let sel = select_max_curiosity(&query, &keys, &w, fixed)?;
            let mut ok = true;
            for s in 0..b {
                let mut best = (usize::MAX, f64::NEG_INFINITY);
                for (j, k) in keys.iter().enumerate() {
                    if j == fixed {
                        continue;
                    }
                    let score = |l: usize| -> f64 {
                        (0..d)
                            .map(|x| (0..d).map(|y| query.row(s)[x] * w.row(x)[y] * k.row(l)[y]).sum::<f64>())
                            .sum()
                    };
                    let logits: Vec<f64> = (0..b).map(score).collect();
                    let denom: f64 = logits.iter().map(|l| l.exp()).sum();
                    let c = 1.0 - logits[s].exp() / denom;
                    if c > best.1 {
                        best = (j, c);
                    }
                }
                ok &= sel.j[s] == best.0 && (sel.c[s] - best.1).abs() < 1e-9;
            }
            agree_c += ok as usize;

            let side = rng.random_range(4..=48);
            let (th, tw) = (rng.random_range(1..=side), rng.random_range(1..=side));
            let specs: Vec<CropSpec> = (0..views)
                .map(|_| CropSpec::random((side, side), (th, tw), &mut rng))
                .collect::<Result<_>>()?;
            let covered = |s: &CropSpec, r: usize, c: usize| {
                (s.offset.0..s.offset.0 + th).contains(&r) && (s.offset.1..s.offset.1 + tw).contains(&c)
            };
            let mut best = ((0, 0), usize::MAX);
            for i in 0..views {
                for j in i + 1..views {
                    let shared = (0..side)
                        .flat_map(|r| (0..side).map(move |c| (r, c)))
                        .filter(|&(r, c)| covered(&specs[i], r, c) && covered(&specs[j], r, c))
                        .count();
                    if shared < best.1 {
                        best = ((i, j), shared);
                    }
                }
            }
            let (i, j) = select_min_overlap(&specs)?;
            let frac = pixel_overlap(&specs[i], &specs[j])?;
            agree_o += ((i, j) == best.0 && (frac - best.1 as f64 / (th * tw) as f64).abs() < 1e-12) as usize;
        }
        Ok((
            agree_c == trials && agree_o == trials,
            format!("max-curiosity {agree_c}/{trials}, min-overlap {agree_o}/{trials}"),
        ))
    })
}

/// Pendulum configuration running exactly `updates` training steps.
pub fn sac_config_with_updates(updates: u64) -> ExperimentConfig {
    let base = ExperimentConfig::default();
    let repeat = crate::env::make(&base.env).map(|e| e.action_repeat() as u64).unwrap_or(1);
    ExperimentConfig {
        total_steps: base.init_steps + repeat * (updates - 1),
        eval_interval: 1000,
        eval_episodes: 2,
        ..base
    }
}

/// CCLF with every component off against the two-view CURL baseline, both
/// through the harness: metrics, per-update curiosity and final parameters
/// must agree bit for bit.
pub fn criterion_7(out: &Path, seed: u64) -> Result<Report> {
    timed(7, "all-off CCLF equals the two-view CURL baseline", 300.0, || {
        let updates = 500;
        let mut cclf = sac_config_with_updates(updates);
        cclf.seed = seed;
        cclf.learner = Learner::SacCclf;
        cclf.set_toggles(ComponentToggles::default());
        let curl = ExperimentConfig {
            learner: Learner::CurlBaseline,
            curl_views: 2,
            ..cclf.clone()
        };
        let a = run(&cclf, &out.join("cclf-all-off"), &mut |_| {})?;
        let b = run(&curl, &out.join("curl-2-views"), &mut |_| {})?;
        let curiosity_a = read_curiosity(&a.dir.join(CURIOSITY_FILE))?;
        let curiosity_b = read_curiosity(&b.dir.join(CURIOSITY_FILE))?;
        let ck_a = Checkpoint::load(&a.dir.join(CHECKPOINT_FILE))?;
        let ck_b = Checkpoint::load(&b.dir.join(CHECKPOINT_FILE))?;
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let params_equal = ck_a.tensors.len() == ck_b.tensors.len()
            && ck_a
                .tensors
                .iter()
                .all(|(k, t)| ck_b.tensors.get(k).is_some_and(|u| bits(t) == bits(u)));
        let rows_equal = rows_bits(&a.rows) == rows_bits(&b.rows);
        let curiosity_equal = curiosity_bits(&curiosity_a) == curiosity_bits(&curiosity_b);
        let ran = curiosity_a.len() as u64;
        Ok((
            ran == updates && rows_equal && curiosity_equal && params_equal,
            format!(
                "{ran} updates; metrics {}, curiosity {}, parameters {}",
                same(rows_equal),
                same(curiosity_equal),
                same(params_equal)
            ),
        ))
    })
}

fn same(b: bool) -> &'static str {
    if b {
        "identical"
    } else {
        "DIFFER"
    }
}

fn rows_bits(rows: &[MetricsRow]) -> Vec<String> {
    // the serialised form is lossless for f64, so equal strings mean equal bits
    rows.iter().map(|r| serde_json::to_string(r).unwrap_or_default()).collect()
}

fn curiosity_bits(rows: &[CuriosityRow]) -> Vec<(u64, u64, u64, u64, u64)> {
    rows.iter()
        .map(|r| (r.env_step, r.update, r.mean_c.to_bits(), r.mean_c_next.to_bits(), r.mean_r_i.to_bits()))
        .collect()
}

pub const LEARNING_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// A2C-CCLF against plain A2C on Empty-6×6 over 150K frames.
pub fn criterion_8(out: &Path, seeds: &[u64]) -> Result<Report> {
    timed(8, "A2C-CCLF learns Empty-6x6 faster than A2C", 3600.0, || {
        let base = ExperimentConfig {
            total_steps: 150_000,
            eval_interval: 5_000,
            ..ExperimentConfig::a2c("empty-6")
        };
        let (mut reached, mut wins) = (0, 0);
        let mut lines = Vec::new();
        for &seed in seeds {
            let mut auc = [0.0; 2];
            for (k, learner) in [Learner::A2cCclf, Learner::A2cBaseline].into_iter().enumerate() {
                let cfg = ExperimentConfig {
                    learner,
                    seed,
                    ..base.clone()
                };
                let r = run(&cfg, &out.join(format!("{}-{seed}", learner.name())), &mut |_| {})?;
                auc[k] = area_under_curve(&r.rows);
                if k == 0 && r.rows.iter().any(|row| row.eval_return_mean >= 0.8) {
                    reached += 1;
                }
            }
            wins += (auc[0] > auc[1]) as usize;
            lines.push(format!("{:.3}/{:.3}", auc[0], auc[1]));
        }
        let n = seeds.len();
        Ok((
            n > 0 && reached * 5 >= 4 * n && wins * 5 >= 4 * n,
            format!(
                "reached 0.80 in {reached}/{n} seeds; AUC wins {wins}/{n} (CCLF/A2C: {})",
                lines.join(", ")
            ),
        ))
    })
}

/// Trailing moving average of mean `c` over `window` env steps ending at `at`.
pub fn curiosity_moving_average(rows: &[CuriosityRow], at: u64, window: u64) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.env_step <= at && r.env_step + window > at)
        .map(|r| r.mean_c)
        .collect();
    (!v.is_empty()).then(|| mean(&v))
}

/// SAC-CCLF against the CURL baseline on the pendulum over 50K env steps,
/// and the curiosity trend of the CCLF runs.
pub fn criteria_9_and_10(out: &Path, seeds: &[u64]) -> Result<(Report, Report)> {
    let start = Instant::now();
    let base = ExperimentConfig::default();
    let mut auc = [Vec::new(), Vec::new()];
    let mut last = [Vec::new(), Vec::new()];
    let mut trend = Vec::new();
    let mut in_range = true;
    for &seed in seeds {
        for (k, learner) in [Learner::SacCclf, Learner::CurlBaseline].into_iter().enumerate() {
            let cfg = ExperimentConfig {
                learner,
                seed,
                ..base.clone()
            };
            let r = run(&cfg, &out.join(format!("{}-{seed}", learner.name())), &mut |_| {})?;
            auc[k].push(area_under_curve(&r.rows));
            last[k].push(r.rows.last().map_or(f64::NAN, |row| row.eval_return_mean));
            if k == 0 {
                let rows = read_curiosity(&r.dir.join(CURIOSITY_FILE))?;
                in_range &= !rows.is_empty() && rows.iter().all(|r| r.mean_c > 0.0 && r.mean_c < 1.0);
                let early = curiosity_moving_average(&rows, 2_000, 5_000);
                let late = curiosity_moving_average(&rows, base.total_steps, 5_000);
                trend.push((early, late));
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (ma, mb) = (mean(&auc[0]), mean(&auc[1]));
    let (fa, fb) = (mean(&last[0]), mean(&last[1]));
    let nine = Report {
        id: 9,
        name: "SAC-CCLF beats CURL on the pendulum",
        passed: !seeds.is_empty() && ma > mb && fa >= fb && elapsed <= 4.0 * 3600.0,
        detail: format!("mean AUC {ma:.1} vs {mb:.1}; mean final return {fa:.1} vs {fb:.1}"),
        seconds: elapsed,
        budget_seconds: 4.0 * 3600.0,
    };
    let falling = trend
        .iter()
        .filter(|(e, l)| matches!((e, l), (Some(e), Some(l)) if l < e))
        .count();
    let fmt_ma = |v: &Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    let ten = Report {
        id: 10,
        name: "curiosity stays in (0,1) and falls",
        passed: !seeds.is_empty() && in_range && falling == seeds.len(),
        detail: format!(
            "in range: {in_range}; moving average fell in {falling}/{} seeds ({})",
            seeds.len(),
            trend
                .iter()
                .map(|(e, l)| format!("{} -> {}", fmt_ma(e), fmt_ma(l)))
                .collect::<Vec<_>>()
                .join(", ")
        ),
        seconds: elapsed,
        budget_seconds: 4.0 * 3600.0,
    };
    Ok((nine, ten))
}

/// Every toggle combination through a 2K-step pendulum run, then the summary.
pub fn criterion_11(out: &Path, seed: u64) -> Result<Report> {
    timed(11, "ablation harness smoke run", 1200.0, || {
        let base = ExperimentConfig {
            total_steps: 2_000,
            eval_interval: 1_000,
            eval_episodes: 2,
            checkpoint: false,
            ..ExperimentConfig::default()
        };
        let rows = run_ablation(&base, &[seed], out, 1)?;
        let md = std::fs::read_to_string(out.join(SUMMARY_MD))?;
        let finite = rows.iter().all(|r| r.early_mean.is_finite() && r.final_mean.is_finite());
        let ok = rows.len() == 16 && finite && out.join(SUMMARY_CSV).exists() && md.lines().count() == 18;
        Ok((ok, format!("{} combinations, all finite: {finite}, summary table {} lines", rows.len(), md.lines().count())))
    })
}

/// Criteria 1 to 7, the ones that finish in minutes.
pub fn quick(out: &Path, seed: u64) -> Result<Vec<Report>> {
    Ok(vec![
        criterion_1(seed)?,
        criterion_2(seed)?,
        criterion_3(seed)?,
        criterion_4(seed)?,
        criterion_5(seed)?,
        criterion_6(seed)?,
        criterion_7(out, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[ignore]
    fn print_gradient_suite() {
        for (name, e) in gradient_suite(7).unwrap() {
            println!("{name}: {e:.3e}");
        }
    }

    #[test]
    fn moving_average_window() {
        let rows: Vec<CuriosityRow> = (1..=10)
            .map(|k| CuriosityRow {
                env_step: k * 1000,
                update: k,
                mean_c: k as f64,
                mean_c_next: 0.0,
                mean_r_i: 0.0,
            })
            .collect();
        assert_eq!(curiosity_moving_average(&rows, 2_000, 5_000), Some(1.5));
        assert_eq!(curiosity_moving_average(&rows, 10_000, 3_000), Some(9.0));
        assert_eq!(curiosity_moving_average(&rows, 500, 100), None);
    }

    #[test]
    fn config_runs_the_requested_number_of_updates() {
        let cfg = sac_config_with_updates(500);
        assert_eq!(cfg.total_steps, 1000 + 4 * 499);
        cfg.validate().unwrap();
    }

    #[test]
    fn gradient_check_catches_a_wrong_gradient() {
        // detach hides the true gradient, so the check must report it
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = check_leaves(
            vec![normal(&mut rng, &[3], 1.0)],
            |t, v| {
                let d = t.detach(v[0]);
                t.mul(v[0], d)
            },
            &mut rng,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }
}
