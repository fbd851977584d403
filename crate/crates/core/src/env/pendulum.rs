use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, ActionSpace, Environment, Observation, Step};
use crate::error::{Error, Result};

pub const FRAME_SIZE: usize = 48;
pub const STACK: usize = 3;
pub const ACTION_REPEAT: usize = 4;
/// Physics steps per episode.
pub const HORIZON: usize = 200;

const GRAVITY: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
const DT: f64 = 0.05;
const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;
const ROD_PIXELS: f64 = 18.0;
const ROD_HALF_WIDTH: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumState {
    /// Angle from upright, radians.
    pub theta: f64,
    pub theta_dot: f64,
}

impl PendulumState {
    /// Advances one physics step with torque `u` (semi-implicit Euler).
    pub fn advance(self, u: f64) -> Self {
        let acc = 3.0 * GRAVITY / (2.0 * LENGTH) * self.theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u;
        let theta_dot = (self.theta_dot + acc * DT).clamp(-MAX_SPEED, MAX_SPEED);
        Self {
            theta: self.theta + theta_dot * DT,
            theta_dot,
        }
    }

    /// Mechanical energy of the model above (per unit inertia scale).
    pub fn energy(&self) -> f64 {
        0.5 * self.theta_dot.powi(2) + 3.0 * GRAVITY / (2.0 * LENGTH) * self.theta.cos()
    }
}

/// Angle wrapped into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Per-physics-step reward in `[0, 1]`: 1 upright and still, 0 hanging still.
pub fn reward(state: &PendulumState, u: f64) -> f64 {
    let cost = wrap_angle(state.theta).powi(2) + 0.1 * state.theta_dot.powi(2) + 0.001 * u * u;
    (1.0 - cost / (PI * PI)).clamp(0.0, 1.0)
}

/// Grayscale 48×48 picture of the rod, anti-aliased by distance to its axis.
pub fn render_frame(theta: f64) -> Vec<u8> {
    let c = (FRAME_SIZE as f64 - 1.0) / 2.0;
    // row grows downward; θ = 0 points up
    let (er, ec) = (c - ROD_PIXELS * theta.cos(), c + ROD_PIXELS * theta.sin());
    let (dr, dc) = (er - c, ec - c);
    let len2 = dr * dr + dc * dc;
    let mut out = vec![0u8; FRAME_SIZE * FRAME_SIZE];
    for r in 0..FRAME_SIZE {
        for col in 0..FRAME_SIZE {
            let (pr, pc) = (r as f64 - c, col as f64 - c);
            let t = ((pr * dr + pc * dc) / len2).clamp(0.0, 1.0);
            let dist = ((pr - t * dr).powi(2) + (pc - t * dc).powi(2)).sqrt();
            let v = (ROD_HALF_WIDTH + 0.5 - dist).clamp(0.0, 1.0);
            out[r * FRAME_SIZE + col] = (v * 255.0).round() as u8;
        }
    }
    out
}

/// Pendulum swing-up seen through a stack of the last three rendered frames.
#[derive(Clone, Debug)]
pub struct PixelPendulum {
    state: PendulumState,
    frames: Vec<Vec<u8>>,
    steps: usize,
    rng: ChaCha8Rng,
}

impl Default for PixelPendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl PixelPendulum {
    pub fn new() -> Self {
        let state = PendulumState {
            theta: PI,
            theta_dot: 0.0,
        };
        let f = render_frame(state.theta);
        Self {
            state,
            frames: vec![f; STACK],
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn state(&self) -> PendulumState {
        self.state
    }

    /// Places the pendulum in `state` and refills the frame stack.
    pub fn set_state(&mut self, state: PendulumState) -> Observation {
        self.state = state;
        self.steps = 0;
        let f = render_frame(state.theta);
        self.frames = vec![f; STACK];
        self.observation()
    }

    fn observation(&self) -> Observation {
        let n = FRAME_SIZE * FRAME_SIZE;
        let mut data = Vec::with_capacity(n * STACK);
        for p in 0..n {
            for f in &self.frames {
                data.push(f[p]);
            }
        }
        Observation::new(FRAME_SIZE, FRAME_SIZE, STACK, data).expect("frame size")
    }
}

impl Environment for PixelPendulum {
    fn observation_shape(&self) -> [usize; 3] {
        [FRAME_SIZE, FRAME_SIZE, STACK]
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: 1 }
    }

    fn action_repeat(&self) -> usize {
        ACTION_REPEAT
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = self.rng.random_range(-PI..=PI);
        let theta_dot = self.rng.random_range(-1.0..=1.0);
        self.set_state(PendulumState { theta, theta_dot })
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        let a = match action {
            Action::Continuous(v) if v.len() == 1 => v[0] as f64,
            other => return Err(Error::invalid(format!("pendulum expects one torque, got {other:?}"))),
        };
        if !a.is_finite() {
            return Err(Error::invalid("non-finite torque"));
        }
        let clamped = !(-1.0..=1.0).contains(&a);
        let u = a.clamp(-1.0, 1.0) * MAX_TORQUE;
        let mut total = 0.0;
        for _ in 0..ACTION_REPEAT {
            total += reward(&self.state, u);
            self.state = self.state.advance(u);
            self.steps += 1;
            if self.steps >= HORIZON {
                break;
            }
        }
        self.frames.remove(0);
        self.frames.push(render_frame(self.state.theta));
        Ok(Step {
            observation: self.observation(),
            reward: total,
            terminated: false,
            truncated: self.steps >= HORIZON,
            clamped,
        })
    }

    fn render(&self) -> (usize, usize, Vec<u8>) {
        (FRAME_SIZE, FRAME_SIZE, self.frames[STACK - 1].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_extremes() {
        let down = PendulumState {
            theta: PI,
            theta_dot: 0.0,
        };
        assert_eq!(reward(&down, 0.0), 0.0);
        let up = PendulumState {
            theta: 0.0,
            theta_dot: 0.0,
        };
        assert_eq!(reward(&up, 0.0), 1.0);
        let spin = PendulumState {
            theta: 0.3,
            theta_dot: 8.0,
        };
        assert!((0.0..=1.0).contains(&reward(&spin, 2.0)));
    }

    #[test]
    fn wrap_is_periodic() {
        assert!((wrap_angle(2.0 * PI + 0.5) - 0.5).abs() < 1e-12);
        assert!((wrap_angle(-0.5 - 4.0 * PI) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let mut a = PixelPendulum::new();
        let mut b = PixelPendulum::new();
        assert_eq!(a.reset(9), b.reset(9));
        for k in 0..20 {
            let act = Action::Continuous(vec![((k as f32) * 0.37).sin()]);
            let sa = a.step(&act).unwrap();
            let sb = b.step(&act).unwrap();
            assert_eq!(sa.observation, sb.observation);
            assert_eq!(sa.reward, sb.reward);
        }
        assert_ne!(a.reset(1), a.reset(2));
    }

    #[test]
    fn observation_shape_and_range() {
        let mut env = PixelPendulum::new();
        let o = env.reset(0);
        assert_eq!(o.shape(), [48, 48, 3]);
        assert!(o.data.contains(&255));
        assert!(o.data.contains(&0));
    }

    #[test]
    fn episode_length_and_reward_bounds() {
        let mut env = PixelPendulum::new();
        env.reset(3);
        let mut n = 0;
        loop {
            let s = env.step(&Action::Continuous(vec![1.5])).unwrap();
            assert!(s.clamped);
            assert!((0.0..=ACTION_REPEAT as f64).contains(&s.reward));
            n += 1;
            if s.done() {
                assert!(!s.terminated);
                break;
            }
        }
        assert_eq!(n, HORIZON / ACTION_REPEAT);
    }

    #[test]
    fn energy_has_no_secular_drift() {
        // released near upright: the swing stays below the speed clamp, so
        // semi-implicit Euler only oscillates around the initial energy
        let mut s = PendulumState {
            theta: 0.2,
            theta_dot: 0.0,
        };
        let e0 = s.energy();
        let range = 30.0;
        let n = 4000;
        for _ in 0..n {
            s = s.advance(0.0);
            assert!((s.energy() - e0).abs() < 0.1 * range);
        }
        assert!((s.energy() - e0).abs() / (n as f64) < 0.01 * range);
    }

    #[test]
    fn renderer_depends_only_on_angle() {
        assert_eq!(render_frame(1.0), render_frame(1.0 + 2.0 * PI));
        assert_ne!(render_frame(0.0), render_frame(PI));
    }
}
