//! Layers and the agent's networks.

pub mod checkpoint;
mod encoder;
mod heads;

pub use encoder::{Encoder, EncoderSpec};
pub use heads::{
    similarity_logits, ActorSample, CategoricalActor, ContrastiveHead, Critic, CriticPair,
    GaussianActor, ValueHead,
};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{Param, Real, Tape, Tensor, Var};

/// Anything that owns parameters.
pub trait Module<R: Real> {
    fn params(&self) -> Vec<&Param<R>>;
    fn params_mut(&mut self) -> Vec<&mut Param<R>>;
}

/// Orthogonal `rows×cols` matrix: orthonormal rows when `rows ≤ cols`,
/// orthonormal columns otherwise.
pub fn orthogonal<R: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<R> {
    let (r, c) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut m: Vec<f64> = (0..r * c).map(|_| rng.sample(StandardNormal)).collect();
    // modified Gram-Schmidt over the r short-side vectors
    for i in 0..r {
        for j in 0..i {
            let dot: f64 = (0..c).map(|k| m[i * c + k] * m[j * c + k]).sum();
            for k in 0..c {
                m[i * c + k] -= dot * m[j * c + k];
            }
        }
        let norm = (0..c).map(|k| m[i * c + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..c {
            m[i * c + k] /= norm;
        }
    }
    if rows <= cols {
        m.into_iter().map(R::lit).collect()
    } else {
        let mut out = vec![R::zero(); rows * cols];
        for i in 0..r {
            for k in 0..c {
                out[k * cols + i] = R::lit(m[i * c + k]);
            }
        }
        out
    }
}

/// Fully connected layer `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<R> {
    pub weight: Param<R>,
    pub bias: Param<R>,
}

impl<R: Real> Linear<R> {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let w = Tensor::new(&[output, input], orthogonal(output, input, rng)).expect("shape");
        Self {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var, grad: bool) -> Result<Var> {
        let w = tape.bind(&self.weight, grad);
        let b = tape.bind(&self.bias, grad);
        let y = tape.matmul_t(x, w, false, true)?;
        tape.add_row(y, b)
    }
}

impl<R: Real> Module<R> for Linear<R> {
    fn params(&self) -> Vec<&Param<R>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Valid 3-D convolution over NHWC input.
#[derive(Clone, Debug)]
pub struct Conv2d<R> {
    pub weight: Param<R>,
    pub bias: Param<R>,
    pub stride: usize,
}

impl<R: Real> Conv2d<R> {
    pub fn new(
        name: &str,
        channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let patch = kernel * kernel * channels;
        let w = Tensor::new(
            &[filters, kernel, kernel, channels],
            orthogonal(filters, patch, rng),
        )
        .expect("shape");
        Self {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[filters])),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn filters(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input - self.kernel()) / self.stride + 1
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var, grad: bool) -> Result<Var> {
        let w = tape.bind(&self.weight, grad);
        let b = tape.bind(&self.bias, grad);
        tape.conv2d(x, w, b, self.stride)
    }
}

impl<R: Real> Module<R> for Conv2d<R> {
    fn params(&self) -> Vec<&Param<R>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<R> {
    pub gamma: Param<R>,
    pub beta: Param<R>,
    pub eps: R,
}

impl<R: Real> LayerNorm<R> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[dim], R::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: R::lit(1e-5),
        }
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var, grad: bool) -> Result<Var> {
        let g = tape.bind(&self.gamma, grad);
        let b = tape.bind(&self.beta, grad);
        tape.layer_norm(x, g, b, self.eps)
    }
}

impl<R: Real> Module<R> for LayerNorm<R> {
    fn params(&self) -> Vec<&Param<R>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram_error(m: &[f64], rows: usize, cols: usize) -> f64 {
        // WᵀW or WWᵀ on the smaller dimension
        let (short, long, by_row) = if rows <= cols {
            (rows, cols, true)
        } else {
            (cols, rows, false)
        };
        let at = |i: usize, k: usize| if by_row { m[i * cols + k] } else { m[k * cols + i] };
        let mut worst: f64 = 0.0;
        for i in 0..short {
            for j in 0..short {
                let dot: f64 = (0..long).map(|k| at(i, k) * at(j, k)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    #[test]
    fn orthogonal_init_both_orientations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c) in &[(16, 27), (32, 4624), (128, 34), (1, 128), (7, 7)] {
            let m: Vec<f64> = orthogonal(r, c, &mut rng);
            assert!(gram_error(&m, r, c) < 1e-4, "{r}x{c}");
        }
    }

    #[test]
    fn orthogonal_f32_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = Linear::<f32>::new("l", 34, 128, &mut rng);
        let w: Vec<f64> = lin.weight.value.to_f64_vec();
        assert!(gram_error(&w, 128, 34) < 1e-4);
        assert!(lin.bias.value.data().iter().all(|&b| b == 0.0));
        let conv = Conv2d::<f32>::new("c", 3, 16, 3, 2, &mut rng);
        assert!(gram_error(&conv.weight.value.to_f64_vec(), 16, 27) < 1e-4);
    }
}
