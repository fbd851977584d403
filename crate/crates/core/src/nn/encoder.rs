use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conv2d, LayerNorm, Linear, Module};
use crate::error::{Error, Result};
use crate::tensor::{Param, Real, Tape, Var};

/// Input layout accepted by an [`Encoder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderSpec {
    /// Square NHWC frame stacks: two 3×3 convolutions (stride 2, then 1).
    Pixel {
        size: usize,
        channels: usize,
        filters: usize,
        feature_dim: usize,
    },
    /// Flattened `h×w×c` symbolic grids through a two-layer MLP.
    Embedding {
        height: usize,
        width: usize,
        channels: usize,
        hidden: usize,
        feature_dim: usize,
    },
}

impl EncoderSpec {
    pub fn feature_dim(&self) -> usize {
        match *self {
            EncoderSpec::Pixel { feature_dim, .. } | EncoderSpec::Embedding { feature_dim, .. } => {
                feature_dim
            }
        }
    }

    /// Per-sample input shape `[h, w, c]`.
    pub fn input_shape(&self) -> [usize; 3] {
        match *self {
            EncoderSpec::Pixel { size, channels, .. } => [size, size, channels],
            EncoderSpec::Embedding {
                height,
                width,
                channels,
                ..
            } => [height, width, channels],
        }
    }
}

/// `f_θ`: observation batch to a tanh-bounded feature vector per sample.
#[derive(Clone, Debug)]
pub struct Encoder<R> {
    spec: EncoderSpec,
    convs: Vec<Conv2d<R>>,
    hidden: Option<Linear<R>>,
    fc: Linear<R>,
    ln: LayerNorm<R>,
}

impl<R: Real> Encoder<R> {
    pub fn new(spec: EncoderSpec, rng: &mut impl Rng) -> Self {
        match spec {
            EncoderSpec::Pixel {
                size,
                channels,
                filters,
                feature_dim,
            } => {
                let c1 = Conv2d::new("encoder.conv1", channels, filters, 3, 2, rng);
                let s1 = c1.output_size(size);
                let c2 = Conv2d::new("encoder.conv2", filters, filters, 3, 1, rng);
                let s2 = c2.output_size(s1);
                let fc = Linear::new("encoder.fc", s2 * s2 * filters, feature_dim, rng);
                Self {
                    spec,
                    convs: vec![c1, c2],
                    hidden: None,
                    fc,
                    ln: LayerNorm::new("encoder.ln", feature_dim),
                }
            }
            EncoderSpec::Embedding {
                height,
                width,
                channels,
                hidden,
                feature_dim,
            } => Self {
                spec,
                convs: Vec::new(),
                hidden: Some(Linear::new("encoder.hidden", height * width * channels, hidden, rng)),
                fc: Linear::new("encoder.fc", hidden, feature_dim, rng),
                ln: LayerNorm::new("encoder.ln", feature_dim),
            },
        }
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    /// Encodes an NHWC batch. With `grad == false` every parameter enters the
    /// tape as a constant, so the output is detached from differentiation.
    pub fn forward(&self, tape: &mut Tape<R>, obs: Var, grad: bool) -> Result<Var> {
        let shape = tape.value(obs).shape().to_vec();
        let want = self.spec.input_shape();
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape(
                "encoder",
                format!("expected [B, {}, {}, {}], got {shape:?}", want[0], want[1], want[2]),
            ));
        }
        let batch = shape[0];
        let mut h = obs;
        for conv in &self.convs {
            h = conv.forward(tape, h, grad)?;
            h = tape.relu(h);
        }
        let flat = tape.value(h).numel() / batch;
        h = tape.reshape(h, &[batch, flat])?;
        if let Some(hidden) = &self.hidden {
            h = hidden.forward(tape, h, grad)?;
            h = tape.relu(h);
        }
        h = self.fc.forward(tape, h, grad)?;
        h = self.ln.forward(tape, h, grad)?;
        Ok(tape.tanh(h))
    }
}

impl<R: Real> Module<R> for Encoder<R> {
    fn params(&self) -> Vec<&Param<R>> {
        let mut p: Vec<&Param<R>> = self.convs.iter().flat_map(|c| c.params()).collect();
        if let Some(h) = &self.hidden {
            p.extend(h.params());
        }
        p.extend(self.fc.params());
        p.extend(self.ln.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        let mut p: Vec<&mut Param<R>> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        if let Some(h) = &mut self.hidden {
            p.extend(h.params_mut());
        }
        p.extend(self.fc.params_mut());
        p.extend(self.ln.params_mut());
        p
    }
}
