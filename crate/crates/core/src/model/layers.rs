use rand::Rng as _;

use crate::autodiff::{Bindings, Group, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Weights uniform in ±1/√fan_in; draws are taken in f64 and then cast so
/// f32 and f64 models start from the same values.
pub(crate) fn fan_in_uniform<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape matches generated length")
}

/// Affine map `x·W + b` on row vectors, W stored as in×out.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_width: usize,
    pub out_width: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: Group,
        in_width: usize,
        out_width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{prefix}.weight"),
            group,
            fan_in_uniform(vec![in_width, out_width], in_width, rng),
        )?;
        let bias = store.add(format!("{prefix}.bias"), group, Tensor::zeros(vec![out_width]))?;
        Ok(Linear {
            weight,
            bias,
            in_width,
            out_width,
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_width * self.out_width + self.out_width
    }

    /// `x` is M×in_width.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, binds: &Bindings, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.in_width {
            return Err(Error::Dimension(format!(
                "linear layer expects M×{}, got {:?}",
                self.in_width, s
            )));
        }
        let y = tape.matmul(x, binds.var(self.weight))?;
        tape.add(y, binds.var(self.bias))
    }

    /// Apply to every token of a B×N×C tensor.
    pub fn forward_tokens<T: Real>(&self, tape: &mut Tape<T>, binds: &Bindings, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("expected B×N×C tokens, got {s:?}")));
        }
        let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
        let y = self.forward(tape, binds, flat)?;
        tape.reshape(y, &[s[0], s[1], self.out_width])
    }
}

/// Bias-free square-kernel convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * size * size;
        let kernel = store.add(
            format!("{name}.weight"),
            Group::Base,
            fan_in_uniform(vec![out_channels, in_channels, size, size], fan_in, rng),
        )?;
        Ok(Conv {
            kernel,
            in_channels,
            out_channels,
            size,
            stride,
            pad,
        })
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.size * self.size
    }

    pub fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.size) / self.stride + 1
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, binds: &Bindings, x: Var) -> Result<Var> {
        tape.conv2d(x, binds.var(self.kernel), self.stride, self.pad)
    }
}
