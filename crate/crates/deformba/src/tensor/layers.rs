//! Parameter-holding layers. Values live in `Tensor`s so they can be saved,
//! counted and perturbed; `lift` puts them on a tape as leaves, and the
//! `*Vars` mirrors apply them inside a differentiable graph.
//!
//! Initialisation is uniform on (-1/sqrt(fan_in), +1/sqrt(fan_in)) with zero
//! biases, drawn in field order from the caller's seeded generator.

use rand::Rng;

use super::tape::{Tape, Var};
use super::{Result, Tensor};

/// Pointwise projection over the channel axis: `[B, in, L] -> [B, out, L]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Clone)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl LinearLayer {
    pub fn init(out_dim: usize, in_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        LinearLayer {
            weight: Tensor::rand_uniform(&[out_dim, in_dim], -bound, bound, rng),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    /// All-zero weights and bias; offset and weight heads start here so the
    /// first forward pass reduces to the identity read.
    pub fn zeros(out_dim: usize, in_dim: usize, bias: bool) -> Self {
        LinearLayer {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }

    pub fn lift(&self, tape: &Tape) -> LinearVars {
        LinearVars {
            weight: tape.leaf(self.weight.clone()),
            bias: self.bias.as_ref().map(|b| tape.leaf(b.clone())),
        }
    }

    /// Rebuilds the mirror from leaves produced in `collect` order.
    pub fn lift_from(&self, vars: &mut impl Iterator<Item = Var>) -> LinearVars {
        LinearVars {
            weight: vars.next().expect("weight leaf"),
            bias: self.bias.as_ref().map(|_| vars.next().expect("bias leaf")),
        }
    }
}

impl LinearVars {
    pub fn apply(&self, x: &Var) -> Result<Var> {
        let y = self.weight.matmul(x)?;
        match &self.bias {
            Some(b) => y.add_channel_bias(b),
            None => Ok(y),
        }
    }
}

/// Full 2-D convolution `[B, Cin, H, W] -> [B, Cout, OH, OW]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone)]
pub struct Conv2dVars {
    pub weight: Var,
    pub bias: Option<Var>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn init(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Conv2d {
            weight: Tensor::rand_uniform(&[c_out, c_in, k, k], -bound, bound, rng),
            bias: bias.then(|| Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }

    pub fn lift(&self, tape: &Tape) -> Conv2dVars {
        Conv2dVars {
            weight: tape.leaf(self.weight.clone()),
            bias: self.bias.as_ref().map(|b| tape.leaf(b.clone())),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn lift_from(&self, vars: &mut impl Iterator<Item = Var>) -> Conv2dVars {
        Conv2dVars {
            weight: vars.next().expect("weight leaf"),
            bias: self.bias.as_ref().map(|_| vars.next().expect("bias leaf")),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

impl Conv2dVars {
    pub fn apply(&self, x: &Var) -> Result<Var> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

/// Depthwise 2-D convolution, stride 1, same padding, no bias.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub kernel: Tensor,
}

#[derive(Clone)]
pub struct DepthwiseConv2dVars {
    pub kernel: Var,
}

impl DepthwiseConv2d {
    pub fn init(c: usize, k: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((k * k) as f64).sqrt();
        DepthwiseConv2d { kernel: Tensor::rand_uniform(&[c, k, k], -bound, bound, rng) }
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len()
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        out.push(&self.kernel);
    }

    pub fn lift(&self, tape: &Tape) -> DepthwiseConv2dVars {
        DepthwiseConv2dVars { kernel: tape.leaf(self.kernel.clone()) }
    }

    pub fn lift_from(&self, vars: &mut impl Iterator<Item = Var>) -> DepthwiseConv2dVars {
        DepthwiseConv2dVars { kernel: vars.next().expect("kernel leaf") }
    }
}

impl DepthwiseConv2dVars {
    pub fn apply(&self, x: &Var) -> Result<Var> {
        x.dwconv2d(&self.kernel)
    }
}

/// Depthwise 1-D convolution along the sequence axis, no bias.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub kernel: Tensor,
    pub causal: bool,
}

#[derive(Clone)]
pub struct DepthwiseConv1dVars {
    pub kernel: Var,
    causal: bool,
}

impl DepthwiseConv1d {
    pub fn init(c: usize, k: usize, causal: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        DepthwiseConv1d {
            kernel: Tensor::rand_uniform(&[c, k], -bound, bound, rng),
            causal,
        }
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len()
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        out.push(&self.kernel);
    }

    pub fn lift(&self, tape: &Tape) -> DepthwiseConv1dVars {
        DepthwiseConv1dVars { kernel: tape.leaf(self.kernel.clone()), causal: self.causal }
    }

    pub fn lift_from(&self, vars: &mut impl Iterator<Item = Var>) -> DepthwiseConv1dVars {
        DepthwiseConv1dVars { kernel: vars.next().expect("kernel leaf"), causal: self.causal }
    }
}

impl DepthwiseConv1dVars {
    pub fn apply(&self, x: &Var) -> Result<Var> {
        x.dwconv1d(&self.kernel, self.causal)
    }
}

/// Single shared 1-D kernel swept over the channel axis of a pooled `[B, C]`
/// descriptor (the attention kernel of the channel-gating path).
#[derive(Clone, Debug)]
pub struct Conv1dChannel {
    pub kernel: Tensor,
}

#[derive(Clone)]
pub struct Conv1dChannelVars {
    pub kernel: Var,
}

impl Conv1dChannel {
    pub fn init(k: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        Conv1dChannel { kernel: Tensor::rand_uniform(&[k], -bound, bound, rng) }
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len()
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        out.push(&self.kernel);
    }

    pub fn lift(&self, tape: &Tape) -> Conv1dChannelVars {
        Conv1dChannelVars { kernel: tape.leaf(self.kernel.clone()) }
    }

    pub fn lift_from(&self, vars: &mut impl Iterator<Item = Var>) -> Conv1dChannelVars {
        Conv1dChannelVars { kernel: vars.next().expect("kernel leaf") }
    }
}

impl Conv1dChannelVars {
    pub fn apply(&self, x: &Var) -> Result<Var> {
        x.conv1d_channel(&self.kernel)
    }
}

/// Layer norm with learned affine over the trailing axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

#[derive(Clone)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(c: usize) -> Self {
        LayerNorm { gamma: Tensor::ones(&[c]), beta: Tensor::zeros(&[c]), eps: 1e-5 }
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    pub fn lift(&self, tape: &Tape) -> LayerNormVars {
        LayerNormVars {
            gamma: tape.leaf(self.gamma.clone()),
            beta: tape.leaf(self.beta.clone()),
            eps: self.eps,
        }
    }

    pub fn lift_from(&self, vars: &mut impl Iterator<Item = Var>) -> LayerNormVars {
        LayerNormVars {
            gamma: vars.next().expect("gamma leaf"),
            beta: vars.next().expect("beta leaf"),
            eps: self.eps,
        }
    }
}

impl LayerNormVars {
    pub fn apply(&self, x: &Var) -> Result<Var> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn linear_apply_matches_hand_product() {
        let tape = Tape::new();
        let layer = LinearLayer {
            weight: Tensor::new(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap(),
            bias: Some(Tensor::new(&[2], vec![10.0, -10.0]).unwrap()),
        };
        let v = layer.lift(&tape);
        let x = tape.leaf(Tensor::new(&[1, 3, 1], vec![2.0, 4.0, 6.0]).unwrap());
        let y = v.apply(&x).unwrap().value();
        // row0: 2 - 6 + 10 = 6; row1: 1 + 2 + 3 - 10 = -4
        assert_eq!(y.shape(), &[1, 2, 1]);
        assert_eq!(y.data(), &[6.0, -4.0]);
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let mut r1 = ChaCha12Rng::seed_from_u64(7);
        let mut r2 = ChaCha12Rng::seed_from_u64(7);
        let a = LinearLayer::init(8, 16, true, &mut r1);
        let b = LinearLayer::init(8, 16, true, &mut r2);
        assert_eq!(a.weight, b.weight);
        let bound = 1.0 / 4.0;
        assert!(a.weight.data().iter().all(|v| v.abs() < bound));
        assert!(a.bias.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_init_head_outputs_zero() {
        let tape = Tape::new();
        let head = LinearLayer::zeros(4, 6, true);
        assert_eq!(head.num_params(), 28);
        let x = tape.leaf(Tensor::rand_uniform(
            &[2, 6, 5],
            -1.0,
            1.0,
            &mut ChaCha12Rng::seed_from_u64(0),
        ));
        let y = head.lift(&tape).apply(&x).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
