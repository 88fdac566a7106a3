//! Shared parameter containers for the unrolled networks.

use rand::Rng;

use crate::error::Result;
use crate::measurement::PhaseMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Row-major `[M, P]` tensor holding a pilot schedule.
pub fn theta_tensor(theta: &PhaseMatrix) -> Tensor {
    let (m, p) = (theta.m(), theta.pilots());
    let mut data = vec![0.0; m * p];
    for row in 0..m {
        for col in 0..p {
            data[row * p + col] = theta.matrix[(row, col)];
        }
    }
    Tensor::new(vec![m, p], data).expect("theta shape")
}

/// Coefficient-map channel count S of the CISTA dictionaries.
pub const COEFF_CHANNELS: usize = 32;
/// Channels of the real/imaginary channel image.
pub const IMG_CHANNELS: usize = 2;
/// Spatial kernel extent of the dictionaries and CNN blocks.
pub const KERNEL: usize = 3;

/// Uniform(±1/√fan_in) initialization for a conv weight and its bias.
fn conv_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng).with_grad()
}

/// One convolutional dictionary: a `[2, 32, 3, 3]` kernel whose conv maps
/// coefficient maps to the channel image (S→2) and whose transposed conv is
/// the exact adjoint (2→S), plus a `[32]` bias applied on the 32-channel
/// (analysis) side. 576 + 32 = 608 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DictKernel {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl DictKernel {
    pub fn init(rng: &mut impl Rng) -> Self {
        let fan_in = COEFF_CHANNELS * KERNEL * KERNEL;
        Self {
            kernel: conv_init(&[IMG_CHANNELS, COEFF_CHANNELS, KERNEL, KERNEL], fan_in, rng),
            bias: conv_init(&[COEFF_CHANNELS], fan_in, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.numel()
    }

    pub fn register(&self, tape: &mut Tape) -> DictVars {
        // same-padding for odd kernel extents
        let padding = (self.kernel.shape()[2] - 1) / 2;
        DictVars { kernel: tape.leaf(&self.kernel), bias: tape.leaf(&self.bias), padding }
    }
}

/// Tape handles of a registered dictionary.
#[derive(Debug, Clone, Copy)]
pub struct DictVars {
    pub kernel: Var,
    pub bias: Var,
    padding: usize,
}

impl DictVars {
    /// Synthesis `D ∗ ḡ`: conv S→2, no bias.
    pub fn synth(&self, tape: &mut Tape, g: Var) -> Result<Var> {
        tape.conv2d(g, self.kernel, None, 1, self.padding)
    }

    /// Analysis `D ⊛ x`: transposed conv 2→S plus the 32-channel bias.
    pub fn analysis(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let t = tape.conv2d_transpose(x, self.kernel, 1, self.padding)?;
        tape.add_bias(t, self.bias)
    }
}

/// Plain convolution layer with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn init(
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        Self {
            weight: conv_init(&[cout, cin, k, k], fan_in, rng),
            bias: conv_init(&[cout], fan_in, rng),
            stride,
            padding,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn register(&self, tape: &mut Tape) -> ConvVars {
        ConvVars {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
}

impl ConvVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, Some(self.bias), self.stride, self.padding)
    }
}

/// Depthwise 3×3 convolution with bias, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DepthwiseLayer {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = KERNEL * KERNEL;
        Self {
            weight: conv_init(&[channels, 1, KERNEL, KERNEL], fan_in, rng),
            bias: conv_init(&[channels], fan_in, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn register(&self, tape: &mut Tape) -> DepthwiseVars {
        DepthwiseVars { weight: tape.leaf(&self.weight), bias: tape.leaf(&self.bias) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DepthwiseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DepthwiseVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d = tape.depthwise_conv2d(x, self.weight, 1)?;
        tape.add_bias(d, self.bias)
    }
}

/// Residual CNN block of the gradient descent module:
/// `x + conv₂(prelu(conv₁(x)))` with conv₁ 2→32 and conv₂ 32→2, both 3×3.
/// The two convs carry 608 + 578 = 1186 parameters; the PReLU slopes are
/// counted separately.
#[derive(Debug, Clone, PartialEq)]
pub struct FBlock {
    pub conv1: ConvLayer,
    pub slope: Tensor,
    pub conv2: ConvLayer,
}

impl FBlock {
    pub fn init(rng: &mut impl Rng) -> Self {
        Self {
            conv1: ConvLayer::init(COEFF_CHANNELS, IMG_CHANNELS, KERNEL, 1, 1, rng),
            slope: Tensor::full(&[COEFF_CHANNELS], 0.1).with_grad(),
            conv2: ConvLayer::init(IMG_CHANNELS, COEFF_CHANNELS, KERNEL, 1, 1, rng),
        }
    }

    /// Conv weights and biases only (Table-style count).
    pub fn conv_param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }

    pub fn register(&self, tape: &mut Tape) -> FBlockVars {
        FBlockVars {
            conv1: self.conv1.register(tape),
            slope: tape.leaf(&self.slope),
            conv2: self.conv2.register(tape),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FBlockVars {
    pub conv1: ConvVars,
    pub slope: Var,
    pub conv2: ConvVars,
}

impl FBlockVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c1 = self.conv1.apply(tape, x)?;
        let p = tape.prelu(c1, self.slope)?;
        let c2 = self.conv2.apply(tape, p)?;
        tape.add(x, c2)
    }
}

/// Learnable per-channel affine of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl NormParams {
    pub fn init(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }

    pub fn register(&self, tape: &mut Tape) -> NormVars {
        NormVars { gamma: tape.leaf(&self.gamma), beta: tape.leaf(&self.beta) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl NormVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta)
    }
}
