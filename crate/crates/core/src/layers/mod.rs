//! Network building blocks evaluated on a [`Tape`].
//!
//! Layers own plain parameter tensors. Before a forward pass the owning
//! network binds them onto the tape (see [`Sequential::bind`]), and the bound
//! handles are threaded through `forward` in parameter order.

mod init;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Keep, Real, Tape, Tensor, Var};

pub use init::InitScheme;

/// LeakyReLU negative slope used across the discriminators.
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    /// Initialization suited to a layer feeding this activation.
    pub fn init_scheme(self) -> InitScheme {
        match self {
            Activation::Relu | Activation::LeakyRelu(_) => InitScheme::HeUniform,
            Activation::Identity | Activation::Sigmoid => InitScheme::GlorotUniform,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input's spatial size (stride 1, odd kernels).
    Same,
    Valid,
}

/// `x W + b` followed by an activation.
pub fn dense_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    activation: Activation,
) -> Result<Var> {
    let h = tape.matmul(x, weight)?;
    let h = tape.add_bias(h, bias)?;
    Ok(activation.apply(tape, h))
}

pub fn conv2d_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    pad: usize,
    activation: Activation,
) -> Result<Var> {
    let h = tape.conv2d(x, kernel, stride, pad)?;
    let h = tape.add_bias(h, bias)?;
    Ok(activation.apply(tape, h))
}

/// Transposed convolution with valid padding; `kernel` is `[in, out, kh, kw]`.
pub fn transconv2d_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    activation: Activation,
) -> Result<Var> {
    let h = tape.conv_transpose2d(x, kernel, stride, 0)?;
    let h = tape.add_bias(h, bias)?;
    Ok(activation.apply(tape, h))
}

pub fn maxpool2d_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: usize,
    stride: usize,
) -> Result<Var> {
    tape.maxpool2d(x, kernel, stride)
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Batch normalization over every axis except axis 1.
///
/// Train mode normalizes with the batch statistics and folds them into the
/// running estimates (`r <- momentum * r + (1 - momentum) * batch`, biased
/// variance). Eval mode uses the running estimates and leaves them alone.
pub fn batchnorm_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 || shape[1] != tape.value(gamma).len() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: shape,
            rhs: tape.shape(gamma).to_vec(),
        });
    }
    let (centered, inv_std) = match mode {
        Mode::Train => {
            if shape[0] < 2 {
                return Err(Error::BatchTooSmall(shape[0]));
            }
            let m = (tape.value(x).len() / shape[1]) as f64;
            let s = tape.sum(x, Keep::Channels)?;
            let mean = tape.scale(s, 1.0 / m);
            let mean_b = tape.broadcast(mean, Keep::Channels, &shape)?;
            let centered = tape.sub(x, mean_b)?;
            let sq = tape.mul(centered, centered)?;
            let ss = tape.sum(sq, Keep::Channels)?;
            let var = tape.scale(ss, 1.0 / m);
            let shifted = tape.shift(var, stats.epsilon);
            let inv_std = tape.pow(shifted, -0.5)?;

            let keep = T::of(stats.momentum);
            let blend = |run: &mut Tensor<T>, batch: &Tensor<T>| {
                for (r, &b) in run.data_mut().iter_mut().zip(batch.data()) {
                    *r = keep * *r + (T::one() - keep) * b;
                }
            };
            blend(&mut stats.mean, tape.value(mean));
            blend(&mut stats.var, tape.value(var));
            (centered, inv_std)
        }
        Mode::Eval => {
            let mean = tape.constant(stats.mean.clone());
            let mean_b = tape.broadcast(mean, Keep::Channels, &shape)?;
            let centered = tape.sub(x, mean_b)?;
            let eps = T::of(stats.epsilon);
            let inv = stats.var.map(|v| (v + eps).sqrt().recip());
            (centered, tape.constant(inv))
        }
    };
    let scale = tape.mul(inv_std, gamma)?;
    let scale_b = tape.broadcast(scale, Keep::Channels, &shape)?;
    let y = tape.mul(centered, scale_b)?;
    tape.add_bias(y, beta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        Dense {
            weight: init.sample(&[inputs, outputs], inputs, outputs, rng),
            bias: Tensor::zeros(vec![outputs]),
            activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `[out, in, kh, kw]`
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        activation: Activation,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidGeometry {
                op: "conv2d",
                reason: "kernel and stride must be positive".into(),
            });
        }
        if padding == Padding::Same && (stride != 1 || kernel % 2 == 0) {
            return Err(Error::InvalidGeometry {
                op: "conv2d",
                reason: format!("same padding needs stride 1 and an odd kernel, got k={kernel} s={stride}"),
            });
        }
        let fan = kernel * kernel;
        Ok(Conv2d {
            kernel: init.sample(&[outputs, inputs, kernel, kernel], inputs * fan, outputs * fan, rng),
            bias: Tensor::zeros(vec![outputs]),
            stride,
            padding,
            activation,
        })
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => (self.kernel.shape()[2] - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransConv2d<T> {
    /// `[in, out, kh, kw]`, the layout of the convolution this one transposes.
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub activation: Activation,
}

impl<T: Real> TransConv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidGeometry {
                op: "transconv2d",
                reason: "kernel and stride must be positive".into(),
            });
        }
        let fan = kernel * kernel;
        Ok(TransConv2d {
            kernel: init.sample(&[inputs, outputs, kernel, kernel], inputs * fan, outputs * fan, rng),
            bias: Tensor::zeros(vec![outputs]),
            stride,
            activation,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            stats: RunningStats {
                mean: Tensor::zeros(vec![channels]),
                var: Tensor::ones(vec![channels]),
                momentum: BN_MOMENTUM,
                epsilon: BN_EPSILON,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv(Conv2d<T>),
    TransConv(TransConv2d<T>),
    BatchNorm(BatchNorm<T>),
    MaxPool { kernel: usize, stride: usize },
    Act(Activation),
    /// Reshape each sample to the given dims (batch axis preserved).
    Reshape(Vec<usize>),
    Flatten,
}

impl<T: Real> Layer<T> {
    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            Layer::Conv(c) => vec![("kernel", &c.kernel), ("bias", &c.bias)],
            Layer::TransConv(c) => vec![("kernel", &c.kernel), ("bias", &c.bias)],
            Layer::BatchNorm(b) => vec![("gamma", &b.gamma), ("beta", &b.beta)],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv(c) => vec![&mut c.kernel, &mut c.bias],
            Layer::TransConv(c) => vec![&mut c.kernel, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => Vec::new(),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, p: &[Var], x: Var, mode: Mode) -> Result<Var> {
        match self {
            Layer::Dense(d) => dense_forward(tape, x, p[0], p[1], d.activation),
            Layer::Conv(c) => {
                let pad = c.pad();
                conv2d_forward(tape, x, p[0], p[1], c.stride, pad, c.activation)
            }
            Layer::TransConv(c) => transconv2d_forward(tape, x, p[0], p[1], c.stride, c.activation),
            Layer::BatchNorm(b) => batchnorm_forward(tape, x, p[0], p[1], &mut b.stats, mode),
            Layer::MaxPool { kernel, stride } => maxpool2d_forward(tape, x, *kernel, *stride),
            Layer::Act(a) => Ok(a.apply(tape, x)),
            Layer::Reshape(dims) => {
                let mut shape = vec![tape.value(x).rows()];
                shape.extend_from_slice(dims);
                tape.reshape(x, &shape)
            }
            Layer::Flatten => tape.flatten(x),
        }
    }
}

/// A named tensor borrowed from a network, in serialization order.
pub type Named<'a, T> = (String, &'a Tensor<T>);

/// Layers applied in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    /// Trainable tensors named `<layer index>.<role>`.
    pub fn params(&self) -> Vec<Named<'_, T>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |(role, t)| (format!("{i}.{role}"), t))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Batch-norm running statistics, named like [`params`](Self::params).
    pub fn buffers(&self) -> Vec<Named<'_, T>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(b) = l {
                out.push((format!("{i}.running_mean"), &b.stats.mean));
                out.push((format!("{i}.running_var"), &b.stats.var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Layer::BatchNorm(b) = l {
                out.push(&mut b.stats.mean);
                out.push(&mut b.stats.var);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Put every parameter on the tape, flagged for gradients when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, params: &[Var], x: Var, mode: Mode) -> Result<Var> {
        Ok(self.trace(tape, params, x, mode)?.last().copied().unwrap_or(x))
    }

    /// Like [`forward`](Self::forward), returning the output of every layer.
    pub fn trace(&mut self, tape: &mut Tape<T>, params: &[Var], x: Var, mode: Mode) -> Result<Vec<Var>> {
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let mut at = 0;
        for layer in &mut self.layers {
            let n = layer.params().len();
            h = layer.forward(tape, &params[at..at + n], h, mode)?;
            outputs.push(h);
            at += n;
        }
        if at != params.len() {
            return Err(Error::ParamCount {
                expected: at,
                actual: params.len(),
            });
        }
        Ok(outputs)
    }
}
