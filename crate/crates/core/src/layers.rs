//! Network building blocks on top of the tape: convolution, pooling, dense,
//! activations and the embedded-Gaussian non-local block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Uniform `U(-b, b)` with `b = gain / sqrt(fan_in)`.
pub fn init_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor<T> {
    let shape = shape.into();
    let bound = gain / (fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches generated length")
}

/// He-style gain for layers followed by a ReLU.
pub const RELU_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)
/// Gain for linear projections and output layers.
pub const LINEAR_GAIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Over the last extent.
    Softmax,
}

pub fn activation<T: Scalar>(tape: &mut Tape<T>, x: Var, kind: Activation) -> Var {
    match kind {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Softmax => tape.softmax(x),
    }
}

/// Trainable tensors of a 2-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2DParams<T> {
    /// `(out_ch, in_ch, kh, kw)`
    pub weights: Tensor<T>,
    /// `(out_ch)`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2DParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidArgument {
            op: "Conv2DParams",
            reason,
        };
        let &[out_ch, _, kh, kw] = weights.shape() else {
            return Err(invalid(format!("weights must be rank 4, got {:?}", weights.shape())));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid(format!("kernel {kh}x{kw} must have odd extents")));
        }
        if bias.shape() != [out_ch] {
            return Err(invalid(format!("bias shape {:?} != [{out_ch}]", bias.shape())));
        }
        if stride == 0 {
            return Err(invalid("stride must be positive".into()));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    /// Fan-in uniform weights, zero bias, stride 1, "same" padding.
    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        let weights = init_uniform([out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, RELU_GAIN, rng);
        Self::new(weights, Tensor::zeros([out_ch]), 1, kernel / 2).expect("valid by construction")
    }

    pub fn store_into(self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}/weights"), self.weights)?;
        store.insert(format!("{prefix}/bias"), self.bias)
    }

    /// Registers the tensors as `prefix/weights` and `prefix/bias`.
    pub fn bind(&self, tape: &mut Tape<T>, prefix: &str) -> Result<Conv2d> {
        Ok(Conv2d {
            weights: tape.param(format!("{prefix}/weights"), self.weights.clone())?,
            bias: tape.param(format!("{prefix}/bias"), self.bias.clone())?,
            stride: self.stride,
            padding: self.padding,
        })
    }
}

/// A convolution whose parameters live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weights: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn from_tape<T: Scalar>(tape: &Tape<T>, prefix: &str, stride: usize, padding: usize) -> Result<Self> {
        Ok(Self {
            weights: tape.param_by_name(&format!("{prefix}/weights"))?,
            bias: tape.param_by_name(&format!("{prefix}/bias"))?,
            stride,
            padding,
        })
    }
}

/// NCHW convolution lowered to im2col + matrix multiply.
pub fn conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, layer: &Conv2d) -> Result<Var> {
    tape.conv2d(x, layer.weights, layer.bias, layer.stride, layer.padding)
}

/// `k x k` max pooling with stride `k`; the gradient flows to the window argmax only.
pub fn maxpool2d<T: Scalar>(tape: &mut Tape<T>, x: Var, k: usize) -> Result<Var> {
    tape.maxpool2d(x, k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T> {
    /// `(out_dim, in_dim)`
    pub weights: Tensor<T>,
    /// `(out_dim)`
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match weights.shape() {
            &[out, _] if bias.shape() == [out] => Ok(Self { weights, bias }),
            s => Err(Error::ShapeMismatch {
                op: "DenseParams",
                lhs: s.to_vec(),
                rhs: bias.shape().to_vec(),
            }),
        }
    }

    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weights: init_uniform([out_dim, in_dim], in_dim, gain, rng),
            bias: Tensor::zeros([out_dim]),
        }
    }

    pub fn store_into(self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}/weights"), self.weights)?;
        store.insert(format!("{prefix}/bias"), self.bias)
    }

    pub fn bind(&self, tape: &mut Tape<T>, prefix: &str) -> Result<Dense> {
        Ok(Dense {
            weights: tape.param(format!("{prefix}/weights"), self.weights.clone())?,
            bias: tape.param(format!("{prefix}/bias"), self.bias.clone())?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weights: Var,
    pub bias: Var,
}

impl Dense {
    pub fn from_tape<T: Scalar>(tape: &Tape<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            weights: tape.param_by_name(&format!("{prefix}/weights"))?,
            bias: tape.param_by_name(&format!("{prefix}/bias"))?,
        })
    }
}

/// `y = W x + b` row-wise. Inputs of rank > 2 are flattened to `(n, rest)` first.
pub fn dense<T: Scalar>(tape: &mut Tape<T>, x: Var, layer: &Dense) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let x = match shape.len() {
        1 => tape.reshape(x, [1, shape[0]])?,
        2 => x,
        _ => {
            let rest = shape[1..].iter().product::<usize>();
            tape.reshape(x, [shape[0], rest])?
        }
    };
    tape.linear(x, layer.weights, layer.bias)
}

/// Projections of the embedded-Gaussian non-local block.
#[derive(Clone, Debug, PartialEq)]
pub struct NonLocalParams<T> {
    /// `(embed_ch, in_ch)`
    pub theta: Tensor<T>,
    /// `(embed_ch, in_ch)`
    pub phi: Tensor<T>,
    /// `(embed_ch, in_ch)`
    pub g: Tensor<T>,
    /// `(in_ch, embed_ch)`
    pub w_z: Tensor<T>,
}

pub const NON_LOCAL_PARTS: [&str; 4] = ["theta", "phi", "g", "w_z"];

impl<T: Scalar> NonLocalParams<T> {
    /// Random projections with a zero output projection, so the block starts as the identity.
    pub fn init<R: Rng + ?Sized>(in_ch: usize, rng: &mut R) -> Result<Self> {
        if in_ch == 0 || in_ch % 2 != 0 {
            return Err(Error::InvalidArgument {
                op: "NonLocalParams",
                reason: format!("channel count {in_ch} must be even"),
            });
        }
        let embed = in_ch / 2;
        Ok(Self {
            theta: init_uniform([embed, in_ch], in_ch, LINEAR_GAIN, rng),
            phi: init_uniform([embed, in_ch], in_ch, LINEAR_GAIN, rng),
            g: init_uniform([embed, in_ch], in_ch, LINEAR_GAIN, rng),
            w_z: Tensor::zeros([in_ch, embed]),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.theta.shape()[1]
    }

    pub fn store_into(self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}/theta"), self.theta)?;
        store.insert(format!("{prefix}/phi"), self.phi)?;
        store.insert(format!("{prefix}/g"), self.g)?;
        store.insert(format!("{prefix}/w_z"), self.w_z)
    }

    pub fn bind(&self, tape: &mut Tape<T>, prefix: &str) -> Result<NonLocal> {
        Ok(NonLocal {
            theta: tape.param(format!("{prefix}/theta"), self.theta.clone())?,
            phi: tape.param(format!("{prefix}/phi"), self.phi.clone())?,
            g: tape.param(format!("{prefix}/g"), self.g.clone())?,
            w_z: tape.param(format!("{prefix}/w_z"), self.w_z.clone())?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NonLocal {
    pub theta: Var,
    pub phi: Var,
    pub g: Var,
    pub w_z: Var,
}

impl NonLocal {
    pub fn from_tape<T: Scalar>(tape: &Tape<T>, prefix: &str) -> Result<Self> {
        let get = |part: &str| tape.param_by_name(&format!("{prefix}/{part}"));
        Ok(Self {
            theta: get("theta")?,
            phi: get("phi")?,
            g: get("g")?,
            w_z: get("w_z")?,
        })
    }
}

/// Output and attention matrix `(n, positions, positions)` of a non-local block.
#[derive(Clone, Copy, Debug)]
pub struct NonLocalOutput {
    pub output: Var,
    pub attention: Var,
}

/// `out_i = x_i + W_z * sum_j softmax_j(theta(x_i) . phi(x_j)) g(x_j)` over all spatial positions.
pub fn non_local<T: Scalar>(tape: &mut Tape<T>, x: Var, block: &NonLocal) -> Result<Var> {
    Ok(non_local_with_attention(tape, x, block)?.output)
}

pub fn non_local_with_attention<T: Scalar>(tape: &mut Tape<T>, x: Var, block: &NonLocal) -> Result<NonLocalOutput> {
    let shape = tape.shape(x).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(Error::InvalidArgument {
            op: "non_local",
            reason: format!("expected NCHW input, got {shape:?}"),
        });
    };
    let theta_shape = tape.shape(block.theta).to_vec();
    if c % 2 != 0 || theta_shape != [c / 2, c] {
        return Err(Error::ShapeMismatch {
            op: "non_local",
            lhs: shape,
            rhs: theta_shape,
        });
    }
    let flat = tape.reshape(x, [n, c, h * w])?;
    let theta = tape.matmul(block.theta, flat)?;
    let phi = tape.matmul(block.phi, flat)?;
    let g = tape.matmul(block.g, flat)?;
    let scores = tape.matmul_t(theta, phi, true, false)?;
    let attention = tape.softmax(scores);
    let y = tape.matmul_t(g, attention, false, true)?;
    let z = tape.matmul(block.w_z, y)?;
    let sum = tape.add(flat, z)?;
    let output = tape.reshape(sum, shape)?;
    Ok(NonLocalOutput { output, attention })
}
