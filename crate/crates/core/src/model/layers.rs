//! Convolutional building blocks with explicit parameter handles.
//!
//! Every layer owns `Var`s registered in a [`ParamGroup`] under stable dotted
//! names. The forward [`Pass`] decides whether batch-norm uses batch or
//! running statistics and whether weights enter the graph live or detached.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, conv2d_same};
use crate::error::Result;

const LEAKY_SLOPE: f64 = 0.2;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// How a forward pass treats parameters and normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    /// Batch statistics in batch-norm layers.
    pub train: bool,
    /// Weights enter the graph detached: gradients still flow through the
    /// activations but never reach the parameters.
    pub frozen: bool,
    /// Update batch-norm running statistics.
    pub track_stats: bool,
}

impl Pass {
    pub const EVAL: Pass = Pass {
        train: false,
        frozen: false,
        track_stats: false,
    };
    pub const TRAIN: Pass = Pass {
        train: true,
        frozen: false,
        track_stats: true,
    };

    pub fn untracked(self) -> Pass {
        Pass {
            track_stats: false,
            ..self
        }
    }

    pub fn frozen(self) -> Pass {
        Pass {
            frozen: true,
            track_stats: false,
            ..self
        }
    }

    fn weight(&self, var: &Var) -> Tensor {
        if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        }
    }
}

/// Named trainable parameters and non-trainable buffers of one network.
#[derive(Debug, Clone, Default)]
pub struct ParamGroup {
    pub params: BTreeMap<String, Var>,
    pub buffers: BTreeMap<String, Var>,
}

impl ParamGroup {
    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }
}

/// Parameter factory: fan-in scaled uniform initialization from a seeded stream.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: &'a Device,
    pub group: &'a mut ParamGroup,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, shape, self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.group.params.insert(name, var.clone());
        Ok(var)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64, buffer: bool) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, self.device)? * value)?;
        let var = Var::from_tensor(&t)?;
        if buffer {
            self.group.buffers.insert(name, var.clone());
        } else {
            self.group.params.insert(name, var.clone());
        }
        Ok(var)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(ops::leaky_relu(x, LEAKY_SLOPE)?)
}

/// σ(x) computed as ½(tanh(x/2) + 1), which has a finite gradient everywhere.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(ops::logistic(x)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: init.uniform(format!("{name}.weight"), &[output, input], bound)?,
            bias: init.uniform(format!("{name}.bias"), &[output], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let w = pass.weight(&self.weight);
        let b = pass.weight(&self.bias);
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((input * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: init.uniform(format!("{name}.weight"), &[output, input, kernel, kernel], bound)?,
            bias: init.uniform(format!("{name}.bias"), &[output], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let w = pass.weight(&self.weight);
        let b = pass.weight(&self.bias);
        Ok(conv2d_same(x, &w, &b)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(format!("{name}.gamma"), &[channels], 1.0, false)?,
            beta: init.constant(format!("{name}.beta"), &[channels], 0.0, false)?,
            running_mean: init.constant(format!("{name}.running_mean"), &[channels], 0.0, true)?,
            running_var: init.constant(format!("{name}.running_var"), &[channels], 1.0, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let (mean, var) = if pass.train {
            let (b, _, h, w) = x.dims4()?;
            let n = (b * h * w) as f64;
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            if pass.track_stats {
                let m = mean.flatten_all()?.detach();
                let unbiased = (var.flatten_all()?.detach() * (n / (n - 1.0).max(1.0)))?;
                let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (m * BN_MOMENTUM)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
            }
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, (), 1, 1))?,
                self.running_var.as_tensor().reshape((1, (), 1, 1))?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        let gamma = pass.weight(&self.gamma).reshape((1, (), 1, 1))?;
        let beta = pass.weight(&self.beta).reshape((1, (), 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Pre-activation residual block: two 3×3 convolutions, identity skip or a
/// 1×1 projection when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: Option<BatchNorm2d>,
    conv1: Conv2d,
    norm2: Option<BatchNorm2d>,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize, batch_norm: bool) -> Result<Self> {
        let norm1 = if batch_norm {
            Some(BatchNorm2d::new(init, &format!("{name}.norm1"), input)?)
        } else {
            None
        };
        let conv1 = Conv2d::new(init, &format!("{name}.conv1"), input, output, 3)?;
        let norm2 = if batch_norm {
            Some(BatchNorm2d::new(init, &format!("{name}.norm2"), output)?)
        } else {
            None
        };
        let conv2 = Conv2d::new(init, &format!("{name}.conv2"), output, output, 3)?;
        let skip = if input != output {
            Some(Conv2d::new(init, &format!("{name}.skip"), input, output, 1)?)
        } else {
            None
        };
        Ok(Self {
            norm1,
            conv1,
            norm2,
            conv2,
            skip,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let mut h = match &self.norm1 {
            Some(n) => n.forward(x, pass)?,
            None => x.clone(),
        };
        h = self.conv1.forward(&leaky_relu(&h)?, pass)?;
        if let Some(n) = &self.norm2 {
            h = n.forward(&h, pass)?;
        }
        h = self.conv2.forward(&leaky_relu(&h)?, pass)?;
        let identity = match &self.skip {
            Some(s) => s.forward(x, pass)?,
            None => x.clone(),
        };
        Ok((identity + h)?)
    }
}

/// Splits `[B, 2d]` into `([B, d], [B, d])`.
pub fn split_halves(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = x.dim(D::Minus1)? / 2;
    Ok((x.narrow(D::Minus1, 0, d)?, x.narrow(D::Minus1, d, d)?))
}
