//! Differentiable layers.
//!
//! The low-level operations are methods on [`Tape`]: `conv2d`, `pool2d`,
//! `batch_norm2d`, `linear`, `dropout`, `softmax_cross_entropy`. The types in
//! this module bundle a layer's parameters and settings and drive those
//! operations.

mod batchnorm;
mod conv;
mod dropout;
mod linear;
mod loss;
mod pool;

use rand::Rng;

pub use batchnorm::{BatchStatistics, NormStats};
pub use conv::{output_extent, Conv2dGeometry};
pub use loss::softmax;
pub use pool::{PoolKind, PoolSpec};

use crate::autodiff::{Tape, Var};
use crate::error::{fmt_shape, Error, Result};
use crate::tensor::{Element, Tensor};

/// Whether layers run with training behavior (batch statistics, dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters of a 2-D convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Element = f32> {
    /// `(out_channels, in_channels, kernel_h, kernel_w)`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: Conv2dGeometry,
}

impl<T: Element> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, geometry: Conv2dGeometry) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::Shape(format!("convolution weight must be 4-D with positive extents, got {}", fmt_shape(s))));
        }
        if geometry.stride.0 == 0 || geometry.stride.1 == 0 {
            return Err(Error::Shape("convolution stride must be at least 1".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::Shape(format!("convolution bias must have shape ({}), got {}", s[0], fmt_shape(b.shape()))));
            }
        }
        if !weight.all_finite() {
            return Err(Error::NonFinite("convolution weight".into()));
        }
        Ok(ConvParams { weight, bias, geometry })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.leaf(self.weight.clone());
        let b = self.bias.as_ref().map(|b| tape.leaf(b.clone()));
        tape.conv2d(x, w, b, self.geometry)
    }
}

/// Affine parameters and running statistics of a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BatchNormState<T: Element = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

impl<T: Element> BatchNormState<T> {
    /// γ = 1, β = 0, running mean 0 and variance 1; momentum 0.1, ε = 1e-5.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
            mode: Mode::Train,
        }
    }

    /// Normalizes `x`; in training mode also folds the batch statistics into
    /// the running estimates (`running ← (1−m)·running + m·batch`).
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if !(self.eps > 0.0) {
            return Err(Error::Contract(format!("batch-norm epsilon must be positive, got {}", self.eps)));
        }
        let gamma = tape.leaf(self.gamma.clone());
        let beta = tape.leaf(self.beta.clone());
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm2d(x, gamma, beta, NormStats::Batch, self.eps)?;
                let stats = stats.expect("batch statistics in training mode");
                update_running(&mut self.running_mean, &stats.mean, self.momentum);
                update_running(&mut self.running_var, &stats.unbiased_var, self.momentum);
                Ok(y)
            }
            Mode::Eval => {
                let stats = NormStats::Running { mean: self.running_mean.data(), var: self.running_var.data() };
                Ok(tape.batch_norm2d(x, gamma, beta, stats, self.eps)?.0)
            }
        }
    }
}

pub(crate) fn update_running<T: Element>(running: &mut Tensor<T>, batch: &[T], momentum: f64) {
    let m = T::from_f64_lossy(momentum);
    let keep = T::one() - m;
    running.data_mut().iter_mut().zip(batch).for_each(|(r, &b)| *r = keep * *r + m * b);
}

/// Dropout settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub mode: Mode,
}

impl DropoutSpec {
    pub fn new(rate: f64, mode: Mode) -> Result<Self> {
        dropout::check_rate(rate)?;
        Ok(DropoutSpec { rate, mode })
    }

    pub fn forward<T: Element, R: Rng + ?Sized>(&self, tape: &mut Tape<T>, x: Var, rng: &mut R) -> Result<Var> {
        tape.dropout(x, self.rate, self.mode == Mode::Train, rng)
    }
}
