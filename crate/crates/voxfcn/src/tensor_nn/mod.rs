//! Minimal dense tensor core: 3D convolution, 3D transposed convolution, ReLU,
//! their hand-derived gradients, and an SGD optimizer.
//!
//! Values are stored as 32-bit floats; convolution inner loops accumulate in
//! 64-bit to bound rounding in the deeply reduced sums. With the `parallel`
//! feature (on by default) the kernels fan out over output channels via rayon;
//! each output element is still produced by exactly one thread with a fixed
//! reduction order, so results are bit-identical to the sequential fallback.

mod conv;
mod deconv;
mod gradcheck;
mod tensor;

pub use conv::{conv3d_backward, conv3d_backward_seq, conv3d_forward, conv3d_forward_seq, ConvLayer};
pub use deconv::{
    deconv3d_backward, deconv3d_backward_seq, deconv3d_forward, deconv3d_forward_seq, DeconvLayer,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch on {axis}: expected {expected}, got {got}")]
    DimensionMismatch {
        axis: String,
        expected: usize,
        got: usize,
    },
    #[error("tensor data length {got} does not match shape product {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("bad layer configuration: {0}")]
    BadLayerConfig(String),
}

pub(crate) fn dim_err(axis: &str, expected: usize, got: usize) -> NnError {
    NnError::DimensionMismatch {
        axis: axis.to_string(),
        expected,
        got,
    }
}

/// Runs `work(index, chunk)` over equally sized mutable chunks of `out`,
/// in parallel when the `parallel` feature is enabled.
pub(crate) fn for_each_chunk<F>(out: &mut [f32], chunk: usize, work: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(idx, c)| work(idx, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (idx, c) in out.chunks_mut(chunk).enumerate() {
            work(idx, c);
        }
    }
}

pub(crate) fn for_each_chunk_seq<F>(out: &mut [f32], chunk: usize, work: F)
where
    F: Fn(usize, &mut [f32]),
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    for (idx, c) in out.chunks_mut(chunk).enumerate() {
        work(idx, c);
    }
}

/// Elementwise max(0, x).
pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec_unchecked(x.shape().to_vec(), data)
}

/// Gradient of ReLU: passes `grad_out` where `x > 0`, zero elsewhere
/// (subgradient 0 at exactly x = 0).
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor, NnError> {
    if x.shape() != grad_out.shape() {
        return Err(dim_err("relu grad_out", x.len(), grad_out.len()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec_unchecked(x.shape().to_vec(), data))
}

/// SGD with classical momentum: v <- momentum * v - lr * g; p <- p + v.
///
/// `lr = 0` is accepted and leaves parameters untouched, which the training
/// loop relies on for its no-op configuration.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    lr: f32,
    momentum: f32,
    velocity: Vec<Tensor>,
}

impl SgdOptimizer {
    pub fn new(lr: f32, momentum: f32, params: &[&Tensor]) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(NnError::BadLayerConfig(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if lr < 0.0 || !lr.is_finite() {
            return Err(NnError::BadLayerConfig(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        let velocity = params
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Ok(Self {
            lr,
            momentum,
            velocity,
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), NnError> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(dim_err("optimizer parameter count", self.velocity.len(), params.len()));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if p.shape() != g.shape() {
                return Err(dim_err("optimizer gradient shape", p.len(), g.len()));
            }
            for ((pv, gv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut().iter_mut())
            {
                *vv = self.momentum * *vv - self.lr * *gv;
                *pv += *vv;
            }
        }
        Ok(())
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}
