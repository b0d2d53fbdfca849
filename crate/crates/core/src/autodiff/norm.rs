//! Batch normalisation built from differentiable primitives, so it supports
//! double backward without a dedicated rule.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Per-channel statistics of one training-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased (n - 1) variance, the estimator used for running averages.
    pub var_unbiased: Vec<F>,
}

fn channel_shape<F: Element>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>) -> Result<Vec<usize>> {
    if x.ndim() != 4 {
        return Err(Error::shape("batch_norm", format!("expected NCHW, got {:?}", x.shape())));
    }
    let c = x.dim(1);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!("affine params {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok(vec![1, c, 1, 1])
}

/// Normalise with the statistics of the current batch.
pub fn batch_norm_train<F: Element>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> Result<(Tensor<F>, BatchStats<F>)> {
    let cs = channel_shape(x, gamma, beta)?;
    let m = x.numel() / x.dim(1);
    if m < 2 {
        return Err(Error::invalid("batch_norm in training mode needs more than one value per channel"));
    }
    let inv_m = F::one() / F::cst(m as f64);
    let mean = x.sum_to(&cs)?.scale(inv_m)?;
    let centered = x.sub(&mean)?;
    let var = centered.square()?.sum_to(&cs)?.scale(inv_m)?;
    let inv_std = var.add_scalar(F::cst(eps))?.sqrt()?.recip_or_zero()?;
    let scale = inv_std.mul(&gamma.reshape(&cs)?)?;
    let y = centered.mul(&scale)?.add(&beta.reshape(&cs)?)?;
    let correction = F::cst(m as f64 / (m as f64 - 1.0));
    let stats = BatchStats {
        mean: mean.to_vec(),
        var_unbiased: var.data().iter().map(|&v| v * correction).collect(),
    };
    Ok((y, stats))
}

/// Normalise with fixed running statistics.
pub fn batch_norm_eval<F: Element>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    running_mean: &Tensor<F>,
    running_var: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>> {
    let cs = channel_shape(x, gamma, beta)?;
    let inv_std = running_var
        .detach()
        .map(|v| F::one() / (v + F::cst(eps)).sqrt())
        .reshape(&cs)?;
    let scale = inv_std.mul(&gamma.reshape(&cs)?)?;
    x.sub(&running_mean.detach().reshape(&cs)?)?
        .mul(&scale)?
        .add(&beta.reshape(&cs)?)
}
