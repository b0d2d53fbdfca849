use super::shape::{broadcast_shapes, broadcast_strides, for_each_run};
use super::{numel, record, record_shared, BackwardCtx, Element, Op, Tensor};
use crate::error::{Error, Result};

struct SumTo {
    input_shape: Vec<usize>,
}

impl<F: Element> Op<F> for SumTo {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(ctx.grad.broadcast_to(&self.input_shape)?)])
    }
}

struct BroadcastTo {
    input_shape: Vec<usize>,
}

impl<F: Element> Op<F> for BroadcastTo {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(ctx.grad.sum_to(&self.input_shape)?)])
    }
}

struct Reshape {
    input_shape: Vec<usize>,
}

impl<F: Element> Op<F> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(ctx.grad.reshape(&self.input_shape)?)])
    }
}

impl<F: Element> Tensor<F> {
    /// Sum over broadcast dimensions so the result has `target` shape.
    ///
    /// `target` must broadcast to `self.shape()`; this is the adjoint of
    /// [`Tensor::broadcast_to`].
    pub fn sum_to(&self, target: &[usize]) -> Result<Tensor<F>> {
        if target == self.shape() {
            return Ok(self.clone());
        }
        match broadcast_shapes(target, self.shape()) {
            Some(s) if s == self.shape() => {}
            _ => {
                return Err(Error::shape(
                    "sum_to",
                    format!("{:?} does not broadcast to {:?}", target, self.shape()),
                ))
            }
        }
        let space = self.shape();
        let st = broadcast_strides(target, space);
        let sx = broadcast_strides(space, space);
        let mut out = vec![F::zero(); numel(target)];
        let x = self.data();
        for_each_run(space, &st, &sx, |off, ot, _, len, it, _| {
            if it == 0 {
                let s: F = x[off..off + len].iter().copied().sum();
                out[ot] = out[ot] + s;
            } else {
                for j in 0..len {
                    out[ot + j * it] = out[ot + j * it] + x[off + j];
                }
            }
        });
        record(
            out,
            target.to_vec(),
            SumTo {
                input_shape: self.shape().to_vec(),
            },
            &[self],
        )
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor<F>> {
        if target == self.shape() {
            return Ok(self.clone());
        }
        match broadcast_shapes(self.shape(), target) {
            Some(s) if s == target => {}
            _ => {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("{:?} does not broadcast to {:?}", self.shape(), target),
                ))
            }
        }
        let ss = broadcast_strides(self.shape(), target);
        let so = broadcast_strides(target, target);
        let mut out = vec![F::zero(); numel(target)];
        let x = self.data();
        for_each_run(target, &ss, &so, |off, os, _, len, is, _| {
            for j in 0..len {
                out[off + j] = x[os + j * is];
            }
        });
        record(
            out,
            target.to_vec(),
            BroadcastTo {
                input_shape: self.shape().to_vec(),
            },
            &[self],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Ok(record_shared(
            std::sync::Arc::clone(&self.data),
            shape.to_vec(),
            Reshape {
                input_shape: self.shape().to_vec(),
            },
            &[self],
        ))
    }

    /// Collapse all dimensions after the first.
    pub fn flatten(&self) -> Result<Tensor<F>> {
        let n = self.shape().first().copied().unwrap_or(1);
        let rest = self.numel().checked_div(n).unwrap_or(0);
        self.reshape(&[n, rest])
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor<F>> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Result<Tensor<F>> {
        if self.numel() == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        self.sum()?.scale(F::one() / F::cst(self.numel() as f64))
    }
}
