use super::gemm::gemm;
use super::{record, BackwardCtx, Element, Op, Tensor};
use crate::error::{Error, Result};

/// `op(a) * op(b)` for 2-D tensors, `op` being an optional transpose.
struct MatMul {
    a_t: bool,
    b_t: bool,
}

impl<F: Element> Op<F> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (a, b, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        let ga = if ctx.needs[0] {
            Some(if self.a_t {
                b.matmul_t(g, self.b_t, true)?
            } else {
                g.matmul_t(b, false, !self.b_t)?
            })
        } else {
            None
        };
        let gb = if ctx.needs[1] {
            Some(if self.b_t {
                g.matmul_t(a, true, self.a_t)?
            } else {
                a.matmul_t(g, !self.a_t, false)?
            })
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

impl<F: Element> Tensor<F> {
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with either operand optionally transposed.
    pub fn matmul_t(&self, other: &Tensor<F>, a_t: bool, b_t: bool) -> Result<Tensor<F>> {
        if self.ndim() != 2 || other.ndim() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("expected 2-D operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = if a_t {
            (self.dim(1), self.dim(0))
        } else {
            (self.dim(0), self.dim(1))
        };
        let (k2, n) = if b_t {
            (other.dim(1), other.dim(0))
        } else {
            (other.dim(0), other.dim(1))
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.data(), a_t, other.data(), b_t, &mut out, F::zero());
        record(out, vec![m, n], MatMul { a_t, b_t }, &[self, other])
    }
}
