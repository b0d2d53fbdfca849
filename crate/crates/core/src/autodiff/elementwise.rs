use serde::{Deserialize, Serialize};

use super::shape::{broadcast_shapes, broadcast_strides, for_each_run};
use super::{record, BackwardCtx, Element, Op, Tensor};
use crate::error::{Error, Result};

/// Pointwise nonlinearities with closed-form first and second derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryKind {
    Relu,
    /// Exact GELU, `x * Phi(x)`.
    Gelu,
    Silu,
    /// ELU with unit scale.
    Elu,
    /// `(1/alpha) * log(1 + exp(alpha * x))`.
    Softplus { alpha: f64 },
    Sigmoid,
    Exp,
    Log,
    /// Square root whose derivative at 0 is taken as 0.
    Sqrt,
    Square,
    Abs,
    /// `1/x`, with 0 (and zero derivatives) at `x = 0`.
    RecipOrZero,
}

fn sigmoid<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl UnaryKind {
    /// `order`-th derivative evaluated at `x` (order 0 is the function).
    pub fn eval<F: Element>(self, order: u8, x: F) -> F {
        let zero = F::zero();
        let one = F::one();
        let two = F::cst(2.0);
        match (self, order) {
            (UnaryKind::Relu, 0) => x.max(zero),
            (UnaryKind::Relu, 1) => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            (UnaryKind::Relu, _) => zero,

            (UnaryKind::Gelu, k) => {
                let cdf = F::cst(0.5) * (one + (x / two.sqrt()).erf());
                let pdf = F::cst(INV_SQRT_2PI) * (-(x * x) / two).exp();
                match k {
                    0 => x * cdf,
                    1 => cdf + x * pdf,
                    _ => pdf * (two - x * x),
                }
            }

            (UnaryKind::Silu, k) => {
                let s = sigmoid(x);
                match k {
                    0 => x * s,
                    1 => s * (one + x * (one - s)),
                    _ => s * (one - s) * (two + x * (one - two * s)),
                }
            }

            (UnaryKind::Elu, 0) => {
                if x > zero {
                    x
                } else {
                    x.exp_m1()
                }
            }
            (UnaryKind::Elu, 1) => {
                if x > zero {
                    one
                } else {
                    x.exp()
                }
            }
            (UnaryKind::Elu, _) => {
                if x > zero {
                    zero
                } else {
                    x.exp()
                }
            }

            (UnaryKind::Softplus { alpha }, k) => {
                let a = F::cst(alpha);
                match k {
                    0 => x.max(zero) + (-(a * x).abs()).exp().ln_1p() / a,
                    1 => sigmoid(a * x),
                    _ => {
                        let s = sigmoid(a * x);
                        a * s * (one - s)
                    }
                }
            }

            (UnaryKind::Sigmoid, k) => {
                let s = sigmoid(x);
                match k {
                    0 => s,
                    1 => s * (one - s),
                    _ => s * (one - s) * (one - two * s),
                }
            }

            (UnaryKind::Exp, _) => x.exp(),

            (UnaryKind::Log, 0) => x.ln(),
            (UnaryKind::Log, 1) => one / x,
            (UnaryKind::Log, _) => -one / (x * x),

            (UnaryKind::Sqrt, 0) => x.sqrt(),
            (UnaryKind::Sqrt, k) => {
                if x > zero {
                    let r = x.sqrt();
                    if k == 1 {
                        F::cst(0.5) / r
                    } else {
                        F::cst(-0.25) / (x * r)
                    }
                } else {
                    zero
                }
            }

            (UnaryKind::Square, 0) => x * x,
            (UnaryKind::Square, 1) => two * x,
            (UnaryKind::Square, _) => two,

            (UnaryKind::Abs, 0) => x.abs(),
            (UnaryKind::Abs, 1) => sign_of(x),
            (UnaryKind::Abs, _) => zero,

            (UnaryKind::RecipOrZero, k) => {
                if x == zero {
                    zero
                } else {
                    match k {
                        0 => one / x,
                        1 => -one / (x * x),
                        _ => two / (x * x * x),
                    }
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Silu => "silu",
            UnaryKind::Elu => "elu",
            UnaryKind::Softplus { .. } => "softplus_param",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Square => "square",
            UnaryKind::Abs => "abs",
            UnaryKind::RecipOrZero => "recip_or_zero",
        }
    }
}

/// `sign(0) = 0`.
pub(crate) fn sign_of<F: Element>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

struct UnaryOp {
    kind: UnaryKind,
    order: u8,
}

impl<F: Element> Op<F> for UnaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        if self.order >= 2 {
            return Err(Error::HigherOrderUnsupported(self.kind.name()));
        }
        let x = &ctx.inputs[0];
        let d = unary_order(x, self.kind, self.order + 1)?;
        Ok(vec![Some(ctx.grad.mul(&d)?)])
    }
}

fn unary_order<F: Element>(x: &Tensor<F>, kind: UnaryKind, order: u8) -> Result<Tensor<F>> {
    let value = x.data().iter().map(|&v| kind.eval(order, v)).collect();
    record(value, x.shape().to_vec(), UnaryOp { kind, order }, &[x])
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp(BinaryKind);

impl<F: Element> Op<F> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (a, b, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        let (ga, gb) = match self.0 {
            BinaryKind::Add => (
                ctx.needs[0].then(|| g.sum_to(a.shape())).transpose()?,
                ctx.needs[1].then(|| g.sum_to(b.shape())).transpose()?,
            ),
            BinaryKind::Sub => (
                ctx.needs[0].then(|| g.sum_to(a.shape())).transpose()?,
                ctx.needs[1]
                    .then(|| g.neg()?.sum_to(b.shape()))
                    .transpose()?,
            ),
            BinaryKind::Mul => (
                ctx.needs[0].then(|| g.mul(b)?.sum_to(a.shape())).transpose()?,
                ctx.needs[1].then(|| g.mul(a)?.sum_to(b.shape())).transpose()?,
            ),
            BinaryKind::Div => (
                ctx.needs[0].then(|| g.div(b)?.sum_to(a.shape())).transpose()?,
                ctx.needs[1]
                    .then(|| g.mul(ctx.output)?.div(b)?.neg()?.sum_to(b.shape()))
                    .transpose()?,
            ),
        };
        Ok(vec![ga, gb])
    }
}

fn binary_values<F: Element>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    name: &'static str,
    f: impl Fn(F, F) -> F,
) -> Result<(Vec<F>, Vec<usize>)> {
    if a.shape() == b.shape() {
        let v = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok((v, a.shape().to_vec()));
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(name, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
    })?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![F::zero(); super::numel(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_run(&out_shape, &sa, &sb, |off, oa, ob, len, ia, ib| {
        for j in 0..len {
            out[off + j] = f(ad[oa + j * ia], bd[ob + j * ib]);
        }
    });
    Ok((out, out_shape))
}

struct ScaleOp<F>(F);

impl<F: Element> Op<F> for ScaleOp<F> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(ctx.grad.scale(self.0)?)])
    }
}

struct AddScalarOp;

impl<F: Element> Op<F> for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(ctx.grad.clone())])
    }
}

impl<F: Element> Tensor<F> {
    fn binary(&self, other: &Tensor<F>, kind: BinaryKind) -> Result<Tensor<F>> {
        let op = BinaryOp(kind);
        let (v, s) = match kind {
            BinaryKind::Add => binary_values(self, other, "add", |x, y| x + y)?,
            BinaryKind::Sub => binary_values(self, other, "sub", |x, y| x - y)?,
            BinaryKind::Mul => binary_values(self, other, "mul", |x, y| x * y)?,
            BinaryKind::Div => binary_values(self, other, "div", |x, y| x / y)?,
        };
        record(v, s, op, &[self, other])
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn scale(&self, c: F) -> Result<Tensor<F>> {
        let v = self.data().iter().map(|&x| x * c).collect();
        record(v, self.shape().to_vec(), ScaleOp(c), &[self])
    }

    pub fn neg(&self) -> Result<Tensor<F>> {
        self.scale(-F::one())
    }

    pub fn add_scalar(&self, c: F) -> Result<Tensor<F>> {
        let v = self.data().iter().map(|&x| x + c).collect();
        record(v, self.shape().to_vec(), AddScalarOp, &[self])
    }

    pub fn unary(&self, kind: UnaryKind) -> Result<Tensor<F>> {
        if let UnaryKind::Softplus { alpha } = kind {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::invalid(format!("softplus alpha must be positive, got {alpha}")));
            }
        }
        unary_order(self, kind, 0)
    }

    pub fn relu(&self) -> Result<Tensor<F>> {
        self.unary(UnaryKind::Relu)
    }
    pub fn gelu(&self) -> Result<Tensor<F>> {
        self.unary(UnaryKind::Gelu)
    }
    pub fn silu(&self) -> Result<Tensor<F>> {
        self.unary(UnaryKind::Silu)
    }
    pub fn elu(&self) -> Result<Tensor<F>> {
        self.unary(UnaryKind::Elu)
    }
    /// Parametric softplus `(1/alpha) log(1 + exp(alpha x))`, evaluated as
    /// `max(x, 0) + log1p(exp(-alpha |x|)) / alpha`.
    pub fn softplus_param(&self, alpha: f64) -> Result<Tensor<F>> {
        self.unary(UnaryKind::Softplus { alpha })
    }
    pub fn sigmoid(&self) -> Result<Tensor<F>> {
        self.unary(UnaryKind::Sigmoid)
    }
    pub fn exp(&self) -> Result<Tensor<F>> {
        self.unary(UnaryKind::Exp)
    }
    pub fn ln(&self) -> Result<Tensor<F>> {
        self.unary(UnaryKind::Log)
    }
    pub fn sqrt(&self) -> Result<Tensor<F>> {
        self.unary(UnaryKind::Sqrt)
    }
    pub fn square(&self) -> Result<Tensor<F>> {
        self.unary(UnaryKind::Square)
    }
    pub fn abs(&self) -> Result<Tensor<F>> {
        self.unary(UnaryKind::Abs)
    }
    pub fn recip_or_zero(&self) -> Result<Tensor<F>> {
        self.unary(UnaryKind::RecipOrZero)
    }

    /// Elementwise sign in {-1, 0, +1}; the result never carries gradient.
    pub fn sign(&self) -> Tensor<F> {
        self.map(sign_of)
    }
}
