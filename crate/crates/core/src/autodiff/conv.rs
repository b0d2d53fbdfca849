//! 2-D convolution and average pooling, NCHW layout.
//!
//! Convolution is lowered to im2col + GEMM per image. The three linear maps
//! involved (forward, input adjoint, weight adjoint) are each recorded as
//! their own op and their backward rules are expressed through one another,
//! so the set is closed under differentiation.

use std::sync::Arc;

use super::gemm::gemm;
use super::{record, BackwardCtx, Element, Op, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Images per partial sum when reducing weight gradients over the batch.
const WEIGHT_GRAD_CHUNK: usize = 8;

/// Spatial output extent of a convolution, `None` when it would be empty.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<F: Element>(img: &[F], g: &Geom, cols: &mut [F]) {
    let hw_out = g.plane_out();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(F::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            F::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Element>(cols: &[F], g: &Geom, img: &mut [F]) {
    let hw_out = g.plane_out();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            let d = &mut dst[iw as usize];
                            *d = *d + src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn forward_kernel<F: Element>(x: &[F], w: &[F], g: &Geom) -> Vec<F> {
    let out_img = g.o * g.plane_out();
    let in_img = g.c * g.h * g.w;
    let mut out = vec![F::zero(); g.n * out_img];
    par::for_each_chunk_mut(&mut out, out_img, |n, dst| {
        let img = &x[n * in_img..(n + 1) * in_img];
        if g.is_pointwise() {
            gemm(g.o, g.ckk(), g.plane_out(), w, false, img, false, dst, F::zero());
        } else {
            let mut cols = vec![F::zero(); g.ckk() * g.plane_out()];
            im2col(img, g, &mut cols);
            gemm(g.o, g.ckk(), g.plane_out(), w, false, &cols, false, dst, F::zero());
        }
    });
    out
}

fn input_grad_kernel<F: Element>(gy: &[F], w: &[F], g: &Geom) -> Vec<F> {
    let out_img = g.o * g.plane_out();
    let in_img = g.c * g.h * g.w;
    let mut gx = vec![F::zero(); g.n * in_img];
    par::for_each_chunk_mut(&mut gx, in_img, |n, dst| {
        let gy_n = &gy[n * out_img..(n + 1) * out_img];
        if g.is_pointwise() {
            gemm(g.ckk(), g.o, g.plane_out(), w, true, gy_n, false, dst, F::zero());
        } else {
            let mut cols = vec![F::zero(); g.ckk() * g.plane_out()];
            gemm(g.ckk(), g.o, g.plane_out(), w, true, gy_n, false, &mut cols, F::zero());
            col2im(&cols, g, dst);
        }
    });
    gx
}

fn weight_grad_kernel<F: Element>(x: &[F], gy: &[F], g: &Geom) -> Vec<F> {
    let out_img = g.o * g.plane_out();
    let in_img = g.c * g.h * g.w;
    let wsize = g.o * g.ckk();
    let chunks = g.n.div_ceil(WEIGHT_GRAD_CHUNK);
    let partials = par::map_indexed(chunks, |ci| {
        let mut acc = vec![F::zero(); wsize];
        let mut cols = vec![F::zero(); if g.is_pointwise() { 0 } else { g.ckk() * g.plane_out() }];
        let end = ((ci + 1) * WEIGHT_GRAD_CHUNK).min(g.n);
        for n in ci * WEIGHT_GRAD_CHUNK..end {
            let img = &x[n * in_img..(n + 1) * in_img];
            let gy_n = &gy[n * out_img..(n + 1) * out_img];
            let src: &[F] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut cols);
                &cols
            };
            gemm(g.o, g.plane_out(), g.ckk(), gy_n, false, src, true, &mut acc, F::one());
        }
        acc
    });
    let mut total = vec![F::zero(); wsize];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t = *t + v;
        }
    }
    total
}

struct Conv2d {
    stride: usize,
    pad: usize,
}

struct ConvInputGrad {
    stride: usize,
    pad: usize,
}

struct ConvWeightGrad {
    stride: usize,
    pad: usize,
}

impl<F: Element> Op<F> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (x, w, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        let gx = if ctx.needs[0] {
            Some(conv_input_grad(g, w, self.stride, self.pad, x.dim(2), x.dim(3))?)
        } else {
            None
        };
        let gw = if ctx.needs[1] {
            Some(conv_weight_grad(x, g, self.stride, self.pad, w.dim(2))?)
        } else {
            None
        };
        Ok(vec![gx, gw])
    }
}

impl<F: Element> Op<F> for ConvInputGrad {
    fn name(&self) -> &'static str {
        "conv2d_input_grad"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (gy, w, gg) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        let d_gy = if ctx.needs[0] {
            Some(conv_raw(gg, w, self.stride, self.pad)?)
        } else {
            None
        };
        let d_w = if ctx.needs[1] {
            Some(conv_weight_grad(gg, gy, self.stride, self.pad, w.dim(2))?)
        } else {
            None
        };
        Ok(vec![d_gy, d_w])
    }
}

impl<F: Element> Op<F> for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (x, gy, gg) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
        let d_x = if ctx.needs[0] {
            Some(conv_input_grad(gy, gg, self.stride, self.pad, x.dim(2), x.dim(3))?)
        } else {
            None
        };
        let d_gy = if ctx.needs[1] {
            Some(conv_raw(x, gg, self.stride, self.pad)?)
        } else {
            None
        };
        Ok(vec![d_x, d_gy])
    }
}

fn geometry<F: Element>(x: &Tensor<F>, w: &Tensor<F>, stride: usize, pad: usize) -> Result<Geom> {
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected NCHW input and OIKK kernel, got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, ci, k, k2) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if ci != c || k != k2 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {:?} incompatible with input {:?}", w.shape(), x.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    let ho = conv2d_output_size(h, k, stride, pad);
    let wo = conv2d_output_size(wd, k, stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(Geom {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            ho,
            wo,
        }),
        _ => Err(Error::shape(
            "conv2d",
            format!("empty output for input {:?}, kernel {k}, stride {stride}, pad {pad}", x.shape()),
        )),
    }
}

fn conv_raw<F: Element>(x: &Tensor<F>, w: &Tensor<F>, stride: usize, pad: usize) -> Result<Tensor<F>> {
    let g = geometry(x, w, stride, pad)?;
    let out = forward_kernel(x.data(), w.data(), &g);
    record(out, vec![g.n, g.o, g.ho, g.wo], Conv2d { stride, pad }, &[x, w])
}

fn conv_input_grad<F: Element>(
    gy: &Tensor<F>,
    w: &Tensor<F>,
    stride: usize,
    pad: usize,
    h: usize,
    wd: usize,
) -> Result<Tensor<F>> {
    let (n, o, ho, wo) = (gy.dim(0), gy.dim(1), gy.dim(2), gy.dim(3));
    let (c, k) = (w.dim(1), w.dim(2));
    let g = Geom {
        n,
        c,
        h,
        w: wd,
        o,
        k,
        stride,
        pad,
        ho,
        wo,
    };
    let gx = input_grad_kernel(gy.data(), w.data(), &g);
    record(gx, vec![n, c, h, wd], ConvInputGrad { stride, pad }, &[gy, w])
}

fn conv_weight_grad<F: Element>(
    x: &Tensor<F>,
    gy: &Tensor<F>,
    stride: usize,
    pad: usize,
    k: usize,
) -> Result<Tensor<F>> {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, ho, wo) = (gy.dim(1), gy.dim(2), gy.dim(3));
    let g = Geom {
        n,
        c,
        h,
        w: wd,
        o,
        k,
        stride,
        pad,
        ho,
        wo,
    };
    let gw = weight_grad_kernel(x.data(), gy.data(), &g);
    record(gw, vec![o, c, k, k], ConvWeightGrad { stride, pad }, &[x, gy])
}

/// Cross-correlation of an NCHW batch with an OIKK kernel, plus optional bias.
pub fn conv2d<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let y = conv_raw(x, w, stride, pad)?;
    match bias {
        None => Ok(y),
        Some(b) => {
            if b.shape() != [w.dim(0)] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", b.shape(), w.dim(0)),
                ));
            }
            y.add(&b.reshape(&[1, w.dim(0), 1, 1])?)
        }
    }
}

// ---------------------------------------------------------------------------
// Average pooling over rectangular windows.

#[derive(Debug)]
struct PoolGeom {
    h: usize,
    w: usize,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl PoolGeom {
    fn out_hw(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }
}

struct Pool(Arc<PoolGeom>);
struct PoolAdjoint(Arc<PoolGeom>);

fn pool_values<F: Element>(x: &[F], planes: usize, g: &PoolGeom) -> Vec<F> {
    let (ho, wo) = g.out_hw();
    let mut out = vec![F::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for (i, &(r0, r1)) in g.rows.iter().enumerate() {
            for (j, &(c0, c1)) in g.cols.iter().enumerate() {
                let mut s = F::zero();
                for r in r0..r1 {
                    for c in c0..c1 {
                        s = s + src[r * g.w + c];
                    }
                }
                out[(p * ho + i) * wo + j] = s / F::cst(((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

fn pool_adjoint_values<F: Element>(gy: &[F], planes: usize, g: &PoolGeom) -> Vec<F> {
    let (ho, wo) = g.out_hw();
    let mut gx = vec![F::zero(); planes * g.h * g.w];
    for p in 0..planes {
        let dst = &mut gx[p * g.h * g.w..(p + 1) * g.h * g.w];
        for (i, &(r0, r1)) in g.rows.iter().enumerate() {
            for (j, &(c0, c1)) in g.cols.iter().enumerate() {
                let v = gy[(p * ho + i) * wo + j] / F::cst(((r1 - r0) * (c1 - c0)) as f64);
                for r in r0..r1 {
                    for c in c0..c1 {
                        dst[r * g.w + c] = dst[r * g.w + c] + v;
                    }
                }
            }
        }
    }
    gx
}

fn pool_apply<F: Element>(x: &Tensor<F>, g: Arc<PoolGeom>) -> Result<Tensor<F>> {
    let (n, c) = (x.dim(0), x.dim(1));
    let (ho, wo) = g.out_hw();
    let v = pool_values(x.data(), n * c, &g);
    record(v, vec![n, c, ho, wo], Pool(g), &[x])
}

fn pool_adjoint_apply<F: Element>(gy: &Tensor<F>, g: Arc<PoolGeom>) -> Result<Tensor<F>> {
    let (n, c) = (gy.dim(0), gy.dim(1));
    let v = pool_adjoint_values(gy.data(), n * c, &g);
    let (h, w) = (g.h, g.w);
    record(v, vec![n, c, h, w], PoolAdjoint(g), &[gy])
}

impl<F: Element> Op<F> for Pool {
    fn name(&self) -> &'static str {
        "avg_pool"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(pool_adjoint_apply(ctx.grad, Arc::clone(&self.0))?)])
    }
}

impl<F: Element> Op<F> for PoolAdjoint {
    fn name(&self) -> &'static str {
        "avg_pool_adjoint"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(pool_apply(ctx.grad, Arc::clone(&self.0))?)])
    }
}

fn require_nchw<F: Element>(x: &Tensor<F>, op: &'static str) -> Result<(usize, usize)> {
    if x.ndim() != 4 {
        return Err(Error::shape(op, format!("expected NCHW input, got {:?}", x.shape())));
    }
    Ok((x.dim(2), x.dim(3)))
}

/// Non-padded average pooling with a square window.
pub fn avg_pool2d<F: Element>(x: &Tensor<F>, kernel: usize, stride: usize) -> Result<Tensor<F>> {
    let (h, w) = require_nchw(x, "avg_pool2d")?;
    let (ho, wo) = match (conv2d_output_size(h, kernel, stride, 0), conv2d_output_size(w, kernel, stride, 0)) {
        (Some(a), Some(b)) if kernel > 0 => (a, b),
        _ => return Err(Error::shape("avg_pool2d", format!("window {kernel}/{stride} on {h}x{w}"))),
    };
    let rows = (0..ho).map(|i| (i * stride, i * stride + kernel)).collect();
    let cols = (0..wo).map(|j| (j * stride, j * stride + kernel)).collect();
    pool_apply(x, Arc::new(PoolGeom { h, w, rows, cols }))
}

/// Average pooling to a fixed output size with windows
/// `[floor(i*H/out), ceil((i+1)*H/out))`.
pub fn adaptive_avg_pool2d<F: Element>(x: &Tensor<F>, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
    let (h, w) = require_nchw(x, "adaptive_avg_pool2d")?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::shape(
            "adaptive_avg_pool2d",
            format!("cannot pool {h}x{w} to {out_h}x{out_w}"),
        ));
    }
    let win = |len: usize, out: usize| -> Vec<(usize, usize)> {
        (0..out)
            .map(|i| ((i * len) / out, ((i + 1) * len).div_ceil(out)))
            .collect()
    };
    pool_apply(
        x,
        Arc::new(PoolGeom {
            h,
            w,
            rows: win(h, out_h),
            cols: win(w, out_w),
        }),
    )
}

/// Mean over the spatial dimensions, `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w) = require_nchw(x, "global_avg_pool")?;
    let (n, c) = (x.dim(0), x.dim(1));
    x.sum_to(&[n, c, 1, 1])?
        .scale(F::one() / F::cst((h * w) as f64))?
        .reshape(&[n, c])
}
