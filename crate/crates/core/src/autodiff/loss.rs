use super::{record, BackwardCtx, Element, Op, Tensor};
use crate::error::{Error, Result};

struct LogSoftmax;

impl<F: Element> Op<F> for LogSoftmax {
    fn name(&self) -> &'static str {
        "log_softmax"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        let g = ctx.grad;
        let probs = ctx.output.exp()?;
        let row_sums = g.sum_to(&[g.dim(0), 1])?;
        Ok(vec![Some(g.sub(&probs.mul(&row_sums)?)?)])
    }
}

fn require_rows<F: Element>(x: &Tensor<F>, op: &'static str) -> Result<(usize, usize)> {
    if x.ndim() != 2 {
        return Err(Error::shape(op, format!("expected [N, C], got {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1)))
}

impl<F: Element> Tensor<F> {
    /// Row-wise log-softmax of an `[N, C]` tensor, shifted by the row max.
    pub fn log_softmax(&self) -> Result<Tensor<F>> {
        let (n, c) = require_rows(self, "log_softmax")?;
        let x = self.data();
        let mut out = vec![F::zero(); n * c];
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let s: F = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        record(out, vec![n, c], LogSoftmax, &[self])
    }
}

pub fn softmax_rows<F: Element>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    logits.log_softmax()?.exp()
}

fn one_hot<F: Element>(labels: &[usize], n: usize, c: usize) -> Result<Tensor<F>> {
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let mut v = vec![F::zero(); n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        v[i * c + y] = F::one();
    }
    Ok(Tensor::raw(v, vec![n, c]))
}

/// Summed negative log-likelihood over the batch.
pub fn cross_entropy_sum<F: Element>(logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    let (n, c) = require_rows(logits, "cross_entropy")?;
    let mask = one_hot(labels, n, c)?;
    logits.log_softmax()?.mul(&mask)?.sum()?.neg()
}

/// Mean negative log-likelihood over the batch.
pub fn cross_entropy<F: Element>(logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    let n = require_rows(logits, "cross_entropy")?.0;
    if n == 0 {
        return Err(Error::invalid("cross_entropy of an empty batch"));
    }
    cross_entropy_sum(logits, labels)?.scale(F::one() / F::cst(n as f64))
}

/// Per-example losses as plain values (no graph).
pub fn cross_entropy_per_example<F: Element>(logits: &Tensor<F>, labels: &[usize]) -> Result<Vec<F>> {
    let (n, c) = require_rows(logits, "cross_entropy")?;
    one_hot::<F>(labels, n, c)?;
    let x = logits.data();
    Ok((0..n)
        .map(|i| {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let s: F = row.iter().map(|&v| (v - m).exp()).sum();
            m + s.ln() - row[labels[i]]
        })
        .collect())
}

/// `sqrt(sum(x^2))` with gradient 0 at the origin.
pub fn l2_norm<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.square()?.sum()?.sqrt()
}

fn row_shape(x: &[usize]) -> Vec<usize> {
    let mut s = vec![1; x.len()];
    if let Some(first) = x.first() {
        s[0] = *first;
    }
    s
}

/// L2 norm of each leading-axis slice: `[N, ...] -> [N]`.
pub fn row_l2_norms<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.ndim() == 0 {
        return Err(Error::shape("row_l2_norms", "scalar input"));
    }
    x.square()?
        .sum_to(&row_shape(x.shape()))?
        .sqrt()?
        .reshape(&[x.dim(0)])
}

/// Cosine similarity of corresponding leading-axis slices, `[N]`.
///
/// Computed as `dot / sqrt(|a|^2 |b|^2)`, so identical rows give exactly 1.
/// Rows where either side has zero norm yield 0.
pub fn cosine_similarity_rows<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() || a.ndim() == 0 {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let n = a.dim(0);
    let rows = row_shape(a.shape());
    let dot = a.mul(b)?.sum_to(&rows)?.reshape(&[n])?;
    let na = a.square()?.sum_to(&rows)?.reshape(&[n])?;
    let nb = b.square()?.sum_to(&rows)?.reshape(&[n])?;
    let denom = na.mul(&nb)?.sqrt()?;
    // Rows with a zero norm divide by 1 instead; their dot product is 0.
    let guard: Vec<F> = denom
        .data()
        .iter()
        .map(|&d| if d == F::zero() { F::one() } else { F::zero() })
        .collect();
    dot.div(&denom.add(&Tensor::from_vec(guard, &[n])?)?)
}

/// Mean absolute value.
pub fn l1_mean<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.abs()?.mean()
}
