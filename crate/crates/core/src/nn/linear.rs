use super::{Classifier, Mode};
use crate::autodiff::{Element, Tensor};
use crate::error::{Error, Result};

/// Multinomial logistic regression on flattened inputs: `flatten(x) W + b`.
///
/// Its input gradients have closed forms, which makes it a useful reference
/// model for attacks and input-gradient regularisers.
#[derive(Debug, Clone)]
pub struct LinearSoftmax<F: Element> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Element> LinearSoftmax<F> {
    /// `weight` is `[D, C]`, `bias` is `[C]`.
    pub fn new(weight: Vec<F>, bias: Vec<F>, dim: usize) -> Result<Self> {
        let classes = bias.len();
        Ok(LinearSoftmax {
            weight: Tensor::leaf(weight, &[dim, classes])?,
            bias: Tensor::leaf(bias, &[classes])?,
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn classes(&self) -> usize {
        self.weight.dim(1)
    }
}

impl<F: Element> Classifier<F> for LinearSoftmax<F> {
    fn logits(&self, x: &Tensor<F>, _mode: Mode) -> Result<Tensor<F>> {
        let flat = x.flatten()?;
        if flat.dim(1) != self.dim() {
            return Err(Error::shape(
                "linear_softmax",
                format!("input {:?} has {} features, model expects {}", x.shape(), flat.dim(1), self.dim()),
            ));
        }
        flat.matmul(&self.weight)?.add(&self.bias)
    }

    fn trainable(&self) -> Vec<&Tensor<F>> {
        vec![&self.weight, &self.bias]
    }
}
