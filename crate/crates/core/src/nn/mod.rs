//! Small convolutional classifiers with a configurable first-layer stride
//! and activation smoothness.

mod checkpoint;
mod linear;
mod model;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tensor, UnaryKind};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use linear::LinearSoftmax;
pub use model::{BnUpdate, Forward, Model, BN_MOMENTUM};

/// Batch-norm behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with the current batch's statistics.
    Train,
    /// Normalise with running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    SmallCnn,
    PreactResnetLite,
    PatchifyStemNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
    Elu,
    SoftplusParam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Stride of the stem convolution, 1 to 4.
    pub first_conv_stride: usize,
    /// Stage whose downsampling is removed first when the stem stride grows.
    /// `None` picks the first stage with stride 2.
    pub compensation_stage: Option<usize>,
    pub activation: Activation,
    /// Sharpness of the parametric softplus; only read for `softplus_param`.
    pub softplus_alpha: f64,
    pub num_classes: usize,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    /// Channel widths; `None` uses the architecture default.
    pub widths: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::SmallCnn,
            first_conv_stride: 1,
            compensation_stage: None,
            activation: Activation::Relu,
            softplus_alpha: 2.0,
            num_classes: 10,
            input_shape: [3, 32, 32],
            widths: None,
        }
    }
}

impl ModelConfig {
    pub fn activation_kind(&self) -> UnaryKind {
        match self.activation {
            Activation::Relu => UnaryKind::Relu,
            Activation::Gelu => UnaryKind::Gelu,
            Activation::Silu => UnaryKind::Silu,
            Activation::Elu => UnaryKind::Elu,
            Activation::SoftplusParam => UnaryKind::Softplus {
                alpha: self.softplus_alpha,
            },
        }
    }

    pub fn resolved_widths(&self) -> Vec<usize> {
        self.widths.clone().unwrap_or_else(|| match self.arch {
            Arch::SmallCnn | Arch::PatchifyStemNet => vec![16, 32, 64],
            Arch::PreactResnetLite => vec![32, 64, 128],
        })
    }

    /// Checks that do not depend on building the network.
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.first_conv_stride) {
            return Err(Error::config(format!(
                "first_conv_stride must be in 1..=4, got {}",
                self.first_conv_stride
            )));
        }
        if self.activation == Activation::SoftplusParam
            && !(self.softplus_alpha.is_finite() && self.softplus_alpha > 0.0)
        {
            return Err(Error::config(format!(
                "softplus_alpha must be positive, got {}",
                self.softplus_alpha
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::config("input_shape extents must be positive"));
        }
        let w = self.resolved_widths();
        if w.len() != 3 || w.contains(&0) {
            return Err(Error::config(format!("widths must be three positive values, got {w:?}")));
        }
        Ok(())
    }
}

/// A named tensor owned by a model.
#[derive(Debug, Clone)]
pub struct Parameter<F: Element> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

/// The first convolution: its weight and geometry.
#[derive(Debug, Clone, Copy)]
pub struct Stem<'a, F: Element> {
    pub weight: &'a Tensor<F>,
    pub stride: usize,
    pub pad: usize,
}

/// Anything that maps an image batch to logits.
pub trait Classifier<F: Element>: Sync {
    fn logits(&self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>>;

    /// Trainable parameters in a fixed order.
    fn trainable(&self) -> Vec<&Tensor<F>>;

    fn stem(&self) -> Option<Stem<'_, F>> {
        None
    }
}
