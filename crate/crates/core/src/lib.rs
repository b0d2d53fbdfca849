//! Adversarial training laboratory: a reverse-mode autodiff engine with
//! double backward, small configurable CNNs, FGSM/PGD attacks, the
//! stabilisation tricks for single-step adversarial training, and a training
//! loop that detects catastrophic overfitting.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod nn;
pub mod par;
pub mod rng;
pub mod training;
pub mod tricks;

pub use autodiff::{enable_grad, grad, no_grad, DType, Element, GradOptions, Tensor};
pub use error::{Error, Result};
