//! Stabilisers for single-step adversarial training: input masking and the
//! GradNorm, WeightNorm and GradAlign regularisers.

use serde::{Deserialize, Serialize};

use crate::attacks::{input_gradient, project};
use crate::autodiff::{
    conv2d, cosine_similarity_rows, cross_entropy_sum, enable_grad, grad, l1_mean, no_grad, row_l2_norms, Element,
    GradOptions, Tensor,
};
use crate::data::{PatternKind, PatternStore};
use crate::error::{Error, Result};
use crate::nn::{Classifier, Mode};
use crate::rng::{derive_rng, Rng};

/// Midpoint of the range over which WeightNorm stays stable.
pub const DEFAULT_WEIGHTNORM_LAMBDA: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Off,
    RandomPerStep,
    FixedPerExample,
}

/// Masks cover spatial positions; all channels of a pixel share one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    Spatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub ratio: f64,
    pub mode: MaskMode,
    pub granularity: MaskGranularity,
    /// Attack step; `None` means epsilon.
    pub step_size: Option<f64>,
    /// Train on `x*M + delta` (true) or on `x + delta` (false).
    pub train_on_masked: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            ratio: 0.0,
            mode: MaskMode::Off,
            granularity: MaskGranularity::Spatial,
            step_size: None,
            train_on_masked: true,
        }
    }
}

impl MaskSpec {
    pub fn random(ratio: f64) -> Self {
        MaskSpec {
            ratio,
            mode: MaskMode::RandomPerStep,
            ..MaskSpec::default()
        }
    }

    pub fn fixed(ratio: f64) -> Self {
        MaskSpec {
            ratio,
            mode: MaskMode::FixedPerExample,
            ..MaskSpec::default()
        }
    }

    pub fn is_on(&self) -> bool {
        self.mode != MaskMode::Off
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::config(format!("mask ratio {} outside [0, 1]", self.ratio)));
        }
        if let Some(a) = self.step_size {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::config(format!("mask step_size must be finite and >= 0, got {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub gradnorm_beta: f64,
    pub weightnorm_lambda: f64,
    pub gradalign_lambda: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            gradnorm_beta: 0.0,
            weightnorm_lambda: 0.0,
            gradalign_lambda: 0.0,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gradnorm_beta", self.gradnorm_beta),
            ("weightnorm_lambda", self.weightnorm_lambda),
            ("gradalign_lambda", self.gradalign_lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn any(&self) -> bool {
        self.gradnorm_beta > 0.0 || self.weightnorm_lambda > 0.0 || self.gradalign_lambda > 0.0
    }

    pub fn needs_second_order(&self) -> bool {
        self.gradnorm_beta > 0.0 || self.gradalign_lambda > 0.0
    }
}

/// `[H, W]` mask with exactly `floor(ratio * H * W)` zeros at uniformly
/// chosen positions.
pub fn make_mask<F: Element>(h: usize, w: usize, ratio: f64, rng: &mut Rng) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let m = PatternKind::Mask { ratio }.generate(h * w, rng);
    Tensor::from_vec(m.into_iter().map(|v| F::cst(f64::from(v))).collect(), &[h, w])
}

/// Fresh masks for a batch, `[N, 1, H, W]`, one derived stream per row.
pub fn random_mask_batch<F: Element>(n: usize, h: usize, w: usize, ratio: f64, seed: u64) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(n * h * w);
    for i in 0..n {
        data.extend(make_mask::<F>(h, w, ratio, &mut derive_rng(seed, "mask", i as u64))?.to_vec());
    }
    Tensor::from_vec(data, &[n, 1, h, w])
}

/// One mask per example index, fixed for the whole run.
#[derive(Debug, Clone)]
pub struct FixedMaskStore {
    inner: PatternStore,
}

impl FixedMaskStore {
    pub fn new(ratio: f64, seed: u64, h: usize, w: usize) -> Result<Self> {
        Ok(FixedMaskStore {
            inner: PatternStore::new(PatternKind::Mask { ratio }, seed, &[h, w])?,
        })
    }

    pub fn from_store(inner: PatternStore) -> Result<Self> {
        match inner.kind() {
            PatternKind::Mask { .. } if inner.shape().len() == 2 => Ok(FixedMaskStore { inner }),
            k => Err(Error::invalid(format!("{k:?} store cannot supply masks"))),
        }
    }

    pub fn store(&self) -> &PatternStore {
        &self.inner
    }

    /// `[N, 1, H, W]` masks in example order.
    pub fn batch<F: Element>(&mut self, indices: &[usize]) -> Result<Tensor<F>> {
        let (h, w) = (self.inner.shape()[0], self.inner.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            data.extend(self.inner.get(i).iter().map(|&v| F::cst(f64::from(v))));
        }
        Tensor::from_vec(data, &[indices.len(), 1, h, w])
    }
}

/// Result of an attack on the masked image.
#[derive(Debug, Clone)]
pub struct MaskedAdversarial<F: Element> {
    /// `x * M`.
    pub masked: Tensor<F>,
    pub delta: Tensor<F>,
}

impl<F: Element> MaskedAdversarial<F> {
    /// `x * M + delta`.
    pub fn x_adv(&self) -> Result<Tensor<F>> {
        no_grad(|| self.masked.add(&self.delta))
    }
}

/// `delta = alpha * sign(grad L(f(x * M)))`, taken at the masked image and
/// kept in the epsilon ball (and pixel box around `x * M`).
#[allow(clippy::too_many_arguments)]
pub fn fgsm_mask_attack<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Tensor<F>,
    y: &[usize],
    epsilon: f64,
    step_size: f64,
    mask: &Tensor<F>,
    clamp_pixel_box: bool,
    mode: Mode,
) -> Result<MaskedAdversarial<F>> {
    let masked = no_grad(|| x.detach().mul(&mask.detach()))?;
    if masked.shape() != x.shape() {
        return Err(Error::shape("fgsm_mask", format!("mask {:?} widens input {:?}", mask.shape(), x.shape())));
    }
    let g = input_gradient(model, &masked, y, mode)?;
    let alpha = F::cst(step_size);
    let step: Vec<F> = g.sign().data().iter().map(|&s| alpha * s).collect();
    let delta = project(&masked, &step, F::cst(epsilon), clamp_pixel_box);
    Ok(MaskedAdversarial { masked, delta })
}

/// `beta * mean_i ||grad_x CE(f(x_i), y_i)||_2`, differentiable in the
/// parameters. With `beta = 0` no graph is built.
pub fn gradnorm_term<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Tensor<F>,
    y: &[usize],
    beta: f64,
    mode: Mode,
) -> Result<Tensor<F>> {
    if beta < 0.0 {
        return Err(Error::invalid(format!("gradnorm beta must be >= 0, got {beta}")));
    }
    if beta == 0.0 {
        return Ok(Tensor::scalar(F::zero()));
    }
    enable_grad(|| {
        let x = x.detach().into_leaf();
        let loss = cross_entropy_sum(&model.logits(&x, mode)?, y)?;
        let g = grad(&loss, &[&x], GradOptions::create_graph())?.remove(0);
        row_l2_norms(&g)?.mean()?.scale(F::cst(beta))
    })
}

/// `lambda * mean |conv(delta, w1)|` with the stem's stride and padding.
/// `delta` is treated as a constant, so only the stem weight gets gradient.
pub fn weightnorm_term<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    delta: &Tensor<F>,
    lambda: f64,
) -> Result<Tensor<F>> {
    if lambda < 0.0 {
        return Err(Error::invalid(format!("weightnorm lambda must be >= 0, got {lambda}")));
    }
    let stem = model
        .stem()
        .ok_or_else(|| Error::invalid("weightnorm needs a model with a first convolution"))?;
    if lambda == 0.0 {
        return Ok(Tensor::scalar(F::zero()));
    }
    let feat = conv2d(&delta.detach(), stem.weight, None, stem.stride, stem.pad)?;
    l1_mean(&feat)?.scale(F::cst(lambda))
}

/// GradAlign with noise drawn from `U(-epsilon, epsilon)` keyed by `seed`.
#[allow(clippy::too_many_arguments)]
pub fn gradalign_term<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Tensor<F>,
    y: &[usize],
    epsilon: f64,
    lambda: f64,
    seed: u64,
    clean_grad: Option<&Tensor<F>>,
    mode: Mode,
) -> Result<Tensor<F>> {
    use rand::Rng as _;
    let mut rng = derive_rng(seed, "gradalign", 0);
    let eta: Vec<F> = (0..x.numel())
        .map(|_| F::cst(epsilon * rng.random_range(-1.0..=1.0)))
        .collect();
    let eta = Tensor::from_vec(eta, x.shape())?;
    gradalign_term_with_noise(model, x, y, &eta, lambda, clean_grad, mode)
}

/// `lambda * mean_i (1 - cos(g_i(x), g_i(x + eta)))`.
///
/// The clean-input gradient is a constant (pass it in to reuse the one the
/// FGSM step already computed); the gradient at `x + eta` is built with
/// `create_graph`, so the term is differentiable in the parameters. Examples
/// whose gradient vanishes on either side contribute 0 but still count in
/// the mean.
pub fn gradalign_term_with_noise<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Tensor<F>,
    y: &[usize],
    eta: &Tensor<F>,
    lambda: f64,
    clean_grad: Option<&Tensor<F>>,
    mode: Mode,
) -> Result<Tensor<F>> {
    if lambda < 0.0 {
        return Err(Error::invalid(format!("gradalign lambda must be >= 0, got {lambda}")));
    }
    if eta.shape() != x.shape() {
        return Err(Error::shape("gradalign", format!("noise {:?} vs input {:?}", eta.shape(), x.shape())));
    }
    if lambda == 0.0 {
        return Ok(Tensor::scalar(F::zero()));
    }
    let g1 = match clean_grad {
        Some(g) if g.shape() == x.shape() => g.detach(),
        Some(g) => return Err(Error::shape("gradalign", format!("clean gradient {:?}", g.shape()))),
        None => input_gradient(model, x, y, mode)?,
    };
    enable_grad(|| {
        let xe = no_grad(|| x.detach().add(&eta.detach()))?.into_leaf();
        let loss = cross_entropy_sum(&model.logits(&xe, mode)?, y)?;
        let g2 = grad(&loss, &[&xe], GradOptions::create_graph())?.remove(0);
        let n = x.dim(0);
        let a = g1.reshape(&[n, x.numel() / n])?;
        let b = g2.reshape(&[n, x.numel() / n])?;
        let cos = cosine_similarity_rows(&a, &b)?;
        let n1 = row_l2_norms(&a)?;
        let n2 = no_grad(|| row_l2_norms(&b.detach()))?;
        let valid: Vec<F> = n1
            .data()
            .iter()
            .zip(n2.data())
            .map(|(&p, &q)| if p > F::zero() && q > F::zero() { F::one() } else { F::zero() })
            .collect();
        let valid = Tensor::from_vec(valid, &[n])?;
        let gap = cos.neg()?.add_scalar(F::one())?.relu()?;
        gap.mul(&valid)?.mean()?.scale(F::cst(lambda))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::fgsm;
    use crate::autodiff::GraphStats;
    use crate::nn::{LinearSoftmax, Model, ModelConfig};
    use rand::{Rng as _, SeedableRng};

    fn linear(seed: u64, dim: usize, classes: usize) -> LinearSoftmax<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        let w = (0..dim * classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..classes).map(|_| rng.random_range(-0.5..0.5)).collect();
        LinearSoftmax::new(w, b, dim).unwrap()
    }

    fn images(seed: u64, n: usize, shape: [usize; 3]) -> Tensor<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        let len = n * shape.iter().product::<usize>();
        Tensor::from_vec((0..len).map(|_| rng.random::<f64>()).collect(), &[n, shape[0], shape[1], shape[2]]).unwrap()
    }

    /// `W (softmax(xW + b) - e_y)` for one flattened example.
    fn linear_input_grad(m: &LinearSoftmax<f64>, x: &[f64], y: usize) -> Vec<f64> {
        let (d, c) = (m.dim(), m.classes());
        let w = m.weight.data();
        let z: Vec<f64> = (0..c)
            .map(|k| m.bias.data()[k] + (0..d).map(|i| x[i] * w[i * c + k]).sum::<f64>())
            .collect();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let r: Vec<f64> = (0..c).map(|k| e[k] / s - if k == y { 1.0 } else { 0.0 }).collect();
        (0..d).map(|i| (0..c).map(|k| w[i * c + k] * r[k]).sum()).collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn mask_counts_and_extremes() {
        let mut rng = Rng::seed_from_u64(0);
        let m: Tensor<f64> = make_mask(32, 32, 0.3, &mut rng).unwrap();
        assert_eq!(m.data().iter().filter(|&&v| v == 0.0).count(), 307);
        let ones: Tensor<f64> = make_mask(4, 4, 0.0, &mut rng).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let zeros: Tensor<f64> = make_mask(4, 4, 1.0, &mut rng).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        assert!(make_mask::<f64>(4, 4, 1.01, &mut rng).is_err());
    }

    #[test]
    fn masking_is_idempotent() {
        let x = images(1, 3, [3, 5, 5]);
        let m = random_mask_batch::<f64>(3, 5, 5, 0.4, 2).unwrap();
        let once = x.mul(&m).unwrap();
        assert_eq!(once.mul(&m).unwrap().to_vec(), once.to_vec());
    }

    #[test]
    fn all_ones_mask_is_plain_fgsm() {
        let m = linear(1, 12, 3);
        let x = images(2, 4, [3, 2, 2]);
        let y = [0, 1, 2, 1];
        let eps = 8.0 / 255.0;
        let ones = Tensor::ones(&[4, 1, 2, 2]);
        let adv = fgsm_mask_attack(&m, &x, &y, eps, eps, &ones, true, Mode::Eval).unwrap();
        let d = fgsm(&m, &x, &y, eps, true, Mode::Eval).unwrap();
        assert_eq!(adv.x_adv().unwrap().to_vec(), x.add(&d).unwrap().to_vec());
    }

    #[test]
    fn all_zero_mask_ignores_content() {
        let m = linear(1, 12, 3);
        let zeros = Tensor::zeros(&[2, 1, 2, 2]);
        let a = fgsm_mask_attack(&m, &images(3, 2, [3, 2, 2]), &[0, 1], 0.1, 0.1, &zeros, true, Mode::Eval).unwrap();
        let b = fgsm_mask_attack(&m, &images(4, 2, [3, 2, 2]), &[0, 1], 0.1, 0.1, &zeros, true, Mode::Eval).unwrap();
        assert_eq!(a.delta.to_vec(), b.delta.to_vec());
    }

    #[test]
    fn fixed_masks_repeat_per_index() {
        let mut s = FixedMaskStore::new(0.3, 4, 8, 8).unwrap();
        let a: Tensor<f32> = s.batch(&[3, 1]).unwrap();
        let b: Tensor<f32> = s.batch(&[1, 3]).unwrap();
        assert_eq!(&a.data()[..64], &b.data()[64..]);
    }

    #[test]
    fn gradnorm_matches_closed_form() {
        let m = linear(5, 12, 4);
        let x = images(6, 5, [3, 2, 2]);
        let y = [0, 3, 1, 2, 2];
        let beta = 0.7;
        let t = gradnorm_term(&m, &x, &y, beta, Mode::Eval).unwrap().item().unwrap();
        let mut expect = 0.0;
        for i in 0..5 {
            expect += norm(&linear_input_grad(&m, &x.data()[i * 12..(i + 1) * 12], y[i]));
        }
        expect *= beta / 5.0;
        assert!((t - expect).abs() < 1e-6 * expect.max(1.0));
    }

    #[test]
    fn gradnorm_parameter_gradient_matches_finite_differences() {
        let m = linear(7, 8, 3);
        let x = images(8, 4, [2, 2, 2]);
        let y = [2, 0, 1, 1];
        let t = gradnorm_term(&m, &x, &y, 1.0, Mode::Eval).unwrap();
        let g = grad(&t, &[&m.weight, &m.bias], GradOptions::default()).unwrap();
        let h = 1e-5;
        let eval = |w: Vec<f64>, b: Vec<f64>| {
            let mm = LinearSoftmax::new(w, b, 8).unwrap();
            gradnorm_term(&mm, &x, &y, 1.0, Mode::Eval).unwrap().item().unwrap()
        };
        let (w0, b0) = (m.weight.to_vec(), m.bias.to_vec());
        for i in 0..w0.len() {
            let (mut wp, mut wm) = (w0.clone(), w0.clone());
            wp[i] += h;
            wm[i] -= h;
            let num = (eval(wp, b0.clone()) - eval(wm, b0.clone())) / (2.0 * h);
            let got = g[0].data()[i];
            assert!((num - got).abs() / num.abs().max(1.0) < 1e-3, "w[{i}]: {num} vs {got}");
        }
        for i in 0..b0.len() {
            let (mut bp, mut bm) = (b0.clone(), b0.clone());
            bp[i] += h;
            bm[i] -= h;
            let num = (eval(w0.clone(), bp) - eval(w0.clone(), bm)) / (2.0 * h);
            assert!((num - g[1].data()[i]).abs() / num.abs().max(1.0) < 1e-3);
        }
    }

    #[test]
    fn disabled_terms_build_no_second_order_graph() {
        let m = linear(1, 12, 3);
        let x = images(2, 2, [3, 2, 2]);
        let before = GraphStats::current();
        assert_eq!(gradnorm_term(&m, &x, &[0, 1], 0.0, Mode::Eval).unwrap().item().unwrap(), 0.0);
        assert_eq!(
            gradalign_term(&m, &x, &[0, 1], 0.1, 0.0, 3, None, Mode::Eval).unwrap().item().unwrap(),
            0.0
        );
        assert_eq!(GraphStats::current().since(before).higher_order_nodes, 0);
        let before = GraphStats::current();
        gradnorm_term(&m, &x, &[0, 1], 1.0, Mode::Eval).unwrap();
        assert!(GraphStats::current().since(before).higher_order_nodes > 0);
    }

    #[test]
    fn gradalign_zero_noise_is_exactly_zero() {
        let m = linear(3, 12, 3);
        let x = images(4, 6, [3, 2, 2]);
        let y = [0, 1, 2, 0, 1, 2];
        let t = gradalign_term_with_noise(&m, &x, &y, &x.zeros_like(), 2.0, None, Mode::Eval).unwrap();
        assert_eq!(t.item().unwrap(), 0.0);
    }

    #[test]
    fn gradalign_matches_closed_form_and_range() {
        let m = linear(9, 12, 3);
        let x = images(10, 6, [3, 2, 2]);
        let y = [0, 1, 2, 2, 1, 0];
        let lambda = 1.5;
        for seed in 0..5 {
            let eta = images(seed + 100, 6, [3, 2, 2]).map(|v| (v - 0.5) * 0.5);
            let t = gradalign_term_with_noise(&m, &x, &y, &eta, lambda, None, Mode::Eval)
                .unwrap()
                .item()
                .unwrap();
            let mut expect = 0.0;
            for i in 0..6 {
                let xi = &x.data()[i * 12..(i + 1) * 12];
                let xe: Vec<f64> = xi.iter().zip(&eta.data()[i * 12..(i + 1) * 12]).map(|(a, b)| a + b).collect();
                let g1 = linear_input_grad(&m, xi, y[i]);
                let g2 = linear_input_grad(&m, &xe, y[i]);
                let dot: f64 = g1.iter().zip(&g2).map(|(a, b)| a * b).sum();
                expect += 1.0 - dot / (norm(&g1) * norm(&g2));
            }
            expect *= lambda / 6.0;
            assert!((t - expect).abs() < 1e-6, "{t} vs {expect}");
            assert!((0.0..=2.0 * lambda).contains(&t));
        }
    }

    #[test]
    fn gradalign_counts_zero_gradient_examples_as_zero() {
        // A zero weight matrix makes every input gradient vanish.
        let m = LinearSoftmax::new(vec![0.0; 12 * 2], vec![0.0, 0.0], 12).unwrap();
        let x = images(1, 3, [3, 2, 2]);
        let eta = x.map(|_| 0.01);
        let t = gradalign_term_with_noise(&m, &x, &[0, 1, 0], &eta, 1.0, None, Mode::Eval).unwrap();
        assert_eq!(t.item().unwrap(), 0.0);
    }

    fn small_model(seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            input_shape: [3, 8, 8],
            widths: Some(vec![4, 4, 4]),
            first_conv_stride: 2,
            ..ModelConfig::default()
        };
        Model::build(&cfg, seed).unwrap()
    }

    #[test]
    fn weightnorm_touches_only_the_stem() {
        let m = small_model(3);
        let delta = images(5, 2, [3, 8, 8]).map(|v| (v - 0.5) * 0.06).into_leaf();
        let t = weightnorm_term(&m, &delta, 9.0).unwrap();
        let mut inputs = m.trainable();
        inputs.push(&delta);
        let g = grad(&t, &inputs, GradOptions::default().allow_unused()).unwrap();
        let stem_id = m.param("stem.weight").unwrap().node_id();
        for (p, gp) in inputs.iter().zip(&g) {
            if p.node_id() == stem_id {
                assert!(gp.max_abs() > 0.0);
            } else {
                assert!(gp.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn weightnorm_is_feature_difference() {
        let m = small_model(4);
        let x = images(6, 2, [3, 8, 8]);
        let delta = Tensor::zeros(&[2, 3, 8, 8]);
        assert_eq!(weightnorm_term(&m, &delta, 9.0).unwrap().item().unwrap(), 0.0);

        let delta = images(7, 2, [3, 8, 8]).map(|v| (v - 0.5) * 0.06);
        let t = weightnorm_term(&m, &delta, 9.0).unwrap().item().unwrap();
        let w = m.param("stem.weight").unwrap();
        let f = |z: &Tensor<f64>| conv2d(z, w, None, 2, 1).unwrap();
        let diff = f(&x.add(&delta).unwrap()).sub(&f(&x)).unwrap();
        let expect = 9.0 * diff.data().iter().map(|v| v.abs()).sum::<f64>() / diff.numel() as f64;
        assert!((t - expect).abs() < 1e-12 * expect.max(1.0));
        assert!(weightnorm_term(&linear(0, 4, 2), &delta, 1.0).is_err());
    }
}
