//! L-infinity attacks: FGSM, PGD with restarts, and randomly initialised
//! single-step FGSM, plus per-example fixed initial noise.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy_per_example, cross_entropy_sum, enable_grad, grad, no_grad, Element, GradOptions, Tensor};
use crate::data::{PatternKind, PatternStore};
use crate::error::{Error, Result};
use crate::nn::{Classifier, Mode};
use crate::par;
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    FastFgsm,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Zero,
    UniformRandom,
    FixedPerExample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub epsilon: f64,
    /// `None` picks the family default: epsilon for FGSM, 1.25 epsilon for
    /// fast FGSM, 2/255 for PGD.
    pub step_size: Option<f64>,
    pub steps: usize,
    pub restarts: usize,
    pub init: InitMode,
    pub clamp_pixel_box: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::fgsm(8.0 / 255.0)
    }
}

impl AttackConfig {
    pub fn none() -> Self {
        AttackConfig {
            family: AttackFamily::None,
            epsilon: 0.0,
            step_size: None,
            steps: 1,
            restarts: 1,
            init: InitMode::Zero,
            clamp_pixel_box: true,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            family: AttackFamily::Fgsm,
            epsilon,
            ..AttackConfig::none()
        }
    }

    pub fn fast_fgsm(epsilon: f64) -> Self {
        AttackConfig {
            family: AttackFamily::FastFgsm,
            epsilon,
            init: InitMode::UniformRandom,
            ..AttackConfig::none()
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, steps: usize, restarts: usize) -> Self {
        AttackConfig {
            family: AttackFamily::Pgd,
            epsilon,
            step_size: Some(step_size),
            steps,
            restarts,
            init: InitMode::UniformRandom,
            clamp_pixel_box: true,
        }
    }

    /// PGD-50 with 10 restarts and step 2/255.
    pub fn pgd_eval(epsilon: f64) -> Self {
        AttackConfig::pgd(epsilon, 2.0 / 255.0, 50, 10)
    }

    /// PGD-10, single restart: the per-epoch monitoring attack.
    pub fn pgd_probe(epsilon: f64) -> Self {
        AttackConfig::pgd(epsilon, 2.0 / 255.0, 10, 1)
    }

    pub fn resolved_step_size(&self) -> f64 {
        self.step_size.unwrap_or(match self.family {
            AttackFamily::FastFgsm => 1.25 * self.epsilon,
            AttackFamily::Pgd => 2.0 / 255.0,
            AttackFamily::Fgsm | AttackFamily::None => self.epsilon,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == AttackFamily::None {
            return Ok(());
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        let a = self.resolved_step_size();
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::config(format!("step_size must be finite and >= 0, got {a}")));
        }
        if self.restarts == 0 {
            return Err(Error::config("restarts must be at least 1"));
        }
        match self.family {
            AttackFamily::Pgd if self.steps == 0 => Err(Error::config("pgd needs steps >= 1")),
            AttackFamily::Pgd if self.init == InitMode::FixedPerExample && self.restarts > 1 => {
                Err(Error::config("fixed_per_example init allows a single restart"))
            }
            AttackFamily::Fgsm if self.init != InitMode::Zero => Err(Error::config(
                "fgsm starts from zero; use fast_fgsm for a random or fixed start",
            )),
            _ => Ok(()),
        }
    }
}

/// Fixed initial noise per example index, drawn once from U(-eps, eps).
#[derive(Debug, Clone)]
pub struct FixedNoiseStore {
    inner: PatternStore,
}

impl FixedNoiseStore {
    pub fn new(epsilon: f64, seed: u64, image_shape: [usize; 3]) -> Result<Self> {
        Ok(FixedNoiseStore {
            inner: PatternStore::new(PatternKind::Noise { epsilon }, seed, &image_shape)?,
        })
    }

    pub fn from_store(inner: PatternStore) -> Result<Self> {
        match inner.kind() {
            PatternKind::Noise { .. } if inner.shape().len() == 3 => Ok(FixedNoiseStore { inner }),
            k => Err(Error::invalid(format!("{k:?} store cannot supply noise"))),
        }
    }

    pub fn store(&self) -> &PatternStore {
        &self.inner
    }

    /// Noise for a batch, `[N, C, H, W]`, in example order.
    pub fn batch<F: Element>(&mut self, indices: &[usize]) -> Result<Tensor<F>> {
        let shape = self.inner.shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * shape.iter().product::<usize>());
        for &i in indices {
            data.extend(self.inner.get(i).iter().map(|&v| F::cst(f64::from(v))));
        }
        let mut full = vec![indices.len()];
        full.extend(shape);
        Tensor::from_vec(data, &full)
    }
}

/// Clamp `d` into `[-eps, eps]` and, optionally, `x + d` into `[0, 1]`,
/// exactly as evaluated in floating point.
fn project_one<F: Element>(x: F, d: F, eps: F, clamp_box: bool) -> F {
    let mut d = d.max(-eps).min(eps);
    if clamp_box {
        let u = (x + d).max(F::zero()).min(F::one());
        d = (u - x).max(-eps).min(eps);
        while x + d > F::one() || x + d < F::zero() {
            d = d.next_toward_zero();
        }
    }
    d
}

pub(crate) fn project<F: Element>(x: &Tensor<F>, d: &[F], eps: F, clamp_box: bool) -> Tensor<F> {
    let v = x
        .data()
        .iter()
        .zip(d)
        .map(|(&xi, &di)| project_one(xi, di, eps, clamp_box))
        .collect();
    Tensor::from_vec(v, x.shape()).expect("same shape")
}

fn check_batch<F: Element>(x: &Tensor<F>, y: &[usize]) -> Result<()> {
    if x.ndim() == 0 || x.dim(0) != y.len() {
        return Err(Error::shape("attack", format!("input {:?} with {} labels", x.shape(), y.len())));
    }
    Ok(())
}

/// Gradient of the summed cross-entropy with respect to the input.
pub fn input_gradient<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Tensor<F>,
    y: &[usize],
    mode: Mode,
) -> Result<Tensor<F>> {
    enable_grad(|| {
        let x = x.detach().into_leaf();
        let loss = cross_entropy_sum(&model.logits(&x, mode)?, y)?;
        let g = grad(&loss, &[&x], GradOptions::default())?;
        Ok(g.into_iter().next().expect("one gradient"))
    })
}

/// FGSM step from an already computed input gradient.
pub fn fgsm_from_gradient<F: Element>(x: &Tensor<F>, g: &Tensor<F>, epsilon: f64, clamp_pixel_box: bool) -> Result<Tensor<F>> {
    if g.shape() != x.shape() {
        return Err(Error::shape("fgsm", format!("gradient {:?} vs input {:?}", g.shape(), x.shape())));
    }
    let eps = F::cst(epsilon);
    let step: Vec<F> = g.sign().data().iter().map(|&v| eps * v).collect();
    Ok(project(x, &step, eps, clamp_pixel_box))
}

/// `delta = eps * sign(grad_x L)`, kept in the pixel box if requested.
pub fn fgsm<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Tensor<F>,
    y: &[usize],
    epsilon: f64,
    clamp_pixel_box: bool,
    mode: Mode,
) -> Result<Tensor<F>> {
    check_batch(x, y)?;
    fgsm_from_gradient(x, &input_gradient(model, x, y, mode)?, epsilon, clamp_pixel_box)
}

/// Single step from a given start: `delta = clamp(eta + alpha * sign(grad L(x + eta)))`.
#[allow(clippy::too_many_arguments)]
pub fn fast_fgsm<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Tensor<F>,
    y: &[usize],
    epsilon: f64,
    step_size: f64,
    noise: &Tensor<F>,
    clamp_pixel_box: bool,
    mode: Mode,
) -> Result<Tensor<F>> {
    check_batch(x, y)?;
    if noise.shape() != x.shape() {
        return Err(Error::shape("fast_fgsm", format!("noise {:?} vs input {:?}", noise.shape(), x.shape())));
    }
    let eps = F::cst(epsilon);
    if noise.data().iter().any(|v| v.abs() > eps) {
        return Err(Error::invalid("fast_fgsm noise exceeds the epsilon ball"));
    }
    let eta = project(x, noise.data(), eps, clamp_pixel_box);
    let start = no_grad(|| x.add(&eta))?;
    let s = input_gradient(model, &start, y, mode)?.sign();
    let alpha = F::cst(step_size);
    let d: Vec<F> = eta.data().iter().zip(s.data()).map(|(&e, &g)| e + alpha * g).collect();
    Ok(project(x, &d, eps, clamp_pixel_box))
}

/// How a PGD restart is initialised.
#[derive(Debug, Clone, Copy)]
pub enum PgdInit<'a, F: Element> {
    Zero,
    /// Fresh `U(-eps, eps)` per restart from the derived seed.
    Uniform,
    Fixed(&'a Tensor<F>),
}

#[derive(Debug, Clone, Copy)]
pub struct PgdParams {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub restarts: usize,
    pub clamp_pixel_box: bool,
}

fn uniform_noise<F: Element>(shape: &[usize], eps: f64, seed: u64, stream: &str, index: u64) -> Tensor<F> {
    let mut rng = derive_rng(seed, stream, index);
    let n = shape.iter().product();
    let v = (0..n).map(|_| F::cst(eps * rng.random_range(-1.0..=1.0))).collect();
    Tensor::from_vec(v, shape).expect("shape")
}

fn pgd_restart<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Tensor<F>,
    y: &[usize],
    p: &PgdParams,
    init: Tensor<F>,
    mode: Mode,
) -> Result<(Tensor<F>, Vec<F>)> {
    let eps = F::cst(p.epsilon);
    let alpha = F::cst(p.step_size);
    let mut delta = project(x, init.data(), eps, p.clamp_pixel_box);
    for _ in 0..p.steps {
        let s = input_gradient(model, &no_grad(|| x.add(&delta))?, y, mode)?.sign();
        let d: Vec<F> = delta.data().iter().zip(s.data()).map(|(&di, &g)| di + alpha * g).collect();
        delta = project(x, &d, eps, p.clamp_pixel_box);
    }
    let losses = no_grad(|| -> Result<Vec<F>> {
        cross_entropy_per_example(&model.logits(&x.add(&delta)?, mode)?, y)
    })?;
    Ok((delta, losses))
}

/// Projected gradient ascent on the L-infinity ball. Across restarts the
/// perturbation with the highest loss is kept per example; restarts run in
/// parallel with seeds derived from `seed`.
pub fn pgd<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Tensor<F>,
    y: &[usize],
    p: &PgdParams,
    init: PgdInit<'_, F>,
    seed: u64,
    mode: Mode,
) -> Result<Tensor<F>> {
    check_batch(x, y)?;
    if p.restarts == 0 || p.steps == 0 {
        return Err(Error::invalid("pgd needs steps >= 1 and restarts >= 1"));
    }
    if let PgdInit::Fixed(t) = init {
        if t.shape() != x.shape() {
            return Err(Error::shape("pgd", format!("init {:?} vs input {:?}", t.shape(), x.shape())));
        }
    }
    let runs = par::try_map_indexed(p.restarts, |r| {
        let start = match init {
            PgdInit::Zero => x.zeros_like(),
            PgdInit::Uniform => uniform_noise(x.shape(), p.epsilon, seed, "pgd-restart", r as u64),
            PgdInit::Fixed(t) => t.detach(),
        };
        pgd_restart(model, x, y, p, start, mode)
    })?;
    let n = x.dim(0);
    let per = x.numel() / n.max(1);
    let mut best = runs[0].0.to_vec();
    let mut best_loss = runs[0].1.clone();
    for (delta, losses) in &runs[1..] {
        for i in 0..n {
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best[i * per..(i + 1) * per].copy_from_slice(&delta.data()[i * per..(i + 1) * per]);
            }
        }
    }
    Tensor::from_vec(best, x.shape())
}

/// Perturbation for a batch according to `cfg`.
///
/// `indices` are the stable example indices (used by fixed noise);
/// `seed` keys every random draw of this call.
#[allow(clippy::too_many_arguments)]
pub fn run_attack<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Tensor<F>,
    y: &[usize],
    indices: &[usize],
    cfg: &AttackConfig,
    noise: Option<&mut FixedNoiseStore>,
    seed: u64,
    mode: Mode,
) -> Result<Tensor<F>> {
    cfg.validate()?;
    let fixed = |noise: Option<&mut FixedNoiseStore>| -> Result<Tensor<F>> {
        let store = noise.ok_or_else(|| Error::config("fixed_per_example init requires a noise store"))?;
        store.batch(indices)
    };
    match cfg.family {
        AttackFamily::None => Ok(x.zeros_like()),
        AttackFamily::Fgsm => fgsm(model, x, y, cfg.epsilon, cfg.clamp_pixel_box, mode),
        AttackFamily::FastFgsm => {
            let eta = match cfg.init {
                InitMode::Zero => x.zeros_like(),
                InitMode::UniformRandom => uniform_noise(x.shape(), cfg.epsilon, seed, "fast-fgsm", 0),
                InitMode::FixedPerExample => fixed(noise)?,
            };
            let eta = eta.map(|v| v.max(-F::cst(cfg.epsilon)).min(F::cst(cfg.epsilon)));
            fast_fgsm(model, x, y, cfg.epsilon, cfg.resolved_step_size(), &eta, cfg.clamp_pixel_box, mode)
        }
        AttackFamily::Pgd => {
            let p = PgdParams {
                epsilon: cfg.epsilon,
                step_size: cfg.resolved_step_size(),
                steps: cfg.steps,
                restarts: cfg.restarts,
                clamp_pixel_box: cfg.clamp_pixel_box,
            };
            match cfg.init {
                InitMode::Zero => pgd(model, x, y, &p, PgdInit::Zero, seed, mode),
                InitMode::UniformRandom => pgd(model, x, y, &p, PgdInit::Uniform, seed, mode),
                InitMode::FixedPerExample => {
                    let eta = fixed(noise)?.map(|v| v.max(-F::cst(cfg.epsilon)).min(F::cst(cfg.epsilon)));
                    pgd(model, x, y, &p, PgdInit::Fixed(&eta), seed, mode)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LinearSoftmax;
    use rand::SeedableRng;

    fn linear(seed: u64, dim: usize, classes: usize) -> LinearSoftmax<f64> {
        let mut rng = crate::rng::Rng::seed_from_u64(seed);
        let w = (0..dim * classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..classes).map(|_| rng.random_range(-0.1..0.1)).collect();
        LinearSoftmax::new(w, b, dim).unwrap()
    }

    fn images(seed: u64, n: usize, dim: usize) -> Tensor<f64> {
        let mut rng = crate::rng::Rng::seed_from_u64(seed);
        Tensor::from_vec((0..n * dim).map(|_| rng.random::<f64>()).collect(), &[n, 1, 1, dim]).unwrap()
    }

    #[test]
    fn zero_epsilon_gives_zero() {
        let m = linear(0, 6, 3);
        let x = images(1, 4, 6);
        let d = fgsm(&m, &x, &[0, 1, 2, 0], 0.0, true, Mode::Eval).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binary_logistic_sign_pattern() {
        // Two classes with logits (0, w.x): the loss for label 0 rises along +w.
        let w = vec![0.5, -2.0, 1.0, 0.0, 0.0, 0.0, 3.0, -0.25];
        let wt: Vec<f64> = (0..4).flat_map(|i| [w[i], w[i + 4]]).collect();
        let m = LinearSoftmax::new(wt, vec![0.0, 0.0], 4).unwrap();
        let x = Tensor::from_vec(vec![0.5; 4], &[1, 1, 1, 4]).unwrap();
        let eps = 0.1;
        let d = fgsm(&m, &x, &[0], eps, false, Mode::Eval).unwrap();
        let expected: Vec<f64> = (0..4).map(|i| eps * (w[i + 4] - w[i]).signum()).collect();
        assert_eq!(d.to_vec(), expected);
    }

    #[test]
    fn fgsm_equals_one_step_pgd_and_zero_noise_fast_fgsm() {
        let m = linear(3, 8, 4);
        let x = images(4, 5, 8);
        let y = [0, 1, 2, 3, 1];
        let eps = 8.0 / 255.0;
        let a = fgsm(&m, &x, &y, eps, true, Mode::Eval).unwrap();
        let p = PgdParams {
            epsilon: eps,
            step_size: eps,
            steps: 1,
            restarts: 1,
            clamp_pixel_box: true,
        };
        let b = pgd(&m, &x, &y, &p, PgdInit::Zero, 9, Mode::Eval).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        let c = fast_fgsm(&m, &x, &y, eps, eps, &x.zeros_like(), true, Mode::Eval).unwrap();
        assert_eq!(a.to_vec(), c.to_vec());
    }

    #[test]
    fn outputs_stay_in_ball_and_box() {
        let m = linear(5, 16, 3);
        let x = images(6, 8, 16).map(|v| if v < 0.3 { 0.0 } else if v > 0.7 { 1.0 } else { v });
        let y = [0, 1, 2, 0, 1, 2, 0, 1];
        let eps = 8.0 / 255.0;
        for cfg in [
            AttackConfig::fgsm(eps),
            AttackConfig::fast_fgsm(eps),
            AttackConfig::pgd(eps, 2.0 / 255.0, 5, 3),
        ] {
            let d = run_attack(&m, &x, &y, &[0; 8], &cfg, None, 1, Mode::Eval).unwrap();
            for (xi, di) in x.data().iter().zip(d.data()) {
                assert!(di.abs() <= eps);
                assert!((0.0..=1.0).contains(&(xi + di)));
            }
        }
    }

    #[test]
    fn output_is_detached() {
        let m = linear(5, 4, 2);
        let x = images(6, 2, 4).into_leaf();
        let d = fgsm(&m, &x, &[0, 1], 0.1, true, Mode::Eval).unwrap();
        assert!(!d.requires_grad());
    }

    #[test]
    fn pgd_is_at_least_as_strong_as_fgsm() {
        let m = linear(8, 32, 5);
        let x = images(9, 200, 32);
        let y: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let eps = 8.0 / 255.0;
        let df = fgsm(&m, &x, &y, eps, true, Mode::Eval).unwrap();
        let p = PgdParams {
            epsilon: eps,
            step_size: 2.0 / 255.0,
            steps: 10,
            restarts: 1,
            clamp_pixel_box: true,
        };
        let dp = pgd(&m, &x, &y, &p, PgdInit::Uniform, 1, Mode::Eval).unwrap();
        let lf = cross_entropy_per_example(&m.logits(&x.add(&df).unwrap(), Mode::Eval).unwrap(), &y).unwrap();
        let lp = cross_entropy_per_example(&m.logits(&x.add(&dp).unwrap(), Mode::Eval).unwrap(), &y).unwrap();
        let wins = lf.iter().zip(&lp).filter(|(f, p)| p >= f).count();
        assert!(wins as f64 >= 0.95 * 200.0, "{wins}");
    }

    #[test]
    fn more_restarts_never_lower_the_loss() {
        let m = linear(10, 12, 3);
        let x = images(11, 30, 12);
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let mut prev = vec![f64::NEG_INFINITY; 30];
        for r in 1..=4 {
            let p = PgdParams {
                epsilon: 0.1,
                step_size: 0.02,
                steps: 3,
                restarts: r,
                clamp_pixel_box: true,
            };
            let d = pgd(&m, &x, &y, &p, PgdInit::Uniform, 77, Mode::Eval).unwrap();
            let l = cross_entropy_per_example(&m.logits(&x.add(&d).unwrap(), Mode::Eval).unwrap(), &y).unwrap();
            for i in 0..30 {
                assert!(l[i] >= prev[i]);
            }
            prev = l;
        }
    }

    #[test]
    fn fixed_noise_is_stable_across_epochs() {
        let mut store = FixedNoiseStore::new(0.1, 3, [1, 1, 4]).unwrap();
        let a: Tensor<f64> = store.batch(&[5, 2]).unwrap();
        let _: Tensor<f64> = store.batch(&[9]).unwrap();
        let b: Tensor<f64> = store.batch(&[2, 5]).unwrap();
        assert_eq!(&a.data()[..4], &b.data()[4..]);
        assert_eq!(&a.data()[4..], &b.data()[..4]);
    }

    #[test]
    fn fast_fgsm_rejects_noise_outside_ball() {
        let m = linear(1, 4, 2);
        let x = images(1, 1, 4);
        let big = Tensor::full(&[1, 1, 1, 4], 0.5);
        assert!(fast_fgsm(&m, &x, &[0], 0.1, 0.125, &big, true, Mode::Eval).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::pgd(0.1, 0.01, 0, 1).validate().is_err());
        assert!(AttackConfig::pgd(0.1, 0.01, 1, 0).validate().is_err());
        let mut c = AttackConfig::fgsm(-1.0);
        assert!(c.validate().is_err());
        c.epsilon = 0.1;
        c.init = InitMode::UniformRandom;
        assert!(c.validate().is_err());
        assert_eq!(AttackConfig::fast_fgsm(0.1).resolved_step_size(), 0.125);
    }
}
