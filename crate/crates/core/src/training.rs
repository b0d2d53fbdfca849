//! Adversarial training loop, evaluation and catastrophic-overfitting
//! detection.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    fgsm_from_gradient, input_gradient, run_attack, AttackConfig, AttackFamily, FixedNoiseStore, InitMode,
};
use crate::autodiff::{cross_entropy, grad, no_grad, row_l2_norms, Element, GradOptions, Tensor};
use crate::data::{AugmentSpec, DatasetHandle};
use crate::error::{Error, Result};
use crate::nn::{Classifier, Mode, Model, ModelConfig};
use crate::par;
use crate::rng::{derive_rng, derive_seed};
use crate::tricks::{
    fgsm_mask_attack, gradalign_term, gradnorm_term, random_mask_batch, weightnorm_term, FixedMaskStore, MaskMode,
    MaskSpec, RegularizerConfig,
};

/// Thresholds for [`detect_collapse`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollapseThresholds {
    /// Robust accuracy at or above this before the drop...
    pub robust_from: f64,
    /// ...and at or below this one epoch later.
    pub robust_to: f64,
    /// Epoch-over-epoch growth of the mean input-gradient norm.
    pub spike_ratio: f64,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        CollapseThresholds {
            robust_from: 0.15,
            robust_to: 0.02,
            spike_ratio: 4.0,
        }
    }
}

/// Per-epoch monitoring on a fixed held-out subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub size: usize,
    pub attack: AttackConfig,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            size: 500,
            attack: AttackConfig::pgd_probe(8.0 / 255.0),
            batch_size: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub model: ModelConfig,
    pub attack: AttackConfig,
    pub mask: MaskSpec,
    pub regularizers: RegularizerConfig,
    pub eval_attack: AttackConfig,
    pub eval_repeats: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub augment: AugmentSpec,
    pub probe: ProbeConfig,
    pub collapse: CollapseThresholds,
}

impl Default for TrainConfig {
    /// Desk-scale recipe: 30 epochs with decays at 24 and 27.
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_epochs: vec![24, 27],
            lr_decay_factor: 0.1,
            model: ModelConfig::default(),
            attack: AttackConfig::fgsm(8.0 / 255.0),
            mask: MaskSpec::default(),
            regularizers: RegularizerConfig::default(),
            eval_attack: AttackConfig::pgd_eval(8.0 / 255.0),
            eval_repeats: 3,
            eval_batch_size: 250,
            seed: 0,
            augment: AugmentSpec::default(),
            probe: ProbeConfig::default(),
            collapse: CollapseThresholds::default(),
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 110 epochs, decays at 100 and 105.
    pub fn full_schedule() -> Self {
        TrainConfig {
            epochs: 110,
            lr_decay_epochs: vec![100, 105],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 (batch norm needs a batch)"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::config(format!("lr_decay_factor must be > 0, got {}", self.lr_decay_factor)));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lr_decay_epochs must be strictly increasing"));
        }
        if self.lr_decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::config("lr_decay_epochs must be below epochs"));
        }
        if self.eval_repeats == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("eval_repeats and eval_batch_size must be at least 1"));
        }
        if self.probe.size == 0 || self.probe.batch_size == 0 {
            return Err(Error::config("probe size and batch_size must be at least 1"));
        }
        self.model.validate()?;
        self.attack.validate()?;
        self.eval_attack.validate()?;
        self.probe.attack.validate()?;
        self.mask.validate()?;
        self.regularizers.validate()?;
        if self.mask.is_on() && self.attack.family != AttackFamily::Fgsm {
            return Err(Error::config("masking is defined on top of the fgsm attack"));
        }
        if self.regularizers.gradalign_lambda > 0.0 && self.attack.family == AttackFamily::None {
            return Err(Error::config("gradalign needs an attack epsilon"));
        }
        let c = &self.collapse;
        if !(c.robust_to < c.robust_from && c.spike_ratio > 1.0) {
            return Err(Error::config("collapse thresholds need robust_to < robust_from and spike_ratio > 1"));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based.
    pub epoch: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub mean_input_grad_norm: f64,
    pub loss_main: f64,
    pub loss_reg: f64,
    /// Seconds spent in training steps, monitoring excluded.
    pub wall_clock_s: f64,
    pub collapse_flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseTrigger {
    RobustDrop,
    GradnormSpike,
    Both,
}

/// `pre_value`/`post_value` are robust accuracies for `robust_drop` and
/// `both`, mean input-gradient norms for `gradnorm_spike`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseEvent {
    pub epoch: usize,
    pub trigger: CollapseTrigger,
    pub pre_value: f64,
    pub post_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub clean_acc: f64,
    pub robust_mean: f64,
    /// Population variance over repeats.
    pub robust_var: f64,
    pub robust_runs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub epoch: usize,
    pub batch: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    pub events: Vec<CollapseEvent>,
    pub final_eval: Option<EvalResult>,
    pub divergence: Option<DivergenceRecord>,
}

pub const RUNLOG_CSV_HEADER: [&str; 8] = [
    "epoch",
    "clean_acc",
    "robust_acc",
    "grad_norm",
    "loss_main",
    "loss_reg",
    "wall_clock_s",
    "collapse",
];

impl RunLog {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        write_records_csv(&self.records, out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Copy with every wall-clock field zeroed, for comparing runs.
    pub fn without_timing(&self) -> RunLog {
        let mut r = self.clone();
        for e in &mut r.records {
            e.wall_clock_s = 0.0;
        }
        r
    }

    /// `Err(Divergence)` if the run aborted.
    pub fn check(&self) -> Result<()> {
        match &self.divergence {
            Some(d) => Err(Error::Divergence {
                epoch: d.epoch,
                batch: d.batch,
                reason: d.reason.clone(),
            }),
            None => Ok(()),
        }
    }
}

pub fn write_records_csv(records: &[EpochRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUNLOG_CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.clean_acc.to_string(),
            r.robust_acc.to_string(),
            r.mean_input_grad_norm.to_string(),
            r.loss_main.to_string(),
            r.loss_reg.to_string(),
            r.wall_clock_s.to_string(),
            (r.collapse_flag as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(input: impl Read) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RUNLOG_CSV_HEADER {
        return Err(Error::Format(format!("unexpected run log header {header:?}")));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let flag = match &row[7] {
            "0" => false,
            "1" => true,
            s => return Err(Error::Format(format!("bad collapse flag {s:?}"))),
        };
        out.push(EpochRecord {
            epoch: row[0].parse().map_err(|_| Error::Format(format!("bad epoch {:?}", &row[0])))?,
            clean_acc: num(&row[1])?,
            robust_acc: num(&row[2])?,
            mean_input_grad_norm: num(&row[3])?,
            loss_main: num(&row[4])?,
            loss_reg: num(&row[5])?,
            wall_clock_s: num(&row[6])?,
            collapse_flag: flag,
        });
    }
    Ok(out)
}

/// Abrupt collapses in a training history. A robust drop and a gradient
/// spike on the same epoch form one `both` event.
pub fn detect_collapse(history: &[EpochRecord], th: &CollapseThresholds) -> Vec<CollapseEvent> {
    let mut events = Vec::new();
    for w in history.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let drop = a.robust_acc >= th.robust_from && b.robust_acc <= th.robust_to;
        let spike = a.mean_input_grad_norm > 0.0 && b.mean_input_grad_norm / a.mean_input_grad_norm >= th.spike_ratio;
        let event = match (drop, spike) {
            (true, true) => (CollapseTrigger::Both, a.robust_acc, b.robust_acc),
            (true, false) => (CollapseTrigger::RobustDrop, a.robust_acc, b.robust_acc),
            (false, true) => (CollapseTrigger::GradnormSpike, a.mean_input_grad_norm, b.mean_input_grad_norm),
            (false, false) => continue,
        };
        events.push(CollapseEvent {
            epoch: b.epoch,
            trigger: event.0,
            pre_value: event.1,
            post_value: event.2,
        });
    }
    events
}

/// One SGD step with coupled weight decay:
/// `v = momentum * v + (g + wd * p)`, `p = p - lr * v`.
pub fn sgd_step<F: Element>(
    params: &mut [Vec<F>],
    grads: &[Vec<F>],
    velocity: &mut [Vec<F>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid("sgd: parameter, gradient and velocity counts differ"));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::shape("sgd_step", format!("{} params, {} grads, {} velocity", p.len(), g.len(), v.len())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("sgd_step gradient"));
        }
    }
    let (lr, mu, wd) = (F::cst(lr), F::cst(momentum), F::cst(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + (gi + wd * *pi);
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

fn argmax<F: Element>(row: &[F]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn correct<F: Element, M: Classifier<F> + ?Sized>(model: &M, x: &Tensor<F>, y: &[usize]) -> Result<Vec<bool>> {
    let logits = no_grad(|| model.logits(x, Mode::Eval))?;
    let c = logits.dim(1);
    Ok(y
        .iter()
        .enumerate()
        .map(|(i, &label)| argmax(&logits.data()[i * c..(i + 1) * c]) == label)
        .collect())
}

fn batches(len: usize, batch_size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..len).step_by(batch_size.max(1)).map(move |s| (s..(s + batch_size).min(len)).collect())
}

/// Clean accuracy and, for each seed, the fraction of examples classified
/// correctly both at `x` and at the attacked input.
fn accuracies<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    data: &DatasetHandle,
    attack: &AttackConfig,
    seeds: &[u64],
    batch_size: usize,
) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut clean = 0usize;
    let mut robust = vec![0usize; seeds.len()];
    for (b, pos) in batches(data.len(), batch_size).enumerate() {
        let batch = data.batch::<F>(&pos, None)?;
        let ok = correct(model, &batch.images, &batch.labels)?;
        clean += ok.iter().filter(|&&c| c).count();
        let per_seed = par::try_map_indexed(seeds.len(), |r| -> Result<usize> {
            if attack.family == AttackFamily::None {
                return Ok(ok.iter().filter(|&&c| c).count());
            }
            let mut noise = match attack.init {
                InitMode::FixedPerExample => Some(FixedNoiseStore::new(
                    attack.epsilon,
                    derive_seed(seeds[r], "fixed-noise", 0),
                    data.shape(),
                )?),
                _ => None,
            };
            let delta = run_attack(
                model,
                &batch.images,
                &batch.labels,
                &batch.indices,
                attack,
                noise.as_mut(),
                derive_seed(seeds[r], "batch", b as u64),
                Mode::Eval,
            )?;
            let adv = no_grad(|| batch.images.add(&delta))?;
            let still = correct(model, &adv, &batch.labels)?;
            Ok(ok.iter().zip(&still).filter(|(&a, &b)| a && b).count())
        })?;
        for (acc, n) in robust.iter_mut().zip(per_seed) {
            *acc += n;
        }
    }
    let n = data.len() as f64;
    Ok((clean as f64 / n, robust.into_iter().map(|c| c as f64 / n).collect()))
}

/// Clean accuracy once, robust accuracy `repeats` times with independent
/// attack seeds. An example counts as robust only if it is also classified
/// correctly without attack, so `robust <= clean` always holds.
pub fn evaluate<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    data: &DatasetHandle,
    attack: &AttackConfig,
    repeats: usize,
    seed: u64,
    batch_size: usize,
) -> Result<EvalResult> {
    if repeats == 0 {
        return Err(Error::invalid("evaluate needs repeats >= 1"));
    }
    attack.validate()?;
    let seeds: Vec<u64> = (0..repeats).map(|r| derive_seed(seed, "eval-repeat", r as u64)).collect();
    let (clean_acc, runs) = accuracies(model, data, attack, &seeds, batch_size)?;
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    let var = runs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / runs.len() as f64;
    Ok(EvalResult {
        clean_acc,
        robust_mean: mean,
        robust_var: var,
        robust_runs: runs,
    })
}

/// Mean over examples of `||grad_x CE(f(x_i), y_i)||_2` at clean inputs.
pub fn mean_input_grad_norm<F: Element, M: Classifier<F> + ?Sized>(
    model: &M,
    data: &DatasetHandle,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for pos in batches(data.len(), batch_size) {
        let batch = data.batch::<F>(&pos, None)?;
        let g = input_gradient(model, &batch.images, &batch.labels, Mode::Eval)?;
        let n = batch.labels.len();
        let norms = no_grad(|| row_l2_norms(&g.reshape(&[n, g.numel() / n])?))?;
        total += norms.data().iter().map(|v| v.as_f64()).sum::<f64>();
    }
    Ok(total / data.len().max(1) as f64)
}

/// Pattern stores a run may need; they are keyed by example index.
#[derive(Debug, Default)]
pub struct Sidecars {
    pub noise: Option<FixedNoiseStore>,
    pub masks: Option<FixedMaskStore>,
}

impl Sidecars {
    /// In-memory stores seeded from the run seed.
    pub fn for_config(config: &TrainConfig, shape: [usize; 3]) -> Result<Self> {
        let noise = if config.attack.init == InitMode::FixedPerExample && config.attack.family != AttackFamily::None {
            Some(FixedNoiseStore::new(
                config.attack.epsilon,
                derive_seed(config.seed, "fixed-noise", 0),
                shape,
            )?)
        } else {
            None
        };
        let masks = if config.mask.mode == MaskMode::FixedPerExample {
            Some(FixedMaskStore::new(
                config.mask.ratio,
                derive_seed(config.seed, "fixed-mask", 0),
                shape[1],
                shape[2],
            )?)
        } else {
            None
        };
        Ok(Sidecars { noise, masks })
    }
}

pub struct TrainResult<F: Element> {
    pub log: RunLog,
    /// Parameters after the last completed step.
    pub model: Model<F>,
}

struct StepOutcome {
    loss_main: f64,
    loss_reg: f64,
}

/// Attack, forward, regularisers, backward and update for one batch.
/// Batch-norm running statistics only follow the main forward pass.
#[allow(clippy::too_many_arguments)]
fn train_step<F: Element>(
    model: &mut Model<F>,
    velocity: &mut [Vec<F>],
    cfg: &TrainConfig,
    x: &Tensor<F>,
    y: &[usize],
    indices: &[usize],
    sidecars: &mut Sidecars,
    lr: f64,
    seed: u64,
) -> Result<StepOutcome> {
    let eps = cfg.attack.epsilon;
    let regs = &cfg.regularizers;
    let mut clean_grad = None;
    let (x_train, delta) = if cfg.mask.is_on() {
        let mask = match cfg.mask.mode {
            MaskMode::FixedPerExample => sidecars
                .masks
                .as_mut()
                .ok_or_else(|| Error::config("fixed masks need a mask store"))?
                .batch::<F>(indices)?,
            _ => random_mask_batch::<F>(x.dim(0), x.dim(2), x.dim(3), cfg.mask.ratio, derive_seed(seed, "mask", 0))?,
        };
        let step = cfg.mask.step_size.unwrap_or(eps);
        let adv = fgsm_mask_attack(&*model, x, y, eps, step, &mask, cfg.attack.clamp_pixel_box, Mode::Train)?;
        let xt = if cfg.mask.train_on_masked {
            adv.x_adv()?
        } else {
            no_grad(|| x.add(&adv.delta))?
        };
        (xt, adv.delta)
    } else if cfg.attack.family == AttackFamily::Fgsm {
        // Keep the clean gradient: GradAlign reuses it.
        let g = input_gradient(&*model, x, y, Mode::Train)?;
        let d = fgsm_from_gradient(x, &g, eps, cfg.attack.clamp_pixel_box)?;
        clean_grad = Some(g);
        (no_grad(|| x.add(&d))?, d)
    } else {
        let d = run_attack(
            &*model,
            x,
            y,
            indices,
            &cfg.attack,
            sidecars.noise.as_mut(),
            derive_seed(seed, "attack", 0),
            Mode::Train,
        )?;
        (no_grad(|| x.add(&d))?, d)
    };

    let fwd = model.forward(&x_train, Mode::Train)?;
    let main = cross_entropy(&fwd.logits, y)?;
    let mut terms = Vec::new();
    if regs.gradnorm_beta > 0.0 {
        terms.push(gradnorm_term(&*model, x, y, regs.gradnorm_beta, Mode::Train)?);
    }
    if regs.weightnorm_lambda > 0.0 {
        terms.push(weightnorm_term(&*model, &delta, regs.weightnorm_lambda)?);
    }
    if regs.gradalign_lambda > 0.0 {
        terms.push(gradalign_term(
            &*model,
            x,
            y,
            eps,
            regs.gradalign_lambda,
            derive_seed(seed, "gradalign", 0),
            clean_grad.as_ref(),
            Mode::Train,
        )?);
    }
    let mut total = main.clone();
    let mut loss_reg = 0.0;
    for t in &terms {
        loss_reg += t.item()?.as_f64();
        total = total.add(t)?;
    }
    let loss_main = main.item()?.as_f64();
    if !(loss_main.is_finite() && loss_reg.is_finite()) {
        return Err(Error::NonFinite("training loss"));
    }
    let grads: Vec<Vec<F>> = grad(&total, &model.trainable(), GradOptions::default().allow_unused())?
        .into_iter()
        .map(|g| g.to_vec())
        .collect();
    let mut params: Vec<Vec<F>> = model.trainable().iter().map(|t| t.to_vec()).collect();
    sgd_step(&mut params, &grads, velocity, lr, cfg.momentum, cfg.weight_decay)?;
    model.set_trainable(params)?;
    model.apply_bn_updates(&fwd.bn_updates);
    Ok(StepOutcome { loss_main, loss_reg })
}

/// Train a fresh model from `config`, monitoring on `probe` after every
/// epoch and evaluating with `eval_attack` at the end.
pub fn train<F: Element>(config: &TrainConfig, data: &DatasetHandle, probe: &DatasetHandle) -> Result<TrainResult<F>> {
    let mut sidecars = Sidecars::for_config(config, data.shape())?;
    train_with_sidecars(config, data, probe, &mut sidecars)
}

/// As [`train`], with caller-owned fixed-pattern stores (for example ones
/// loaded from disk and shared between runs).
pub fn train_with_sidecars<F: Element>(
    config: &TrainConfig,
    data: &DatasetHandle,
    probe: &DatasetHandle,
    sidecars: &mut Sidecars,
) -> Result<TrainResult<F>> {
    config.validate()?;
    if data.shape() != config.model.input_shape || probe.shape() != config.model.input_shape {
        return Err(Error::config(format!(
            "dataset images {:?} do not match model input {:?}",
            data.shape(),
            config.model.input_shape
        )));
    }
    if data.num_classes() > config.model.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model outputs {}",
            data.num_classes(),
            config.model.num_classes
        )));
    }
    if data.len() < 2 || probe.is_empty() {
        return Err(Error::config("need at least 2 training examples and a non-empty probe set"));
    }
    let probe = if probe.len() > config.probe.size {
        probe.stratified_n(config.probe.size)?
    } else {
        probe.clone()
    };

    let mut model = Model::<F>::build(&config.model, derive_seed(config.seed, "init", 0))?;
    let mut velocity: Vec<Vec<F>> = model.trainable().iter().map(|t| vec![F::zero(); t.numel()]).collect();
    let mut log = RunLog {
        config: config.clone(),
        records: Vec::new(),
        events: Vec::new(),
        final_eval: None,
        divergence: None,
    };

    'epochs: for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let epoch_seed = derive_seed(config.seed, "epoch", epoch as u64);
        let order = data.epoch_order(config.seed, epoch);
        let (mut sum_main, mut sum_reg, mut steps) = (0.0, 0.0, 0usize);
        let start = Instant::now();
        for (b, pos) in order.chunks(config.batch_size).enumerate() {
            // A single leftover example cannot be batch-normalised.
            if pos.len() < 2 {
                continue;
            }
            let batch_seed = derive_seed(epoch_seed, "batch", b as u64);
            let mut aug_rng = derive_rng(batch_seed, "augment", 0);
            let batch = data.batch::<F>(pos, Some((&config.augment, &mut aug_rng)))?;
            match train_step(
                &mut model,
                &mut velocity,
                config,
                &batch.images,
                &batch.labels,
                &batch.indices,
                sidecars,
                lr,
                batch_seed,
            ) {
                Ok(s) => {
                    sum_main += s.loss_main;
                    sum_reg += s.loss_reg;
                    steps += 1;
                }
                Err(Error::NonFinite(what)) => {
                    log::warn!("epoch {epoch} batch {b}: non-finite value in {what}, aborting");
                    log.divergence = Some(DivergenceRecord {
                        epoch,
                        batch: b,
                        reason: format!("non-finite value in {what}"),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let wall_clock_s = start.elapsed().as_secs_f64();

        let probe_seed = derive_seed(epoch_seed, "probe", 0);
        let (clean_acc, robust) = accuracies(&model, &probe, &config.probe.attack, &[probe_seed], config.probe.batch_size)?;
        let grad_norm = mean_input_grad_norm(&model, &probe, config.probe.batch_size)?;
        log.records.push(EpochRecord {
            epoch,
            clean_acc,
            robust_acc: robust[0],
            mean_input_grad_norm: grad_norm,
            loss_main: sum_main / steps.max(1) as f64,
            loss_reg: sum_reg / steps.max(1) as f64,
            wall_clock_s,
            collapse_flag: false,
        });
        log::info!(
            "epoch {epoch}: lr {lr:.4} loss {:.4} reg {:.4} clean {clean_acc:.3} robust {:.3} grad-norm {grad_norm:.4} ({wall_clock_s:.1}s)",
            sum_main / steps.max(1) as f64,
            sum_reg / steps.max(1) as f64,
            robust[0]
        );
    }

    log.events = detect_collapse(&log.records, &config.collapse);
    for e in &log.events {
        if let Some(r) = log.records.iter_mut().find(|r| r.epoch == e.epoch) {
            r.collapse_flag = true;
        }
    }
    if log.divergence.is_none() {
        log.final_eval = Some(evaluate(
            &model,
            &probe,
            &config.eval_attack,
            config.eval_repeats,
            derive_seed(config.seed, "final-eval", 0),
            config.eval_batch_size,
        )?);
    }
    Ok(TrainResult { log, model })
}
