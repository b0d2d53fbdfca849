use std::collections::HashMap;

use rand::Rng as _;

use super::{Arch, Classifier, Mode, ModelConfig, Parameter, Stem};
use crate::autodiff::{
    adaptive_avg_pool2d, batch_norm_eval, batch_norm_train, conv2d, conv2d_output_size, global_avg_pool,
    Element, Tensor, UnaryKind,
};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, Rng};

pub const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv),
    Bn(Bn),
    Act,
    PreAct {
        bn1: Bn,
        conv1: Conv,
        bn2: Bn,
        conv2: Conv,
        shortcut: Option<Conv>,
    },
    AdaptivePool(usize, usize),
    GlobalPool,
    Linear { w: usize, b: usize },
}

/// Batch statistics to fold into one batch-norm layer's running averages.
#[derive(Debug, Clone)]
pub struct BnUpdate<F: Element> {
    mean_param: usize,
    var_param: usize,
    mean: Vec<F>,
    var: Vec<F>,
}

pub struct Forward<F: Element> {
    pub logits: Tensor<F>,
    /// Empty in eval mode.
    pub bn_updates: Vec<BnUpdate<F>>,
}

/// A realised network: named parameters plus a layer program.
#[derive(Debug, Clone)]
pub struct Model<F: Element> {
    config: ModelConfig,
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
    layers: Vec<Layer>,
    act: UnaryKind,
    stem: Conv,
    feature_shape: [usize; 3],
}

struct Builder<F: Element> {
    params: Vec<Parameter<F>>,
    rng: Rng,
}

impl<F: Element> Builder<F> {
    fn push(&mut self, name: String, tensor: Tensor<F>, trainable: bool) -> usize {
        let tensor = if trainable { tensor.into_leaf() } else { tensor };
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        self.params.len() - 1
    }

    fn uniform(&mut self, n: usize, bound: f64) -> Vec<F> {
        (0..n).map(|_| F::cst(self.rng.random_range(-bound..=bound))).collect()
    }

    /// Bias-free convolution with fan-in scaled uniform init.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let v = self.uniform(cout * cin * k * k, (6.0 / fan_in).sqrt());
        let w = self.push(
            format!("{name}.weight"),
            Tensor::raw(v, vec![cout, cin, k, k]),
            true,
        );
        Conv { w, stride, pad }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        Bn {
            gamma: self.push(format!("{name}.weight"), Tensor::ones(&[c]), true),
            beta: self.push(format!("{name}.bias"), Tensor::zeros(&[c]), true),
            mean: self.push(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
            var: self.push(format!("{name}.running_var"), Tensor::ones(&[c]), false),
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, out: usize) -> Layer {
        let v = self.uniform(fan_in * out, 1.0 / (fan_in as f64).sqrt());
        Layer::Linear {
            w: self.push(format!("{name}.weight"), Tensor::raw(v, vec![fan_in, out]), true),
            b: self.push(format!("{name}.bias"), Tensor::zeros(&[out]), true),
        }
    }
}

fn spatial(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    match (
        conv2d_output_size(h, k, stride, pad),
        conv2d_output_size(w, k, stride, pad),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => Some((a, b)),
        _ => None,
    }
}

struct Plan {
    stem_k: usize,
    stem_pad: usize,
    stage_strides: Vec<usize>,
    /// Final pooling target when stride reduction alone cannot match.
    pool_to: Option<(usize, usize)>,
    feature_hw: (usize, usize),
}

/// Choose stage strides so the final feature map matches the stride-1 network.
fn plan(cfg: &ModelConfig) -> Result<Plan> {
    let [_, h, w] = cfg.input_shape;
    let defaults: Vec<usize> = match cfg.arch {
        Arch::SmallCnn | Arch::PatchifyStemNet => vec![2, 2],
        Arch::PreactResnetLite => vec![1, 2, 2],
    };
    let (stem_k, stem_pad) = match cfg.arch {
        Arch::PatchifyStemNet => (cfg.first_conv_stride, 0),
        _ => (3, 1),
    };
    let too_small = || Error::config(format!("input {h}x{w} is too small for this architecture"));
    let run = |stem_stride: usize, stem_k: usize, stem_pad: usize, strides: &[usize]| {
        let mut hw = spatial(h, w, stem_k, stem_stride, stem_pad)?;
        for &s in strides {
            hw = spatial(hw.0, hw.1, 3, s, 1)?;
        }
        Some(hw)
    };
    let reference_k = if cfg.arch == Arch::PatchifyStemNet { 1 } else { 3 };
    let target = run(1, reference_k, stem_pad, &defaults).ok_or_else(too_small)?;

    let s = cfg.first_conv_stride;
    let mut strides = defaults.clone();
    let mut got = run(s, stem_k, stem_pad, &strides).ok_or_else(too_small)?;
    if got != target {
        let start = cfg
            .compensation_stage
            .unwrap_or_else(|| defaults.iter().position(|&d| d == 2).expect("a downsampling stage"));
        if start >= strides.len() || strides[start] == 1 {
            return Err(Error::config(format!(
                "compensation_stage {start} is not a downsampling stage (stage strides {defaults:?})"
            )));
        }
        for i in start..strides.len() {
            if got.0 >= target.0 && got.1 >= target.1 {
                break;
            }
            if strides[i] > 1 {
                strides[i] = 1;
                got = run(s, stem_k, stem_pad, &strides).ok_or_else(too_small)?;
            }
        }
    }
    if got.0 < target.0 || got.1 < target.1 {
        return Err(Error::config(format!(
            "first_conv_stride {s} with compensation_stage {:?} yields a {}x{} feature map, expected {}x{}",
            cfg.compensation_stage, got.0, got.1, target.0, target.1
        )));
    }
    let pool_to = (got != target).then_some(target);
    Ok(Plan {
        stem_k,
        stem_pad,
        stage_strides: strides,
        pool_to,
        feature_hw: target,
    })
}

impl<F: Element> Model<F> {
    /// Build and initialise a network; the same seed gives identical weights.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let p = plan(config)?;
        let widths = config.resolved_widths();
        let [cin, _, _] = config.input_shape;
        let mut b = Builder {
            params: Vec::new(),
            rng: derive_rng(seed, "init", 0),
        };
        let mut layers = Vec::new();
        let stem = b.conv("stem", cin, widths[0], p.stem_k, config.first_conv_stride, p.stem_pad);
        layers.push(Layer::Conv(stem));
        let final_c = match config.arch {
            Arch::SmallCnn | Arch::PatchifyStemNet => {
                let bn = b.bn("stem.bn", widths[0]);
                layers.extend([Layer::Bn(bn), Layer::Act]);
                for (i, &s) in p.stage_strides.iter().enumerate() {
                    let name = format!("stage{}", i + 1);
                    let conv = b.conv(&format!("{name}.conv"), widths[i], widths[i + 1], 3, s, 1);
                    let bn = b.bn(&format!("{name}.bn"), widths[i + 1]);
                    layers.extend([Layer::Conv(conv), Layer::Bn(bn), Layer::Act]);
                }
                widths[2]
            }
            Arch::PreactResnetLite => {
                let mut c = widths[0];
                for (si, &s) in p.stage_strides.iter().enumerate() {
                    let out = widths[si];
                    for bi in 0..2 {
                        let name = format!("stage{}.block{}", si + 1, bi + 1);
                        let stride = if bi == 0 { s } else { 1 };
                        let bn1 = b.bn(&format!("{name}.bn1"), c);
                        let conv1 = b.conv(&format!("{name}.conv1"), c, out, 3, stride, 1);
                        let bn2 = b.bn(&format!("{name}.bn2"), out);
                        let conv2 = b.conv(&format!("{name}.conv2"), out, out, 3, 1, 1);
                        let shortcut = (stride != 1 || c != out)
                            .then(|| b.conv(&format!("{name}.shortcut"), c, out, 1, stride, 0));
                        layers.push(Layer::PreAct {
                            bn1,
                            conv1,
                            bn2,
                            conv2,
                            shortcut,
                        });
                        c = out;
                    }
                }
                let bn = b.bn("final.bn", c);
                layers.extend([Layer::Bn(bn), Layer::Act]);
                c
            }
        };
        if let Some((ph, pw)) = p.pool_to {
            layers.push(Layer::AdaptivePool(ph, pw));
        }
        layers.push(Layer::GlobalPool);
        layers.push(b.linear("fc", final_c, config.num_classes));

        let index = b
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Model {
            config: config.clone(),
            params: b.params,
            index,
            layers,
            act: config.activation_kind(),
            stem,
            feature_shape: [final_c, p.feature_hw.0, p.feature_hw.1],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    /// Replace a parameter's values; the shape must match.
    pub fn set_param(&mut self, name: &str, values: Vec<F>) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))?;
        let p = &mut self.params[i];
        let t = Tensor::from_vec(values, p.tensor.shape())?;
        p.tensor = if p.trainable { t.into_leaf() } else { t };
        Ok(())
    }

    /// Overwrite every trainable parameter, in [`Classifier::trainable`] order.
    pub fn set_trainable(&mut self, values: Vec<Vec<F>>) -> Result<()> {
        let slots: Vec<usize> = (0..self.params.len()).filter(|&i| self.params[i].trainable).collect();
        if slots.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} values for {} trainable parameters",
                values.len(),
                slots.len()
            )));
        }
        for (i, v) in slots.into_iter().zip(values) {
            let t = Tensor::from_vec(v, self.params[i].tensor.shape())?;
            self.params[i].tensor = t.into_leaf();
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    /// `[C, H, W]` of the map entering global pooling.
    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature_shape
    }

    /// Activation used at each nonlinearity, in forward order.
    pub fn activation_sites(&self) -> Vec<UnaryKind> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Act => vec![self.act],
                Layer::PreAct { .. } => vec![self.act, self.act],
                _ => vec![],
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        if x.ndim() != 4 || x.shape()[1..] != self.config.input_shape || x.dim(0) == 0 {
            return Err(Error::shape(
                "forward",
                format!("input {:?} does not match [N, {:?}]", x.shape(), self.config.input_shape),
            ));
        }
        Ok(())
    }

    fn t(&self, i: usize) -> &Tensor<F> {
        &self.params[i].tensor
    }

    fn conv(&self, x: &Tensor<F>, c: Conv) -> Result<Tensor<F>> {
        conv2d(x, self.t(c.w), None, c.stride, c.pad)
    }

    fn bn(&self, x: &Tensor<F>, b: Bn, mode: Mode, updates: &mut Vec<BnUpdate<F>>) -> Result<Tensor<F>> {
        match mode {
            Mode::Train => {
                let (y, stats) = batch_norm_train(x, self.t(b.gamma), self.t(b.beta), BN_EPS)?;
                updates.push(BnUpdate {
                    mean_param: b.mean,
                    var_param: b.var,
                    mean: stats.mean,
                    var: stats.var_unbiased,
                });
                Ok(y)
            }
            Mode::Eval => batch_norm_eval(x, self.t(b.gamma), self.t(b.beta), self.t(b.mean), self.t(b.var), BN_EPS),
        }
    }

    pub fn forward(&self, x: &Tensor<F>, mode: Mode) -> Result<Forward<F>> {
        self.check_input(x)?;
        let mut updates = Vec::new();
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => self.conv(&h, *c)?,
                Layer::Bn(b) => self.bn(&h, *b, mode, &mut updates)?,
                Layer::Act => h.unary(self.act)?,
                Layer::PreAct {
                    bn1,
                    conv1,
                    bn2,
                    conv2,
                    shortcut,
                } => {
                    let a = self.bn(&h, *bn1, mode, &mut updates)?.unary(self.act)?;
                    let skip = match shortcut {
                        Some(s) => self.conv(&a, *s)?,
                        None => h.clone(),
                    };
                    let o = self.conv(&a, *conv1)?;
                    let o = self.bn(&o, *bn2, mode, &mut updates)?.unary(self.act)?;
                    self.conv(&o, *conv2)?.add(&skip)?
                }
                Layer::AdaptivePool(ph, pw) => adaptive_avg_pool2d(&h, *ph, *pw)?,
                Layer::GlobalPool => global_avg_pool(&h)?,
                Layer::Linear { w, b } => h.matmul(self.t(*w))?.add(self.t(*b))?,
            };
        }
        Ok(Forward {
            logits: h,
            bn_updates: updates,
        })
    }

    /// Fold batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<F>]) {
        let m = F::cst(BN_MOMENTUM);
        let keep = F::one() - m;
        for u in updates {
            for (slot, batch) in [(u.mean_param, &u.mean), (u.var_param, &u.var)] {
                let t = &self.params[slot].tensor;
                let v: Vec<F> = t.data().iter().zip(batch.iter()).map(|(&r, &b)| keep * r + m * b).collect();
                self.params[slot].tensor = Tensor::raw(v, t.shape().to_vec());
            }
        }
    }

    /// Same architecture and values in another precision.
    pub fn cast<G: Element>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    let t = p.tensor.cast::<G>();
                    Parameter {
                        name: p.name.clone(),
                        tensor: if p.trainable { t.into_leaf() } else { t },
                        trainable: p.trainable,
                    }
                })
                .collect(),
            index: self.index.clone(),
            layers: self.layers.clone(),
            act: self.act,
            stem: self.stem,
            feature_shape: self.feature_shape,
        }
    }
}

impl<F: Element> Classifier<F> for Model<F> {
    fn logits(&self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        Ok(self.forward(x, mode)?.logits)
    }

    fn trainable(&self) -> Vec<&Tensor<F>> {
        self.params.iter().filter(|p| p.trainable).map(|p| &p.tensor).collect()
    }

    fn stem(&self) -> Option<Stem<'_, F>> {
        Some(Stem {
            weight: self.t(self.stem.w),
            stride: self.stem.stride,
            pad: self.stem.pad,
        })
    }
}
