//! Named partial training configs for the single-step recipes and their
//! stabilisers.

use toml::Table;

use crate::error::{HarnessError, Result};

pub const PRESETS: &[(&str, &str)] = &[
    ("fgsm", "FGSM adversarial training from zero init, step = epsilon"),
    ("standard", "no attack: clean training"),
    ("fast-fgsm", "FGSM from uniform random init, step 1.25 epsilon"),
    ("pgd", "PGD-10 adversarial training, step 2/255"),
    ("fgsm-mask", "FGSM on images with 30% of pixels masked, fresh masks per step"),
    ("fgsm-mask-fixed", "FGSM-Mask with one fixed mask per example"),
    ("str2", "stem convolution with stride 2"),
    ("smooth", "parametric softplus activations, alpha = 2"),
    ("str2-smooth", "stride-2 stem combined with softplus alpha = 2"),
    ("weightnorm", "WeightNorm regulariser, lambda = 9"),
    ("gradnorm", "GradNorm regulariser, beta = 0.5"),
    ("gradalign", "GradAlign regulariser, lambda = 0.2"),
];

const BODIES: &[(&str, &str)] = &[
    ("fgsm", ""),
    ("standard", "[attack]\nfamily = \"none\"\n"),
    ("fast-fgsm", "[attack]\nfamily = \"fast_fgsm\"\ninit = \"uniform_random\"\n"),
    (
        "pgd",
        "[attack]\nfamily = \"pgd\"\ninit = \"uniform_random\"\nsteps = 10\nstep_size = \"2/255\"\n",
    ),
    ("fgsm-mask", "[mask]\nratio = 0.3\nmode = \"random_per_step\"\n"),
    ("fgsm-mask-fixed", "[mask]\nratio = 0.3\nmode = \"fixed_per_example\"\n"),
    ("str2", "[model]\nfirst_conv_stride = 2\n"),
    ("smooth", "[model]\nactivation = \"softplus_param\"\nsoftplus_alpha = 2.0\n"),
    (
        "str2-smooth",
        "[model]\nfirst_conv_stride = 2\nactivation = \"softplus_param\"\nsoftplus_alpha = 2.0\n",
    ),
    ("weightnorm", "[regularizers]\nweightnorm_lambda = 9.0\n"),
    ("gradnorm", "[regularizers]\ngradnorm_beta = 0.5\n"),
    ("gradalign", "[regularizers]\ngradalign_lambda = 0.2\n"),
];

pub fn preset(name: &str) -> Result<Table> {
    let body = BODIES.iter().find(|(n, _)| *n == name).map(|(_, b)| *b).ok_or_else(|| {
        let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        HarnessError::Config(format!("unknown preset {name:?}; known: {}", known.join(", ")))
    })?;
    Ok(body.parse().expect("preset bodies are valid TOML"))
}
