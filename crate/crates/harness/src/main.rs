use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fastadv::attacks::AttackConfig;
use fastadv::nn::load_checkpoint;
use fastadv::training::{evaluate, read_records_csv, RunLog};
use fastadv_harness::config::{set_path, train_to_toml, RunFile};
use fastadv_harness::experiment::fit_to_data;
use fastadv_harness::presets::PRESETS;
use fastadv_harness::{
    emit_curves, load_data, output_root, parse_real, run_experiment, run_single, write_summary, ExperimentSpec,
    HarnessError, Result,
};
use toml::{Table, Value};

#[derive(Parser)]
#[command(name = "fastadv", version, about = "Single-step adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config and write its log, checkpoint and curves.
    Train {
        #[command(flatten)]
        setup: Setup,
        /// Output directory; defaults to $FASTADV_OUTPUT_ROOT/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        name: String,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        setup: Setup,
    },
    /// Run every config of an experiment file, then summarise.
    Sweep {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the file's worker count.
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        flags: TrainFlags,
        /// Print each resolved run config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Rebuild summary.{csv,md,json} from the logs under a directory.
    Summarize { dir: PathBuf },
    /// Write per-curve CSV files for a run log (runlog.json or runlog.csv).
    Curves {
        runlog: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the named presets.
    Presets,
}

#[derive(Args)]
struct Setup {
    /// TOML file with optional `preset`, `[data]` and `[train]`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    data: DataFlags,
    /// Print the fully resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Default)]
struct DataFlags {
    /// synthetic, cifar10 or cifar100.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    data_path: Option<PathBuf>,
    #[arg(long)]
    train_subset: Option<usize>,
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    /// Comma-separated epochs, e.g. `24,27`.
    #[arg(long)]
    lr_decay_epochs: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training, probe and evaluation epsilon; accepts `8/255`.
    #[arg(long)]
    epsilon: Option<String>,
    /// fgsm, fast_fgsm, pgd or none.
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    step_size: Option<String>,
    #[arg(long)]
    mask_ratio: Option<String>,
    /// off, random_per_step or fixed_per_example.
    #[arg(long)]
    mask_mode: Option<String>,
    /// small_cnn, preact_resnet_lite or patchify_stem_net.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    first_conv_stride: Option<usize>,
    /// relu, gelu, silu, elu or softplus_param.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    softplus_alpha: Option<String>,
    #[arg(long)]
    gradnorm_beta: Option<String>,
    #[arg(long)]
    weightnorm_lambda: Option<String>,
    #[arg(long)]
    gradalign_lambda: Option<String>,
    #[arg(long)]
    eval_repeats: Option<usize>,
    #[arg(long)]
    probe_size: Option<usize>,
}

fn real(flag: &str, s: &str) -> Result<Value> {
    parse_real(s)
        .map(Value::Float)
        .map_err(|e| HarnessError::Config(format!("--{flag}: {e}")))
}

impl TrainFlags {
    fn table(&self) -> Result<Table> {
        let mut t = Table::new();
        let int = |v: usize| Value::Integer(v as i64);
        let s = |v: &String| Value::String(v.clone());
        if let Some(v) = self.epochs {
            set_path(&mut t, "epochs", int(v));
        }
        if let Some(v) = self.batch_size {
            set_path(&mut t, "batch_size", int(v));
        }
        for (flag, path, v) in [
            ("lr", "lr", &self.lr),
            ("momentum", "momentum", &self.momentum),
            ("weight-decay", "weight_decay", &self.weight_decay),
            ("step-size", "attack.step_size", &self.step_size),
            ("mask-ratio", "mask.ratio", &self.mask_ratio),
            ("softplus-alpha", "model.softplus_alpha", &self.softplus_alpha),
            ("gradnorm-beta", "regularizers.gradnorm_beta", &self.gradnorm_beta),
            ("weightnorm-lambda", "regularizers.weightnorm_lambda", &self.weightnorm_lambda),
            ("gradalign-lambda", "regularizers.gradalign_lambda", &self.gradalign_lambda),
        ] {
            if let Some(v) = v {
                set_path(&mut t, path, real(flag, v)?);
            }
        }
        if let Some(v) = &self.lr_decay_epochs {
            let epochs = v
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| {
                    p.trim()
                        .parse::<i64>()
                        .map(Value::Integer)
                        .map_err(|_| HarnessError::Config(format!("--lr-decay-epochs: bad epoch {p:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            set_path(&mut t, "lr_decay_epochs", Value::Array(epochs));
        }
        if let Some(v) = self.seed {
            let seed = i64::try_from(v).map_err(|_| HarnessError::Config("--seed must fit in 63 bits".into()))?;
            set_path(&mut t, "seed", Value::Integer(seed));
        }
        if let Some(v) = &self.epsilon {
            let e = real("epsilon", v)?;
            for p in ["attack.epsilon", "eval_attack.epsilon", "probe.attack.epsilon"] {
                set_path(&mut t, p, e.clone());
            }
        }
        for (path, v) in [
            ("attack.family", &self.attack),
            ("mask.mode", &self.mask_mode),
            ("model.arch", &self.arch),
            ("model.activation", &self.activation),
        ] {
            if let Some(v) = v {
                set_path(&mut t, path, s(v));
            }
        }
        match self.attack.as_deref() {
            Some("fast_fgsm") => set_path(&mut t, "attack.init", Value::String("uniform_random".into())),
            Some("pgd") => {
                // Same as the `pgd` preset unless --step-size says otherwise.
                set_path(&mut t, "attack.init", Value::String("uniform_random".into()));
                set_path(&mut t, "attack.steps", Value::Integer(10));
                if self.step_size.is_none() {
                    set_path(&mut t, "attack.step_size", Value::Float(2.0 / 255.0));
                }
            }
            _ => {}
        }
        if self.mask_ratio.is_some() && self.mask_mode.is_none() {
            set_path(&mut t, "mask.mode", Value::String("random_per_step".into()));
        }
        if let Some(v) = self.first_conv_stride {
            set_path(&mut t, "model.first_conv_stride", int(v));
        }
        if let Some(v) = self.eval_repeats {
            set_path(&mut t, "eval_repeats", int(v));
        }
        if let Some(v) = self.probe_size {
            set_path(&mut t, "probe.size", int(v));
        }
        Ok(t)
    }
}

impl DataFlags {
    fn table(&self) -> Table {
        let mut t = Table::new();
        if let Some(v) = &self.data {
            set_path(&mut t, "source", Value::String(v.clone()));
        }
        if let Some(v) = &self.data_path {
            set_path(&mut t, "path", Value::String(v.display().to_string()));
        }
        if let Some(v) = self.train_subset {
            set_path(&mut t, "train_subset", Value::Integer(v as i64));
        }
        t
    }
}

fn resolve_setup(setup: &Setup) -> Result<(fastadv_harness::DataSpec, fastadv::training::TrainConfig)> {
    let mut file = match &setup.config {
        Some(p) => RunFile::load(p)?,
        None => RunFile::default(),
    };
    if setup.preset.is_some() {
        file.preset = setup.preset.clone();
    }
    file.resolve(&setup.data.table(), &setup.flags.table()?)
}

fn print_resolved(data: &fastadv_harness::DataSpec, train: &fastadv::training::TrainConfig) {
    let mut doc = Table::new();
    doc.insert("data".into(), Value::try_from(data).expect("data spec serialises"));
    doc.insert("train".into(), train_to_toml(train).parse::<Table>().map(Value::Table).expect("valid toml"));
    print!("{}", toml::to_string(&doc).expect("config serialises"));
}

fn cmd_train(setup: &Setup, out: Option<PathBuf>, name: &str) -> Result<()> {
    let (data_spec, mut cfg) = resolve_setup(setup)?;
    if setup.print_config {
        print_resolved(&data_spec, &cfg);
        return Ok(());
    }
    let (data, held_out) = load_data(&data_spec)?;
    fit_to_data(&mut cfg, &data)?;
    let dir = out.unwrap_or_else(|| output_root().join(name));
    let log = run_single(&cfg, &data, &held_out, &dir, Some(&dir.join("patterns")))?;
    if let Some(e) = &log.final_eval {
        println!(
            "clean {:.4}  robust {:.4} ± {:.6}  collapses {}  -> {}",
            e.clean_acc,
            e.robust_mean,
            e.robust_var,
            log.events.len(),
            dir.display()
        );
    }
    log.check()?;
    Ok(())
}

fn cmd_eval(checkpoint: &Path, setup: &Setup) -> Result<()> {
    let (data_spec, cfg) = resolve_setup(setup)?;
    if setup.print_config {
        print_resolved(&data_spec, &cfg);
        return Ok(());
    }
    let model = load_checkpoint::<f32>(checkpoint)?;
    let (_, held_out) = load_data(&data_spec)?;
    let attack: &AttackConfig = &cfg.eval_attack;
    let r = evaluate(&model, &held_out, attack, cfg.eval_repeats, cfg.seed, cfg.eval_batch_size)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn cmd_sweep(spec_path: &Path, out: Option<PathBuf>, workers: Option<usize>, flags: &TrainFlags, print: bool) -> Result<()> {
    let mut spec = ExperimentSpec::load(spec_path)?;
    if let Some(w) = workers {
        spec.workers = w.max(1);
    }
    let over = flags.table()?;
    if print {
        for entry in &spec.runs {
            println!("# run {}", entry.label);
            println!("{}", train_to_toml(&spec.resolve_entry(entry, &over)?));
        }
        return Ok(());
    }
    let out = out
        .or_else(|| spec.output.clone())
        .unwrap_or_else(|| output_root().join(&spec.name));
    let report = run_experiment(&spec, &out, &over)?;
    for row in &report.summary {
        println!(
            "{:<20} runs {:>2}  clean {:.4}  robust {:.4} ± {:.6}  collapses {}  diverged {}",
            row.label, row.runs, row.clean_mean, row.robust_mean, row.robust_var, row.collapse_events, row.diverged
        );
    }
    match report.worst_error() {
        Some(HarnessError::Config(m)) => Err(HarnessError::Config(m.clone())),
        Some(HarnessError::Diverged(m)) => Err(HarnessError::Diverged(m.clone())),
        Some(HarnessError::Runtime(m)) => Err(HarnessError::Runtime(m.clone())),
        None => Ok(()),
    }
}

fn cmd_curves(runlog: &Path, out: &Path) -> Result<()> {
    let log = if runlog.extension().is_some_and(|e| e == "csv") {
        let records = read_records_csv(std::fs::File::open(runlog)?)?;
        let config = runlog
            .with_file_name("runlog.json")
            .exists()
            .then(|| std::fs::read_to_string(runlog.with_file_name("runlog.json")))
            .transpose()?
            .map(|s| RunLog::from_json(&s))
            .transpose()?
            .map(|l| l.config)
            .unwrap_or_default();
        RunLog {
            config,
            records,
            events: Vec::new(),
            final_eval: None,
            divergence: None,
        }
    } else {
        RunLog::from_json(&std::fs::read_to_string(runlog)?)?
    };
    for p in emit_curves(&log, out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { setup, out, name } => cmd_train(&setup, out, &name),
        Command::Eval { checkpoint, setup } => cmd_eval(&checkpoint, &setup),
        Command::Sweep {
            spec,
            out,
            workers,
            flags,
            print_config,
        } => cmd_sweep(&spec, out, workers, &flags, print_config),
        Command::Summarize { dir } => {
            for row in write_summary(&dir)? {
                println!("{}\t{}\t{:.4}\t{:.4}", row.label, row.runs, row.clean_mean, row.robust_mean);
            }
            Ok(())
        }
        Command::Curves { runlog, out } => cmd_curves(&runlog, &out),
        Command::Presets => {
            for (name, what) in PRESETS {
                println!("{name:<16} {what}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
