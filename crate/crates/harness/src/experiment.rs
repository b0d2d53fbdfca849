use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fastadv::attacks::{AttackFamily, FixedNoiseStore, InitMode};
use fastadv::data::{load_cifar_binary, synth_dataset_with, CifarKind, DatasetHandle, PatternKind, PatternStore, Split, SynthConfig};
use fastadv::nn::save_checkpoint;
use fastadv::rng::derive_seed;
use fastadv::training::{train_with_sidecars, write_records_csv, RunLog, Sidecars, TrainConfig};
use fastadv::tricks::{FixedMaskStore, MaskMode};
use toml::Table;

use crate::config::{train_to_toml, DataSource, DataSpec, ExperimentSpec};
use crate::curves::emit_curves;
use crate::error::{HarnessError, Result};
use crate::summary::{write_summary, SummaryRow};

pub const OUTPUT_ROOT_ENV: &str = "FASTADV_OUTPUT_ROOT";

/// `$FASTADV_OUTPUT_ROOT`, or `runs` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn cifar_path(spec: &DataSpec, var: &str) -> Result<PathBuf> {
    spec.path
        .clone()
        .or_else(|| std::env::var_os(var).map(PathBuf::from))
        .ok_or_else(|| HarnessError::Config(format!("data.path is not set and {var} is empty")))
}

/// Training split and held-out split.
pub fn load_data(spec: &DataSpec) -> Result<(DatasetHandle, DatasetHandle)> {
    let (train, held_out) = match spec.source {
        DataSource::Synthetic => {
            let n = spec.synthetic.n;
            let all = synth_dataset_with(&SynthConfig {
                n: n + spec.synthetic_held_out,
                ..spec.synthetic.clone()
            })?;
            (all.range(0, n)?, all.range(n, all.len())?)
        }
        DataSource::Cifar10 | DataSource::Cifar100 => {
            let (kind, var) = if spec.source == DataSource::Cifar10 {
                (CifarKind::Cifar10, "FASTADV_CIFAR10_DIR")
            } else {
                (CifarKind::Cifar100, "FASTADV_CIFAR100_DIR")
            };
            let path = cifar_path(spec, var)?;
            (load_cifar_binary(&path, kind, Split::Train)?, load_cifar_binary(&path, kind, Split::Test)?)
        }
    };
    let train = match spec.train_subset {
        Some(n) if n < train.len() => train.stratified_n(n)?,
        _ => train,
    };
    if held_out.is_empty() {
        return Err(HarnessError::Config("held-out split is empty".into()));
    }
    Ok((train, held_out))
}

/// Match the model's input and output to the dataset.
pub fn fit_to_data(cfg: &mut TrainConfig, data: &DatasetHandle) -> Result<()> {
    cfg.model.input_shape = data.shape();
    cfg.model.num_classes = data.num_classes();
    cfg.validate()?;
    Ok(())
}

fn sidecars(cfg: &TrainConfig, shape: [usize; 3], dir: Option<&Path>) -> Result<(Sidecars, Vec<(PathBuf, bool)>)> {
    let Some(dir) = dir else {
        return Ok((Sidecars::for_config(cfg, shape)?, Vec::new()));
    };
    std::fs::create_dir_all(dir)?;
    let mut s = Sidecars::default();
    let mut files = Vec::new();
    if cfg.attack.init == InitMode::FixedPerExample && cfg.attack.family != AttackFamily::None {
        let seed = derive_seed(cfg.seed, "fixed-noise", 0);
        let path = dir.join(format!("noise-e{}-{seed:016x}.fadvp", cfg.attack.epsilon));
        let store = PatternStore::open_or_new(&path, PatternKind::Noise { epsilon: cfg.attack.epsilon }, seed, &shape)?;
        s.noise = Some(FixedNoiseStore::from_store(store)?);
        files.push((path, true));
    }
    if cfg.mask.mode == MaskMode::FixedPerExample {
        let seed = derive_seed(cfg.seed, "fixed-mask", 0);
        let path = dir.join(format!("mask-r{}-{seed:016x}.fadvp", cfg.mask.ratio));
        let store = PatternStore::open_or_new(&path, PatternKind::Mask { ratio: cfg.mask.ratio }, seed, &shape[1..])?;
        s.masks = Some(FixedMaskStore::from_store(store)?);
        files.push((path, false));
    }
    Ok((s, files))
}

/// Train one config and write `config.toml`, `runlog.{csv,json}`,
/// `final.ckpt` and `curves/` into `dir`. Fixed patterns are shared through
/// `sidecar_dir` when given.
pub fn run_single(
    cfg: &TrainConfig,
    data: &DatasetHandle,
    held_out: &DatasetHandle,
    dir: &Path,
    sidecar_dir: Option<&Path>,
) -> Result<RunLog> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), train_to_toml(cfg))?;
    let (mut stores, files) = sidecars(cfg, data.shape(), sidecar_dir)?;
    let result = train_with_sidecars::<f32>(cfg, data, held_out, &mut stores)?;
    for (path, is_noise) in files {
        let store = if is_noise {
            stores.noise.as_ref().map(|n| n.store())
        } else {
            stores.masks.as_ref().map(|m| m.store())
        };
        if let Some(s) = store {
            s.save(&path)?;
        }
    }
    write_records_csv(&result.log.records, std::fs::File::create(dir.join("runlog.csv"))?)?;
    std::fs::write(dir.join("runlog.json"), result.log.to_json()?)?;
    save_checkpoint(&result.model, &dir.join("final.ckpt"))?;
    emit_curves(&result.log, &dir.join("curves"))?;
    Ok(result.log)
}

#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub label: String,
    pub repeat: usize,
    pub config: TrainConfig,
    pub dir: PathBuf,
}

/// Resolve and validate every run. Repeat `r` of a label trains with seed
/// `derive_seed(base seed, "repeat", r)`, so labels are paired by seed and
/// adding repeats leaves earlier ones untouched.
pub fn plan(spec: &ExperimentSpec, out: &Path, data: &DatasetHandle, train_over: &Table) -> Result<Vec<PlannedRun>> {
    let mut planned = Vec::new();
    for entry in &spec.runs {
        let mut base = spec.resolve_entry(entry, train_over)?;
        fit_to_data(&mut base, data)?;
        for r in 0..entry.repeats {
            planned.push(PlannedRun {
                label: entry.label.clone(),
                repeat: r,
                config: TrainConfig {
                    seed: derive_seed(base.seed, "repeat", r as u64),
                    ..base.clone()
                },
                dir: out.join(&entry.label).join(format!("repeat-{r}")),
            });
        }
    }
    Ok(planned)
}

#[derive(Debug)]
pub struct RunOutcome {
    pub label: String,
    pub repeat: usize,
    pub result: Result<RunLog>,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub outcomes: Vec<RunOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    /// The most severe failure among the runs, if any.
    pub fn worst_error(&self) -> Option<&HarnessError> {
        let mut worst: Option<&HarnessError> = None;
        for o in &self.outcomes {
            let e = match &o.result {
                Err(e) => e,
                Ok(_) => continue,
            };
            if worst.is_none_or(|w| e.exit_code() > w.exit_code()) {
                worst = Some(e);
            }
        }
        worst
    }
}

/// Run every planned config (up to `spec.workers` at a time), then rebuild
/// the summary from the logs on disk. Failed runs are recorded in
/// `failure.txt` next to where their log would be.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, train_over: &Table) -> Result<ExperimentReport> {
    let (data, held_out) = load_data(&spec.data)?;
    let runs = plan(spec, out, &data, train_over)?;
    std::fs::create_dir_all(out)?;
    let sidecar_dir = out.join("patterns");
    let next = AtomicUsize::new(0);
    let outcomes = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..spec.workers.min(runs.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                log::info!("[{}] repeat {} seed {:#x}", run.label, run.repeat, run.config.seed);
                let result = run_single(&run.config, &data, &held_out, &run.dir, Some(&sidecar_dir)).and_then(|l| {
                    l.check()?;
                    Ok(l)
                });
                if let Err(e) = &result {
                    log::error!("[{}] repeat {}: {e}", run.label, run.repeat);
                    let _ = std::fs::create_dir_all(&run.dir);
                    let _ = std::fs::write(run.dir.join("failure.txt"), format!("{e}\n"));
                }
                outcomes.lock().expect("outcome lock").push((i, RunOutcome {
                    label: run.label.clone(),
                    repeat: run.repeat,
                    result,
                }));
            });
        }
    });
    let mut outcomes = outcomes.into_inner().expect("outcome lock");
    outcomes.sort_by_key(|(i, _)| *i);
    let summary = write_summary(out)?;
    Ok(ExperimentReport {
        outcomes: outcomes.into_iter().map(|(_, o)| o).collect(),
        summary,
    })
}
