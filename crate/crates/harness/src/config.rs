//! Layered TOML configuration.
//!
//! A training config is resolved from, in order: built-in defaults, an
//! optional preset, the file's tables, then command-line overrides. Real
//! valued keys accept rational strings such as `"8/255"`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use fastadv::data::SynthConfig;
use fastadv::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{HarnessError, Result};

const REAL_KEYS: &[&str] = &[
    "epsilon",
    "step_size",
    "lr",
    "momentum",
    "weight_decay",
    "lr_decay_factor",
    "ratio",
    "softplus_alpha",
    "gradnorm_beta",
    "weightnorm_lambda",
    "gradalign_lambda",
    "robust_from",
    "robust_to",
    "spike_ratio",
];

/// `"8/255"`, `"0.03"` or `"3e-2"`.
pub fn parse_real(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("not a number: {t:?}"));
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let d = num(b)?;
            if d == 0.0 {
                return Err(format!("zero denominator in {s:?}"));
            }
            num(a)? / d
        }
        None => num(s)?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s:?} is not finite"))
    }
}

fn normalize(table: &mut Table) -> Result<()> {
    for (k, v) in table.iter_mut() {
        match v {
            Value::String(s) if REAL_KEYS.contains(&k.as_str()) => {
                *v = Value::Float(parse_real(s).map_err(|e| HarnessError::Config(format!("{k}: {e}")))?);
            }
            Value::Integer(i) if REAL_KEYS.contains(&k.as_str()) => *v = Value::Float(*i as f64),
            Value::Table(t) => normalize(t)?,
            _ => {}
        }
    }
    Ok(())
}

/// Deep merge: tables merge key by key, anything else replaces.
pub fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Set `a.b.c = value`, creating tables on the way.
pub fn set_path(table: &mut Table, path: &str, value: Value) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut t = table;
    for p in parts {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("path component is a table");
    }
    t.insert(last.to_string(), value);
}

fn defaults_table() -> Table {
    Table::try_from(TrainConfig::default()).expect("defaults serialise")
}

/// Fold layers over the defaults and validate the result.
pub fn resolve_train(layers: &[&Table]) -> Result<TrainConfig> {
    let mut t = defaults_table();
    for l in layers {
        let mut l = (*l).clone();
        normalize(&mut l)?;
        merge(&mut t, &l);
    }
    let cfg: TrainConfig = Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_to_toml(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("train config serialises")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub source: DataSource,
    /// CIFAR directory or file; falls back to `FASTADV_CIFAR10_DIR` /
    /// `FASTADV_CIFAR100_DIR`.
    pub path: Option<PathBuf>,
    /// Stratified subset of the training split.
    pub train_subset: Option<usize>,
    pub synthetic: SynthConfig,
    /// Extra synthetic examples generated as the held-out split.
    pub synthetic_held_out: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            source: DataSource::Synthetic,
            path: None,
            train_subset: None,
            synthetic: SynthConfig::default(),
            synthetic_held_out: 200,
        }
    }
}

fn parse_table(text: &str, origin: &Path) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| HarnessError::Config(format!("{}: {}", origin.display(), e.message())))
}

fn take_table(t: &mut Table, key: &str) -> Result<Table> {
    match t.remove(key) {
        None => Ok(Table::new()),
        Some(Value::Table(x)) => Ok(x),
        Some(_) => Err(HarnessError::Config(format!("`{key}` must be a table"))),
    }
}

fn take_str(t: &mut Table, key: &str) -> Result<Option<String>> {
    match t.remove(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(HarnessError::Config(format!("`{key}` must be a string"))),
    }
}

fn take_usize(t: &mut Table, key: &str) -> Result<Option<usize>> {
    match t.remove(key) {
        None => Ok(None),
        Some(Value::Integer(i)) if i >= 0 => Ok(Some(i as usize)),
        Some(_) => Err(HarnessError::Config(format!("`{key}` must be a non-negative integer"))),
    }
}

fn data_from(t: Table) -> Result<DataSpec> {
    Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| HarnessError::Config(format!("data: {}", e.message())))
}

fn reject_leftovers(t: &Table, what: &str) -> Result<()> {
    match t.keys().next() {
        Some(k) => Err(HarnessError::Config(format!("unknown key `{k}` in {what}"))),
        None => Ok(()),
    }
}

/// A single-run file: optional `preset`, `[data]` and `[train]`.
#[derive(Debug, Clone, Default)]
pub struct RunFile {
    pub preset: Option<String>,
    pub data: Table,
    pub train: Table,
}

impl RunFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut t = parse_table(text, origin)?;
        let f = RunFile {
            preset: take_str(&mut t, "preset")?,
            data: take_table(&mut t, "data")?,
            train: take_table(&mut t, "train")?,
        };
        reject_leftovers(&t, &origin.display().to_string())?;
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    /// Resolve with command-line overrides applied last.
    pub fn resolve(&self, data_over: &Table, train_over: &Table) -> Result<(DataSpec, TrainConfig)> {
        let mut d = self.data.clone();
        merge(&mut d, data_over);
        let data = data_from(d)?;
        let preset = match &self.preset {
            Some(p) => crate::presets::preset(p)?,
            None => Table::new(),
        };
        let train = resolve_train(&[&preset, &self.train, train_over])?;
        Ok((data, train))
    }
}

#[derive(Debug, Clone)]
pub struct RunEntry {
    pub label: String,
    pub preset: Option<String>,
    pub repeats: usize,
    pub train: Table,
}

/// A sweep: shared data and base settings, then labelled runs, each
/// repeated with seeds derived from the base seed.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub output: Option<PathBuf>,
    pub workers: usize,
    pub data: DataSpec,
    pub base: Table,
    pub runs: Vec<RunEntry>,
    /// Presets added as runs (labelled by preset name) unless a run already
    /// carries that label.
    pub baselines: Vec<String>,
}

impl ExperimentSpec {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut t = parse_table(text, origin)?;
        let name = take_str(&mut t, "name")?.ok_or_else(|| HarnessError::Config("experiment needs a `name`".into()))?;
        let output = take_str(&mut t, "output")?.map(PathBuf::from);
        let workers = take_usize(&mut t, "workers")?.unwrap_or(1).max(1);
        let default_repeats = take_usize(&mut t, "repeats")?.unwrap_or(1);
        let data = data_from(take_table(&mut t, "data")?)?;
        let base = take_table(&mut t, "base")?;
        let baselines = match t.remove("baselines") {
            None => Vec::new(),
            Some(Value::Array(a)) => a
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    _ => Err(HarnessError::Config("baselines must be preset names".into())),
                })
                .collect::<Result<_>>()?,
            Some(_) => return Err(HarnessError::Config("baselines must be an array".into())),
        };
        let mut runs = Vec::new();
        match t.remove("runs") {
            None => {}
            Some(Value::Array(a)) => {
                for (i, v) in a.into_iter().enumerate() {
                    let Value::Table(mut r) = v else {
                        return Err(HarnessError::Config(format!("runs[{i}] must be a table")));
                    };
                    let label = take_str(&mut r, "label")?
                        .ok_or_else(|| HarnessError::Config(format!("runs[{i}] needs a `label`")))?;
                    let entry = RunEntry {
                        preset: take_str(&mut r, "preset")?,
                        repeats: take_usize(&mut r, "repeats")?.unwrap_or(default_repeats),
                        train: take_table(&mut r, "train")?,
                        label,
                    };
                    reject_leftovers(&r, &format!("runs[{i}]"))?;
                    runs.push(entry);
                }
            }
            Some(_) => return Err(HarnessError::Config("`runs` must be an array of tables".into())),
        }
        reject_leftovers(&t, &origin.display().to_string())?;
        for b in &baselines {
            if !runs.iter().any(|r| &r.label == b) {
                runs.push(RunEntry {
                    label: b.clone(),
                    preset: Some(b.clone()),
                    repeats: default_repeats,
                    train: Table::new(),
                });
            }
        }
        let spec = ExperimentSpec {
            name,
            output,
            workers,
            data,
            base,
            runs,
            baselines,
        };
        spec.check_labels()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    fn check_labels(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.runs {
            let ok = !r.label.is_empty()
                && r.label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.+".contains(c))
                && r.label != "."
                && r.label != "..";
            if !ok {
                return Err(HarnessError::Config(format!("run label {:?} is not a plain file name", r.label)));
            }
            if !seen.insert(r.label.as_str()) {
                return Err(HarnessError::Config(format!("duplicate run label {:?}", r.label)));
            }
            if r.repeats == 0 {
                return Err(HarnessError::Config(format!("run {:?} has zero repeats", r.label)));
            }
        }
        Ok(())
    }

    /// Config of one labelled run before per-repeat seeding.
    pub fn resolve_entry(&self, entry: &RunEntry, train_over: &Table) -> Result<TrainConfig> {
        let preset = match &entry.preset {
            Some(p) => crate::presets::preset(p)?,
            None => Table::new(),
        };
        resolve_train(&[&preset, &self.base, &entry.train, train_over])
            .map_err(|e| HarnessError::Config(format!("run {:?}: {e}", entry.label)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rationals() {
        assert_eq!(parse_real("8/255").unwrap(), 8.0 / 255.0);
        assert_eq!(parse_real(" 0.5 ").unwrap(), 0.5);
        assert!(parse_real("1/0").is_err());
        assert!(parse_real("eight").is_err());
    }

    #[test]
    fn nested_partial_tables_keep_sibling_defaults() {
        let over: Table = "[eval_attack]\nepsilon = \"16/255\"\n[attack]\nepsilon = \"16/255\"\n".parse().unwrap();
        let cfg = resolve_train(&[&over]).unwrap();
        let d = TrainConfig::default();
        assert_eq!(cfg.eval_attack.epsilon, 16.0 / 255.0);
        assert_eq!(cfg.eval_attack.steps, d.eval_attack.steps);
        assert_eq!(cfg.eval_attack.restarts, d.eval_attack.restarts);
        assert_eq!(cfg.attack.epsilon, 16.0 / 255.0);
    }

    #[test]
    fn unknown_and_invalid_fields_are_config_errors() {
        let bad: Table = "epochz = 3".parse().unwrap();
        assert!(matches!(resolve_train(&[&bad]), Err(HarnessError::Config(_))));
        let bad: Table = "lr = \"-1\"".parse().unwrap();
        assert!(matches!(resolve_train(&[&bad]), Err(HarnessError::Config(_))));
        assert!(RunFile::parse("[trian]\n", Path::new("x.toml")).is_err());
    }

    #[test]
    fn integer_reals_are_accepted() {
        let t: Table = "lr = 1\n[regularizers]\nweightnorm_lambda = 9".parse().unwrap();
        let cfg = resolve_train(&[&t]).unwrap();
        assert_eq!((cfg.lr, cfg.regularizers.weightnorm_lambda), (1.0, 9.0));
    }

    #[test]
    fn experiment_labels_must_be_unique() {
        let text = "name = \"e\"\n[[runs]]\nlabel = \"a\"\n[[runs]]\nlabel = \"a\"\n";
        assert!(ExperimentSpec::parse(text, Path::new("e.toml")).is_err());
        let text = "name = \"e\"\nbaselines = [\"fgsm\"]\n[[runs]]\nlabel = \"a\"\n";
        let spec = ExperimentSpec::parse(text, Path::new("e.toml")).unwrap();
        assert_eq!(spec.runs.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), vec!["a", "fgsm"]);
    }
}
