use std::path::Path;
use std::process::Command;

use fastadv::training::{EpochRecord, RunLog, TrainConfig};
use fastadv_harness::config::ExperimentSpec;
use fastadv_harness::{emit_curves, run_experiment, write_summary};
use toml::Table;

const TINY_BASE: &str = r#"
[data]
source = "synthetic"
synthetic_held_out = 32
[data.synthetic]
n = 64
image_size = 8

[base]
epochs = 2
batch_size = 16
lr_decay_epochs = [1]
eval_repeats = 2
augment = { random_flip = false, random_crop = false, pad = 0 }
[base.model]
widths = [4, 8, 8]
[base.probe]
size = 32
[base.eval_attack]
steps = 3
restarts = 2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fastadv"))
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn two_configs_two_repeats_give_four_logs_and_two_rows() {
    let text = format!("name = \"grid\"\nrepeats = 2\n{TINY_BASE}\n[[runs]]\nlabel = \"fgsm\"\n[[runs]]\nlabel = \"mask\"\npreset = \"fgsm-mask\"\n");
    let spec = ExperimentSpec::parse(&text, Path::new("grid.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&spec, dir.path(), &Table::new()).unwrap();
    assert_eq!(report.outcomes.len(), 4);
    assert!(report.outcomes.iter().all(|o| o.result.is_ok()));
    assert_eq!(report.summary.len(), 2);
    for label in ["fgsm", "mask"] {
        for r in 0..2 {
            let run = dir.path().join(label).join(format!("repeat-{r}"));
            for f in ["runlog.csv", "runlog.json", "final.ckpt", "config.toml", "curves/robust_acc.csv"] {
                assert!(run.join(f).is_file(), "{}", run.join(f).display());
            }
        }
    }
    // Repeats differ in seed; labels share seeds per repeat.
    let seed = |l: &str, r: usize| {
        let s = std::fs::read_to_string(dir.path().join(l).join(format!("repeat-{r}/runlog.json"))).unwrap();
        RunLog::from_json(&s).unwrap().config.seed
    };
    assert_ne!(seed("fgsm", 0), seed("fgsm", 1));
    assert_eq!(seed("fgsm", 1), seed("mask", 1));

    let before = read_all(dir.path());
    write_summary(dir.path()).unwrap();
    assert_eq!(read_all(dir.path()), before, "summary regeneration must not change any file");
}

#[test]
fn invalid_run_is_rejected_before_anything_runs() {
    let text = format!("name = \"bad\"\n{TINY_BASE}\n[[runs]]\nlabel = \"ok\"\n[[runs]]\nlabel = \"bad\"\n[runs.train]\nmomentum = 1.5\n");
    let spec = ExperimentSpec::parse(&text, Path::new("bad.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&spec, &dir.path().join("out"), &Table::new()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn stride_and_smooth_row_resolves_to_both_knobs() {
    let text = "name = \"t\"\n[[runs]]\nlabel = \"str2-smooth\"\npreset = \"str2-smooth\"\n";
    let spec = ExperimentSpec::parse(text, Path::new("t.toml")).unwrap();
    let cfg = spec.resolve_entry(&spec.runs[0], &Table::new()).unwrap();
    assert_eq!(cfg.model.first_conv_stride, 2);
    assert_eq!(cfg.model.softplus_alpha, 2.0);
}

fn fake_log(epochs: usize, spike_at: usize) -> RunLog {
    let records = (0..epochs)
        .map(|e| EpochRecord {
            epoch: e,
            clean_acc: 0.6,
            robust_acc: if e >= spike_at { 0.0 } else { 0.35 },
            mean_input_grad_norm: if e >= spike_at { 3.0 } else { 0.5 },
            loss_main: 1.0,
            loss_reg: 0.0,
            wall_clock_s: 1.0,
            collapse_flag: e == spike_at,
        })
        .collect();
    RunLog {
        config: TrainConfig::default(),
        records,
        events: Vec::new(),
        final_eval: None,
        divergence: None,
    }
}

#[test]
fn curves_have_one_row_per_epoch_and_are_deterministic() {
    let log = fake_log(30, 11);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    emit_curves(&log, a.path()).unwrap();
    emit_curves(&log, b.path()).unwrap();
    let robust = std::fs::read_to_string(a.path().join("robust_acc.csv")).unwrap();
    assert_eq!(robust.lines().count(), 31);
    assert_eq!(robust.lines().next().unwrap(), "epoch,robust_acc,collapse");
    let grad = std::fs::read_to_string(a.path().join("grad_norm.csv")).unwrap();
    assert!(grad.lines().any(|l| l == "11,3,1"));
    for f in ["clean_acc.csv", "robust_acc.csv", "grad_norm.csv", "loss.csv", "provenance.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn cli_train_writes_under_output_root_and_curves_verb_works() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.toml");
    let text = TINY_BASE.replace("[base", "[train");
    std::fs::write(&cfg, text).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--epsilon", "8/255", "--name", "tiny"])
        .env("FASTADV_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = root.path().join("tiny/runlog.json");
    assert!(log.is_file());
    let parsed = RunLog::from_json(&std::fs::read_to_string(&log).unwrap()).unwrap();
    assert_eq!(parsed.config.attack.epsilon, 8.0 / 255.0);
    assert_eq!(parsed.config.model.input_shape, [3, 8, 8]);

    let curves = root.path().join("c");
    let st = bin().arg("curves").arg(&log).arg("--out").arg(&curves).output().unwrap();
    assert!(st.status.success());
    assert_eq!(
        std::fs::read(curves.join("robust_acc.csv")).unwrap(),
        std::fs::read(root.path().join("tiny/curves/robust_acc.csv")).unwrap()
    );

    let st = bin()
        .args(["eval", "--checkpoint"])
        .arg(root.path().join("tiny/final.ckpt"))
        .arg("--config")
        .arg(&cfg)
        .args(["--eval-repeats", "1"])
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(String::from_utf8_lossy(&st.stdout).contains("robust_mean"));
}

#[test]
fn exit_codes_separate_config_errors_from_divergence() {
    let root = tempfile::tempdir().unwrap();
    let st = bin().args(["train", "--momentum", "2", "--print-config"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = bin().args(["train", "--preset", "no-such-preset", "--print-config"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));

    let cfg = root.path().join("run.toml");
    std::fs::write(&cfg, TINY_BASE.replace("[base", "[train")).unwrap();
    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--lr", "1e300", "--weight-decay", "0", "--out"])
        .arg(root.path().join("boom"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(3), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(root.path().join("boom/runlog.json").is_file());

    let st = bin()
        .args(["train", "--data", "cifar10", "--data-path"])
        .arg(root.path().join("missing"))
        .args(["--out"])
        .arg(root.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(4));
}

#[test]
fn print_config_round_trips_through_a_run_file() {
    let out = bin().args(["train", "--preset", "weightnorm", "--epsilon", "16/255", "--print-config"]).output().unwrap();
    assert!(out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("dump.toml");
    std::fs::write(&p, &out.stdout).unwrap();
    let again = bin().args(["train", "--print-config", "--config"]).arg(&p).output().unwrap();
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    assert_eq!(again.stdout, out.stdout);
}
