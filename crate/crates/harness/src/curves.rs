//! Plot-ready per-epoch tables derived from a run log.

use std::path::{Path, PathBuf};

use fastadv::training::RunLog;

use crate::error::Result;

type Column = fn(&fastadv::training::EpochRecord) -> String;

const CURVES: &[(&str, &[(&str, Column)])] = &[
    ("clean_acc.csv", &[("clean_acc", |r| r.clean_acc.to_string())]),
    (
        "robust_acc.csv",
        &[
            ("robust_acc", |r| r.robust_acc.to_string()),
            ("collapse", |r| (r.collapse_flag as u8).to_string()),
        ],
    ),
    (
        "grad_norm.csv",
        &[
            ("grad_norm", |r| r.mean_input_grad_norm.to_string()),
            ("collapse", |r| (r.collapse_flag as u8).to_string()),
        ],
    ),
    (
        "loss.csv",
        &[
            ("loss_main", |r| r.loss_main.to_string()),
            ("loss_reg", |r| r.loss_reg.to_string()),
        ],
    ),
];

/// One `epoch,<metric>...` CSV per curve plus `provenance.json` holding the
/// resolved config. Output depends only on `log`.
pub fn emit_curves(log: &RunLog, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (file, cols) in CURVES {
        let path = dir.join(file);
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["epoch"];
        header.extend(cols.iter().map(|(n, _)| *n));
        w.write_record(&header)?;
        for r in &log.records {
            let mut row = vec![r.epoch.to_string()];
            row.extend(cols.iter().map(|(_, f)| f(r)));
            w.write_record(&row)?;
        }
        w.flush()?;
        written.push(path);
    }
    let prov = dir.join("provenance.json");
    std::fs::write(&prov, serde_json::to_string_pretty(&log.config)?)?;
    written.push(prov);
    Ok(written)
}
