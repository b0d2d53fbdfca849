//! CIFAR binary format: fixed-size records of label byte(s) followed by
//! 3x32x32 channel-major pixels.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatasetHandle;
use crate::error::{Error, Result};

pub const CIFAR10_RECORD: usize = 1 + 3072;
pub const CIFAR100_RECORD: usize = 2 + 3072;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl CifarKind {
    pub fn record_len(self) -> usize {
        match self {
            CifarKind::Cifar10 => CIFAR10_RECORD,
            CifarKind::Cifar100 => CIFAR100_RECORD,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (CifarKind::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarKind::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (CifarKind::Cifar100, Split::Train) => vec!["train.bin"],
            (CifarKind::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            CifarKind::Cifar10 => "cifar-10-batches-bin",
            CifarKind::Cifar100 => "cifar-100-binary",
        }
    }
}

/// Split raw bytes into pixel bytes and labels. CIFAR-100 uses the fine label.
pub fn parse_cifar_records(bytes: &[u8], kind: CifarKind) -> Result<(Vec<u8>, Vec<usize>)> {
    let rec = kind.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let skip = rec - 3072;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[skip - 1] as usize;
        if label >= kind.classes() {
            return Err(Error::Format(format!("record {i}: label {label} out of range")));
        }
        labels.push(label);
        pixels.extend_from_slice(&r[skip..]);
    }
    Ok((pixels, labels))
}

fn resolve(path: &Path, kind: CifarKind, split: Split) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let nested = path.join(kind.subdir());
    let dir = if nested.is_dir() { nested } else { path.to_path_buf() };
    let files: Vec<PathBuf> = kind.files(split).iter().map(|f| dir.join(f)).collect();
    if let Some(missing) = files.iter().find(|f| !f.is_file()) {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing CIFAR file {}", missing.display()),
        )));
    }
    Ok(files)
}

/// Load a split from a directory of the standard binary release, or from a
/// single batch file.
pub fn load_cifar_binary(path: &Path, kind: CifarKind, split: Split) -> Result<DatasetHandle> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in resolve(path, kind, split)? {
        let bytes = std::fs::read(&f)?;
        let (p, l) = parse_cifar_records(&bytes, kind)
            .map_err(|e| Error::Format(format!("{}: {e}", f.display())))?;
        pixels.extend(p);
        labels.extend(l);
    }
    let name = match kind {
        CifarKind::Cifar10 => "cifar10",
        CifarKind::Cifar100 => "cifar100",
    };
    let split_name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    DatasetHandle::new(format!("{name}-{split_name}"), [3, 32, 32], kind.classes(), pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar100_uses_fine_label() {
        let mut rec = vec![0u8; CIFAR100_RECORD];
        rec[0] = 3;
        rec[1] = 77;
        rec[2] = 200;
        let (p, l) = parse_cifar_records(&rec, CifarKind::Cifar100).unwrap();
        assert_eq!(l, vec![77]);
        assert_eq!(p[0], 200);
        assert_eq!(p.len(), 3072);
    }

    #[test]
    fn framing_and_label_errors() {
        assert!(parse_cifar_records(&vec![0u8; CIFAR10_RECORD + 1], CifarKind::Cifar10).is_err());
        let mut rec = vec![0u8; CIFAR10_RECORD];
        rec[0] = 10;
        assert!(parse_cifar_records(&rec, CifarKind::Cifar10).is_err());
    }
}
