//! Per-example fixed patterns (masks or noise), generated lazily from a
//! per-index seed and optionally persisted to a sidecar file.
//!
//! Sidecar layout (little-endian):
//!
//! ```text
//! magic   8 bytes "FADVFIXP"
//! version u32
//! kind    u8      0 = mask, 1 = noise
//! param   f64     mask ratio or noise epsilon
//! seed    u64
//! ndim    u8, then ndim x u32 extents
//! count   u64
//! entries count x (index u64, product(extents) x f32), ascending index
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, Rng};

const MAGIC: &[u8; 8] = b"FADVFIXP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    /// Spatial `{0, 1}` mask over `[H, W]` with `floor(ratio * H * W)` zeros.
    Mask { ratio: f64 },
    /// Uniform noise in `[-epsilon, epsilon]` over `[C, H, W]`.
    Noise { epsilon: f64 },
}

impl PatternKind {
    fn tag(self) -> (u8, f64) {
        match self {
            PatternKind::Mask { ratio } => (0, ratio),
            PatternKind::Noise { epsilon } => (1, epsilon),
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            PatternKind::Mask { ratio } if !(0.0..=1.0).contains(&ratio) => {
                Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")))
            }
            PatternKind::Noise { epsilon } if !(epsilon >= 0.0 && epsilon.is_finite()) => {
                Err(Error::invalid(format!("noise epsilon {epsilon} must be finite and >= 0")))
            }
            _ => Ok(()),
        }
    }

    /// Draw one pattern of `numel` values (for masks, `numel = H * W`).
    pub fn generate(self, numel: usize, rng: &mut Rng) -> Vec<f32> {
        match self {
            PatternKind::Mask { ratio } => {
                let zeros = (ratio * numel as f64).floor() as usize;
                let mut m = vec![1.0f32; numel];
                for i in rand::seq::index::sample(rng, numel, zeros.min(numel)) {
                    m[i] = 0.0;
                }
                m
            }
            PatternKind::Noise { epsilon } => (0..numel)
                .map(|_| {
                    let mut v = (epsilon * rng.random_range(-1.0..=1.0)) as f32;
                    // Keep the rounded value inside the ball.
                    while v != 0.0 && f64::from(v).abs() > epsilon {
                        v = f32::from_bits(v.to_bits() - 1);
                    }
                    v
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatternStore {
    kind: PatternKind,
    seed: u64,
    shape: Vec<usize>,
    entries: BTreeMap<u64, Arc<Vec<f32>>>,
}

impl PatternStore {
    pub fn new(kind: PatternKind, seed: u64, shape: &[usize]) -> Result<Self> {
        kind.validate()?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!("pattern shape {shape:?} must be non-empty")));
        }
        Ok(PatternStore {
            kind,
            seed,
            shape: shape.to_vec(),
            entries: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The pattern bound to example `index`, created on first access.
    pub fn get(&mut self, index: usize) -> Arc<Vec<f32>> {
        let numel: usize = self.shape.iter().product();
        let (kind, seed) = (self.kind, self.seed);
        Arc::clone(self.entries.entry(index as u64).or_insert_with(|| {
            let mut rng = derive_rng(seed, "fixed-pattern", index as u64);
            Arc::new(kind.generate(numel, &mut rng))
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (tag, param) = self.kind.tag();
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(tag);
        b.extend_from_slice(&param.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.push(self.shape.len() as u8);
        for &d in &self.shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        b.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (&i, v) in &self.entries {
            b.extend_from_slice(&i.to_le_bytes());
            for x in v.iter() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Format(format!("pattern file truncated at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(Error::Format("not a pattern file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported pattern file version {version}")));
        }
        let tag = take(1)?[0];
        let param = f64::from_le_bytes(take(8)?.try_into().expect("8"));
        let kind = match tag {
            0 => PatternKind::Mask { ratio: param },
            1 => PatternKind::Noise { epsilon: param },
            t => return Err(Error::Format(format!("unknown pattern kind {t}"))),
        };
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("8"));
        let ndim = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize);
        }
        let mut store = PatternStore::new(kind, seed, &shape).map_err(|e| Error::Format(e.to_string()))?;
        let numel: usize = shape.iter().product();
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8"));
        for _ in 0..count {
            let i = u64::from_le_bytes(take(8)?.try_into().expect("8"));
            let v = take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                .collect();
            store.entries.insert(i, Arc::new(v));
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes in pattern file".into()));
        }
        Ok(store)
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Load `path` if present (its header must match), else start empty.
    pub fn open_or_new(path: &Path, kind: PatternKind, seed: u64, shape: &[usize]) -> Result<Self> {
        if !path.exists() {
            return Self::new(kind, seed, shape);
        }
        let s = Self::load(path)?;
        if s.kind != kind || s.seed != seed || s.shape != shape {
            return Err(Error::Format(format!(
                "pattern file {} was written for {:?}/seed {}/{:?}",
                path.display(),
                s.kind,
                s.seed,
                s.shape
            )));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_is_pure_and_round_trips() {
        let mut s = PatternStore::new(PatternKind::Noise { epsilon: 8.0 / 255.0 }, 5, &[3, 4, 4]).unwrap();
        let a = s.get(7);
        let _ = s.get(2);
        assert_eq!(*s.get(7), *a);
        assert!(a.iter().all(|&v| f64::from(v).abs() <= 8.0 / 255.0));

        let mut fresh = PatternStore::new(PatternKind::Noise { epsilon: 8.0 / 255.0 }, 5, &[3, 4, 4]).unwrap();
        assert_eq!(*fresh.get(7), *a);

        let bytes = s.to_bytes();
        let back = PatternStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.to_bytes(), bytes);
        assert!(PatternStore::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn masks_have_exact_zero_counts() {
        let mut s = PatternStore::new(PatternKind::Mask { ratio: 0.3 }, 1, &[32, 32]).unwrap();
        for i in 0..20 {
            assert_eq!(s.get(i).iter().filter(|&&v| v == 0.0).count(), 307);
        }
        assert!(PatternStore::new(PatternKind::Mask { ratio: 1.5 }, 1, &[2, 2]).is_err());
    }

    #[test]
    fn sidecar_header_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.fixp");
        let mut s = PatternStore::new(PatternKind::Noise { epsilon: 0.1 }, 9, &[1, 2, 2]).unwrap();
        s.get(0);
        s.save(&path).unwrap();
        let r = PatternStore::open_or_new(&path, PatternKind::Noise { epsilon: 0.1 }, 9, &[1, 2, 2]).unwrap();
        assert_eq!(r.len(), 1);
        assert!(PatternStore::open_or_new(&path, PatternKind::Noise { epsilon: 0.2 }, 9, &[1, 2, 2]).is_err());
    }
}
