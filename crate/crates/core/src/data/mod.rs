//! Image datasets with stable example indices.

mod augment;
mod cifar;
mod patterns;
mod synth;

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::autodiff::{Element, Tensor};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, Rng};

pub use augment::{apply_augment, augment, AugmentSpec};
pub use cifar::{load_cifar_binary, parse_cifar_records, CifarKind, Split, CIFAR100_RECORD, CIFAR10_RECORD};
pub use patterns::{PatternKind, PatternStore};
pub use synth::{synth_dataset, synth_dataset_with, SynthConfig};

/// Images stored as bytes (value / 255 is the pixel), each with a label and
/// an index that identifies it across epochs and subsets.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub name: String,
    shape: [usize; 3],
    num_classes: usize,
    pixels: Arc<Vec<u8>>,
    labels: Arc<Vec<usize>>,
    /// Positions into `pixels`/`labels` served by this handle.
    rows: Arc<Vec<usize>>,
}

/// A batch ready for a forward pass.
#[derive(Debug, Clone)]
pub struct Batch<F: Element> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
    /// Stable example indices.
    pub indices: Vec<usize>,
}

impl DatasetHandle {
    pub fn new(name: impl Into<String>, shape: [usize; 3], num_classes: usize, pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Format(format!(
                "{} pixel bytes for {} images of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!("label {bad} out of range for {num_classes} classes")));
        }
        let rows = (0..labels.len()).collect();
        Ok(DatasetHandle {
            name: name.into(),
            shape,
            num_classes,
            pixels: Arc::new(pixels),
            labels: Arc::new(labels),
            rows: Arc::new(rows),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `[C, H, W]`.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Stable index of the example at position `pos`.
    pub fn index(&self, pos: usize) -> usize {
        self.rows[pos]
    }

    pub fn label(&self, pos: usize) -> usize {
        self.labels[self.rows[pos]]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|&r| self.labels[r]).collect()
    }

    /// Raw bytes of the example at position `pos`.
    pub fn image_bytes(&self, pos: usize) -> &[u8] {
        let n = self.image_len();
        let r = self.rows[pos];
        &self.pixels[r * n..(r + 1) * n]
    }

    /// `(index, image in [0, 1], label)`.
    pub fn get(&self, pos: usize) -> (usize, Vec<f32>, usize) {
        let img = self.image_bytes(pos).iter().map(|&b| b as f32 / 255.0).collect();
        (self.index(pos), img, self.label(pos))
    }

    fn with_rows(&self, rows: Vec<usize>, suffix: &str) -> DatasetHandle {
        DatasetHandle {
            name: format!("{}{suffix}", self.name),
            rows: Arc::new(rows),
            ..self.clone()
        }
    }

    /// The first `n` examples.
    pub fn first_n(&self, n: usize) -> Result<DatasetHandle> {
        if n > self.len() {
            return Err(Error::invalid(format!("subset of {n} from {} examples", self.len())));
        }
        Ok(self.with_rows(self.rows[..n].to_vec(), &format!("[first {n}]")))
    }

    /// `n` examples with classes as balanced as possible, earliest first.
    pub fn stratified_n(&self, n: usize) -> Result<DatasetHandle> {
        if n > self.len() {
            return Err(Error::invalid(format!("subset of {n} from {} examples", self.len())));
        }
        let k = self.num_classes;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for &r in self.rows.iter() {
            by_class[self.labels[r]].push(r);
        }
        let mut picked = Vec::with_capacity(n);
        let mut depth = 0;
        while picked.len() < n {
            let mut any = false;
            for class in &by_class {
                if let Some(&r) = class.get(depth) {
                    any = true;
                    if picked.len() < n {
                        picked.push(r);
                    }
                }
            }
            if !any {
                break;
            }
            depth += 1;
        }
        picked.sort_unstable();
        Ok(self.with_rows(picked, &format!("[stratified {n}]")))
    }

    /// Disjoint positions `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Result<DatasetHandle> {
        if start > end || end > self.len() {
            return Err(Error::invalid(format!("range {start}..{end} of {} examples", self.len())));
        }
        Ok(self.with_rows(self.rows[start..end].to_vec(), &format!("[{start}..{end}]")))
    }

    /// Positions in a seeded random order for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut derive_rng(seed, "shuffle", epoch as u64));
        order
    }

    /// Assemble positions into a batch, optionally augmenting each image.
    pub fn batch<F: Element>(&self, positions: &[usize], aug: Option<(&AugmentSpec, &mut Rng)>) -> Result<Batch<F>> {
        let [c, h, w] = self.shape;
        let n = self.image_len();
        let mut data = Vec::with_capacity(positions.len() * n);
        let mut aug = aug;
        for &p in positions {
            if p >= self.len() {
                return Err(Error::invalid(format!("position {p} out of {} examples", self.len())));
            }
            let img: Vec<f32> = self.image_bytes(p).iter().map(|&b| b as f32 / 255.0).collect();
            let img = match aug.as_mut() {
                Some((spec, rng)) => augment(&img, [c, h, w], spec, rng),
                None => img,
            };
            data.extend(img.into_iter().map(|v| F::cst(v as f64)));
        }
        Ok(Batch {
            images: Tensor::from_vec(data, &[positions.len(), c, h, w])?,
            labels: positions.iter().map(|&p| self.label(p)).collect(),
            indices: positions.iter().map(|&p| self.index(p)).collect(),
        })
    }
}
