use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub random_flip: bool,
    pub random_crop: bool,
    pub pad: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            random_flip: true,
            random_crop: true,
            pad: 4,
        }
    }
}

impl AugmentSpec {
    pub fn off() -> Self {
        AugmentSpec {
            random_flip: false,
            random_crop: false,
            pad: 0,
        }
    }
}

/// Optional horizontal flip, then a crop of the original size taken at
/// `(off_y, off_x)` from the image zero-padded by `pad` on every side.
pub fn apply_augment(img: &[f32], shape: [usize; 3], flip: bool, off_y: usize, off_x: usize, pad: usize) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + off_y) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + off_x) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx];
            }
        }
    }
    out
}

pub fn augment(img: &[f32], shape: [usize; 3], spec: &AugmentSpec, rng: &mut Rng) -> Vec<f32> {
    let flip = spec.random_flip && rng.random_bool(0.5);
    let (pad, oy, ox) = if spec.random_crop && spec.pad > 0 {
        let span = 2 * spec.pad + 1;
        (spec.pad, rng.random_range(0..span), rng.random_range(0..span))
    } else {
        (0, 0, 0)
    };
    apply_augment(img, shape, flip, oy, ox, pad)
}
