//! On-the-fly augmentation: axis flips, axial 90° rotations, intensity scale
//! and shift. Geometric ops permute voxels identically in image and labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{flat_index, LabelMap, Volume};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Independent flip probability per axis `(d, h, w)`.
    pub flip_prob: f64,
    /// Probability of rotating the `(h, w)` plane by 90°, 180° or 270°.
    pub rotate_prob: f64,
    pub scale_prob: f64,
    pub scale_range: [f64; 2],
    pub shift_prob: f64,
    pub shift_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate_prob: 0.5,
            scale_prob: 0.5,
            scale_range: [0.9, 1.1],
            shift_prob: 0.5,
            shift_range: [-0.1, 0.1],
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            rotate_prob: 0.0,
            scale_prob: 0.0,
            shift_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Reverses one axis of a row-major `(d, h, w)` grid.
pub fn flip<T: Copy>(data: &[T], shape: [usize; 3], axis: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let mut src = [d, h, w];
                src[axis] = shape[axis] - 1 - src[axis];
                out.push(data[flat_index(shape, src[0], src[1], src[2])]);
            }
        }
    }
    out
}

/// Rotates the `(h, w)` plane by `quarter_turns * 90°`. Returns the new shape.
pub fn rot90_axial<T: Copy>(data: &[T], shape: [usize; 3], quarter_turns: usize) -> (Vec<T>, [usize; 3]) {
    let k = quarter_turns % 4;
    let out_shape = if k % 2 == 1 { [shape[0], shape[2], shape[1]] } else { shape };
    let (hh, ww) = (shape[1], shape[2]);
    let mut out = Vec::with_capacity(data.len());
    for d in 0..out_shape[0] {
        for y in 0..out_shape[1] {
            for x in 0..out_shape[2] {
                let (sh, sw) = match k {
                    0 => (y, x),
                    1 => (x, ww - 1 - y),
                    2 => (hh - 1 - y, ww - 1 - x),
                    _ => (hh - 1 - x, y),
                };
                out.push(data[flat_index(shape, d, sh, sw)]);
            }
        }
    }
    (out, out_shape)
}

pub fn augment<R: Rng>(image: &Volume, labels: &LabelMap, cfg: &AugmentConfig, rng: &mut R) -> Result<(Volume, LabelMap)> {
    let mut shape = image.shape();
    let mut img = image.data().to_vec();
    let mut lab = labels.data().to_vec();
    for axis in 0..3 {
        if rng.gen::<f64>() < cfg.flip_prob {
            img = flip(&img, shape, axis);
            lab = flip(&lab, shape, axis);
        }
    }
    if rng.gen::<f64>() < cfg.rotate_prob {
        // odd quarter turns would swap h and w; only allowed for square planes
        let k = if shape[1] == shape[2] { rng.gen_range(1..4) } else { 2 };
        let (i, s) = rot90_axial(&img, shape, k);
        let (l, _) = rot90_axial(&lab, shape, k);
        img = i;
        lab = l;
        shape = s;
    }
    if rng.gen::<f64>() < cfg.scale_prob {
        let s = rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        img.iter_mut().for_each(|v| *v *= s);
    }
    if rng.gen::<f64>() < cfg.shift_prob {
        let s = rng.gen_range(cfg.shift_range[0]..=cfg.shift_range[1]);
        img.iter_mut().for_each(|v| *v += s);
    }
    let spacing = image.spacing();
    let spacing = if shape == image.shape() { spacing } else { [spacing[0], spacing[2], spacing[1]] };
    Ok((
        Volume::new(shape, spacing, img)?,
        LabelMap::new(shape, spacing, lab, labels.num_classes())?,
    ))
}
