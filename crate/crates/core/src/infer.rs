//! Sliding-window whole-volume inference.
//!
//! Windows start every `floor(patch·(1 - overlap))` voxels per axis, with
//! the last window clamped to the volume edge. Window logits are accumulated
//! with blending weights and divided by the summed weights, so each output
//! voxel is a convex combination of window outputs. Windows run in parallel;
//! accumulation happens in fixed window order, so results do not depend on
//! scheduling.

use autoprosam_tape::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::volume::patches::pad_to;
use crate::volume::Volume;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blending {
    #[default]
    Constant,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingWindowConfig {
    /// Window size; `None` uses the segmenter's own patch size.
    pub patch_size: Option<[usize; 3]>,
    pub overlap_ratio: f64,
    pub blending: Blending,
    pub gaussian_sigma_fraction: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        Self {
            patch_size: None,
            overlap_ratio: 0.75,
            blending: Blending::Constant,
            gaussian_sigma_fraction: 0.125,
        }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return Err(Error::config("sliding_window.overlap_ratio", "must lie in [0, 1)"));
        }
        if !(self.gaussian_sigma_fraction.is_finite() && self.gaussian_sigma_fraction > 0.0) {
            return Err(Error::config("sliding_window.gaussian_sigma_fraction", "must be positive"));
        }
        Ok(())
    }
}

/// Anything that maps a `[1, 1, pd, ph, pw]` patch to `[1, K+1, pd, ph, pw]` logits.
pub trait Segmenter: Sync {
    fn patch_size(&self) -> [usize; 3];
    fn out_channels(&self) -> usize;
    fn predict(&self, patch: &Tensor) -> Result<Tensor>;
}

impl Segmenter for Model {
    fn patch_size(&self) -> [usize; 3] {
        self.cfg.encoder.patch_size()
    }

    fn out_channels(&self) -> usize {
        self.cfg.decoder.num_classes + 1
    }

    fn predict(&self, patch: &Tensor) -> Result<Tensor> {
        self.infer(patch)
    }
}

/// Window start offsets along one axis of length `extent`.
pub fn window_starts(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let stride = ((patch as f64 * (1.0 - overlap) + 1e-9).floor() as usize).max(1);
    let last = extent - patch;
    let mut starts: Vec<usize> = (0..last).step_by(stride).collect();
    starts.push(last);
    starts
}

/// Blending weight of every voxel inside one window.
pub fn window_weights(patch: [usize; 3], cfg: &SlidingWindowConfig) -> Vec<f64> {
    let n: usize = patch.iter().product();
    match cfg.blending {
        Blending::Constant => vec![1.0; n],
        Blending::Gaussian => {
            let axis = |p: usize| -> Vec<f64> {
                let c = (p as f64 - 1.0) / 2.0;
                let s = cfg.gaussian_sigma_fraction * p as f64;
                (0..p).map(|i| (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp()).collect()
            };
            let (a, b, c) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
            let mut w = Vec::with_capacity(n);
            for &x in &a {
                for &y in &b {
                    for &z in &c {
                        w.push(x * y * z);
                    }
                }
            }
            let max = w.iter().cloned().fold(0.0, f64::max);
            // keep window borders from carrying exactly zero weight
            w.iter().map(|v| (v / max).max(1e-6)).collect()
        }
    }
}

fn crop(src: &[f64], shape: [usize; 3], start: [usize; 3], size: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(size.iter().product());
    for d in 0..size[0] {
        for h in 0..size[1] {
            let row = ((start[0] + d) * shape[1] + start[1] + h) * shape[2] + start[2];
            out.extend_from_slice(&src[row..row + size[2]]);
        }
    }
    out
}

/// Whole-volume logits `[K+1, D, H, W]`.
pub fn sliding_window_infer(volume: &Volume, seg: &dyn Segmenter, cfg: &SlidingWindowConfig) -> Result<Tensor> {
    cfg.validate()?;
    let patch = seg.patch_size();
    if let Some(p) = cfg.patch_size {
        if p != patch {
            return Err(Error::Contract(format!("window size {p:?} differs from the model patch size {patch:?}")));
        }
    }
    let orig = volume.shape();
    let (padded, before) = pad_to(volume, patch)?;
    let shape = padded.shape();
    let starts: Vec<[usize; 3]> = {
        let s = [0, 1, 2].map(|a| window_starts(shape[a], patch[a], cfg.overlap_ratio));
        let mut v = Vec::new();
        for &d in &s[0] {
            for &h in &s[1] {
                for &w in &s[2] {
                    v.push([d, h, w]);
                }
            }
        }
        v
    };
    let weights = window_weights(patch, cfg);
    let k1 = seg.out_channels();
    let n: usize = shape.iter().product();
    let mut acc = vec![0.0; k1 * n];
    let mut wsum = vec![0.0; n];
    let chunk = rayon::current_num_threads().max(1) * 2;
    for group in starts.chunks(chunk) {
        let outputs: Vec<Result<Tensor>> = group
            .par_iter()
            .map(|&start| {
                let x = Tensor::from_vec(&[1, 1, patch[0], patch[1], patch[2]], crop(padded.data(), shape, start, patch))?;
                let y = seg.predict(&x)?;
                if y.shape() != [1, k1, patch[0], patch[1], patch[2]] {
                    return Err(Error::Shape(format!("segmenter returned {:?}", y.shape())));
                }
                Ok(y)
            })
            .collect();
        for (start, y) in group.iter().zip(outputs) {
            let y = y?;
            let pn: usize = patch.iter().product();
            for d in 0..patch[0] {
                for h in 0..patch[1] {
                    for w in 0..patch[2] {
                        let local = (d * patch[1] + h) * patch[2] + w;
                        let global = ((start[0] + d) * shape[1] + start[1] + h) * shape[2] + start[2] + w;
                        let wt = weights[local];
                        wsum[global] += wt;
                        for c in 0..k1 {
                            acc[c * n + global] += wt * y.data()[c * pn + local];
                        }
                    }
                }
            }
        }
    }
    for c in 0..k1 {
        for (a, w) in acc[c * n..(c + 1) * n].iter_mut().zip(&wsum) {
            *a /= w;
        }
    }
    let mut out = Vec::with_capacity(k1 * orig.iter().product::<usize>());
    for c in 0..k1 {
        out.extend(crop(&acc[c * n..(c + 1) * n], shape, before, orig));
    }
    Ok(Tensor::from_vec(&[k1, orig[0], orig[1], orig[2]], out)?)
}
