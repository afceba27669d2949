//! Foreground/background patch sampling.
//!
//! A patch is centred on a voxel drawn uniformly from the requested class
//! (label > 0 for foreground, label 0 for background). The centre of a patch
//! of size `p` is at offset `p / 2`. Windows that extend past the volume read
//! edge-replicated voxels, so every voxel is an admissible centre and the
//! centre label always matches the flag.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{flat_index, LabelMap, Volume};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: [usize; 3],
    /// Foreground : background weights.
    #[serde(default = "default_ratio")]
    pub pos_neg_ratio: [u32; 2],
    pub count: usize,
}

fn default_ratio() -> [u32; 2] {
    [1, 1]
}

impl PatchSpec {
    pub fn new(patch_size: [usize; 3], count: usize) -> Self {
        Self {
            patch_size,
            pos_neg_ratio: default_ratio(),
            count,
        }
    }

    pub fn foreground_count(&self) -> usize {
        let [p, n] = self.pos_neg_ratio;
        if p + n == 0 {
            return 0;
        }
        (self.count as f64 * p as f64 / (p + n) as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Volume,
    pub labels: LabelMap,
    /// Index of the patch's first voxel in the source volume (may be negative).
    pub start: [isize; 3],
    pub center: [usize; 3],
    pub foreground: bool,
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Cuts a window starting at `start`, edge-replicating outside the volume.
pub fn extract(volume: &Volume, labels: &LabelMap, start: [isize; 3], size: [usize; 3]) -> Result<(Volume, LabelMap)> {
    let shape = volume.shape();
    let n: usize = size.iter().product();
    let (mut img, mut lab) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for d in 0..size[0] {
        let sd = clamp_index(start[0] + d as isize, shape[0]);
        for h in 0..size[1] {
            let sh = clamp_index(start[1] + h as isize, shape[1]);
            for w in 0..size[2] {
                let sw = clamp_index(start[2] + w as isize, shape[2]);
                let i = flat_index(shape, sd, sh, sw);
                img.push(volume.data()[i]);
                lab.push(labels.data()[i]);
            }
        }
    }
    Ok((
        Volume::new(size, volume.spacing(), img)?,
        LabelMap::new(size, labels.spacing(), lab, labels.num_classes())?,
    ))
}

/// Edge-replicate pads every axis up to at least `min_size`, split evenly
/// before and after. Returns the padded volume and the leading pad per axis.
pub fn pad_to(volume: &Volume, min_size: [usize; 3]) -> Result<(Volume, [usize; 3])> {
    let shape = volume.shape();
    let out = [0, 1, 2].map(|a| shape[a].max(min_size[a]));
    let before = [0, 1, 2].map(|a| (out[a] - shape[a]) / 2);
    let mut data = Vec::with_capacity(out.iter().product());
    for d in 0..out[0] {
        let sd = clamp_index(d as isize - before[0] as isize, shape[0]);
        for h in 0..out[1] {
            let sh = clamp_index(h as isize - before[1] as isize, shape[1]);
            for w in 0..out[2] {
                let sw = clamp_index(w as isize - before[2] as isize, shape[2]);
                data.push(volume.get(sd, sh, sw));
            }
        }
    }
    Ok((Volume::new(out, volume.spacing(), data)?.with_origin(volume.origin()), before))
}

pub fn sample_patches(volume: &Volume, labels: &LabelMap, spec: &PatchSpec, seed: u64) -> Result<Vec<Patch>> {
    if volume.shape() != labels.shape() {
        return Err(Error::Shape(format!("image {:?} vs labels {:?}", volume.shape(), labels.shape())));
    }
    if spec.patch_size.contains(&0) {
        return Err(Error::Sampling("patch size must be positive".into()));
    }
    let n_fg = spec.foreground_count().min(spec.count);
    let n_bg = spec.count - n_fg;
    let fg: Vec<usize> = (0..labels.data().len()).filter(|&i| labels.data()[i] > 0).collect();
    let bg: Vec<usize> = (0..labels.data().len()).filter(|&i| labels.data()[i] == 0).collect();
    if n_fg > 0 && fg.is_empty() {
        return Err(Error::Sampling(format!("{n_fg} foreground patches requested but the label map has no foreground")));
    }
    if n_bg > 0 && bg.is_empty() {
        return Err(Error::Sampling(format!("{n_bg} background patches requested but the label map has no background")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flags: Vec<bool> = std::iter::repeat(true).take(n_fg).chain(std::iter::repeat(false).take(n_bg)).collect();
    flags.shuffle(&mut rng);
    let shape = volume.shape();
    flags
        .into_iter()
        .map(|foreground| {
            let pool = if foreground { &fg } else { &bg };
            let flat = pool[rng.gen_range(0..pool.len())];
            let center = [flat / (shape[1] * shape[2]), (flat / shape[2]) % shape[1], flat % shape[2]];
            let start = [0, 1, 2].map(|a| center[a] as isize - (spec.patch_size[a] / 2) as isize);
            let (image, labels) = extract(volume, labels, start, spec.patch_size)?;
            Ok(Patch {
                image,
                labels,
                start,
                center,
                foreground,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(fg: bool) -> (Volume, LabelMap) {
        let shape = [10, 12, 9];
        let n = shape.iter().product();
        let v = Volume::new(shape, [1.0; 3], (0..n).map(|i| i as f64).collect()).unwrap();
        let labels: Vec<u8> = (0..n).map(|i| u8::from(fg && i % 7 == 0)).collect();
        (v, LabelMap::new(shape, [1.0; 3], labels, 1).unwrap())
    }

    #[test]
    fn one_to_one_ratio_splits_evenly() {
        let (v, l) = case(true);
        let patches = sample_patches(&v, &l, &PatchSpec::new([4, 4, 4], 8), 3).unwrap();
        assert_eq!(patches.len(), 8);
        assert_eq!(patches.iter().filter(|p| p.foreground).count(), 4);
        for p in &patches {
            let c = p.center;
            assert_eq!(l.get(c[0], c[1], c[2]) > 0, p.foreground);
            // the centre voxel of the patch is the sampled voxel
            assert_eq!(p.labels.get(2, 2, 2), l.get(c[0], c[1], c[2]));
            assert_eq!(p.image.get(2, 2, 2), v.get(c[0], c[1], c[2]));
        }
    }

    #[test]
    fn all_background_with_zero_ratio() {
        let (v, l) = case(false);
        let spec = PatchSpec { pos_neg_ratio: [0, 1], ..PatchSpec::new([3, 3, 3], 5) };
        let patches = sample_patches(&v, &l, &spec, 1).unwrap();
        assert!(patches.iter().all(|p| !p.foreground));
        assert!(matches!(sample_patches(&v, &l, &PatchSpec::new([3, 3, 3], 2), 1), Err(Error::Sampling(_))));
    }

    #[test]
    fn same_seed_same_origins() {
        let (v, l) = case(true);
        let spec = PatchSpec::new([16, 16, 16], 6);
        let a: Vec<_> = sample_patches(&v, &l, &spec, 11).unwrap().into_iter().map(|p| p.start).collect();
        let b: Vec<_> = sample_patches(&v, &l, &spec, 11).unwrap().into_iter().map(|p| p.start).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn pad_replicates_edges() {
        let v = Volume::new([1, 1, 2], [1.0; 3], vec![3.0, 5.0]).unwrap();
        let (p, before) = pad_to(&v, [3, 1, 4]).unwrap();
        assert_eq!(before, [1, 0, 1]);
        assert_eq!(p.shape(), [3, 1, 4]);
        assert_eq!(&p.data()[..4], &[3.0, 3.0, 5.0, 5.0]);
    }
}
