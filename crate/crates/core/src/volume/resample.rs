//! Resampling to a fixed voxel spacing.
//!
//! Voxel `j` of the output sits at physical offset `j * target` from the
//! shared origin (the centre of voxel 0), i.e. at continuous input index
//! `j * target / source`. Positions past the last input voxel clamp to it.

use super::{flat_index, validate_spacing, LabelMap, Spacing, Volume};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Trilinear,
}

pub fn output_shape(shape: [usize; 3], from: Spacing, to: Spacing) -> [usize; 3] {
    [0, 1, 2].map(|a| ((shape[a] as f64 * from[a] / to[a]).round() as usize).max(1))
}

/// Continuous source coordinate of output index `j`.
fn source_coord(j: usize, n_in: usize, from: f64, to: f64) -> f64 {
    (j as f64 * to / from).min((n_in - 1) as f64)
}

fn linear_taps(n_in: usize, n_out: usize, from: f64, to: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|j| {
            let x = source_coord(j, n_in, from, to);
            let i0 = x.floor() as usize;
            (i0, (i0 + 1).min(n_in - 1), x - i0 as f64)
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize, from: f64, to: f64) -> Vec<usize> {
    (0..n_out)
        .map(|j| ((source_coord(j, n_in, from, to) + 0.5).floor() as usize).min(n_in - 1))
        .collect()
}

fn resample_image(v: &Volume, to: Spacing, mode: Interpolation) -> Result<Volume> {
    let from = v.spacing();
    let shape = v.shape();
    let out = output_shape(shape, from, to);
    let mut data = Vec::with_capacity(out.iter().product());
    match mode {
        Interpolation::Trilinear => {
            let t = [0, 1, 2].map(|a| linear_taps(shape[a], out[a], from[a], to[a]));
            let at = |d, h, w| v.data()[flat_index(shape, d, h, w)];
            for &(z0, z1, tz) in &t[0] {
                for &(y0, y1, ty) in &t[1] {
                    for &(x0, x1, tx) in &t[2] {
                        let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
                        let row = |z, y| lerp(at(z, y, x0), at(z, y, x1), tx);
                        let p0 = lerp(row(z0, y0), row(z0, y1), ty);
                        let p1 = lerp(row(z1, y0), row(z1, y1), ty);
                        data.push(lerp(p0, p1, tz));
                    }
                }
            }
        }
        Interpolation::Nearest => {
            let t = [0, 1, 2].map(|a| nearest_taps(shape[a], out[a], from[a], to[a]));
            for &z in &t[0] {
                for &y in &t[1] {
                    for &x in &t[2] {
                        data.push(v.data()[flat_index(shape, z, y, x)]);
                    }
                }
            }
        }
    }
    Ok(Volume::new(out, to, data)?.with_origin(v.origin()))
}

fn resample_labels(l: &LabelMap, to: Spacing) -> Result<LabelMap> {
    let (from, shape) = (l.spacing(), l.shape());
    let out = output_shape(shape, from, to);
    let t = [0, 1, 2].map(|a| nearest_taps(shape[a], out[a], from[a], to[a]));
    let mut data = Vec::with_capacity(out.iter().product());
    for &z in &t[0] {
        for &y in &t[1] {
            for &x in &t[2] {
                data.push(l.data()[flat_index(shape, z, y, x)]);
            }
        }
    }
    LabelMap::new(out, to, data, l.num_classes())
}

/// Resamples an image (with the given interpolation) and, if present, its
/// labels (always nearest neighbour) onto `target` spacing.
pub fn resample_with(
    volume: &Volume,
    labels: Option<&LabelMap>,
    target: Spacing,
    mode: Interpolation,
) -> Result<(Volume, Option<LabelMap>)> {
    validate_spacing(&target)?;
    if let Some(l) = labels {
        if l.shape() != volume.shape() {
            return Err(Error::Shape(format!("labels {:?} vs image {:?}", l.shape(), volume.shape())));
        }
    }
    let v = resample_image(volume, target, mode)?;
    let l = labels.map(|l| resample_labels(l, target)).transpose()?;
    Ok((v, l))
}

pub fn resample(volume: &Volume, labels: Option<&LabelMap>, target: Spacing) -> Result<(Volume, Option<LabelMap>)> {
    resample_with(volume, labels, target, Interpolation::Trilinear)
}
