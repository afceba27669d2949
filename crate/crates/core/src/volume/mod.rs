//! Volumetric data: containers, file formats, and the preprocessing chain
//! (resampling, intensity windowing, patch sampling, augmentation).

pub mod augment;
pub mod io;
pub mod manifest;
pub mod nifti;
pub mod patches;
pub mod preprocess;
pub mod resample;

use crate::{Error, Result};

/// Voxel spacing in millimetres, ordered `(sz, sy, sx)` to match `(d, h, w)`.
pub type Spacing = [f64; 3];

pub fn validate_spacing(spacing: &Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::format("spacing", format!("all components must be positive and finite, got {spacing:?}")))
    }
}

#[inline]
pub fn flat_index(shape: [usize; 3], d: usize, h: usize, w: usize) -> usize {
    (d * shape[1] + h) * shape[2] + w
}

/// Dense scalar grid indexed `(d, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Vec<f64>,
    shape: [usize; 3],
    spacing: Spacing,
    origin: Option<[f64; 3]>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        validate_spacing(&spacing)?;
        let n: usize = shape.iter().product();
        if n != data.len() || n == 0 {
            return Err(Error::Shape(format!("volume shape {shape:?} needs {n} > 0 voxels, got {}", data.len())));
        }
        Ok(Self {
            data,
            shape,
            spacing,
            origin: None,
        })
    }

    pub fn filled(shape: [usize; 3], spacing: Spacing, value: f64) -> Result<Self> {
        Self::new(shape, spacing, vec![value; shape.iter().product()])
    }

    pub fn with_origin(mut self, origin: Option<[f64; 3]>) -> Self {
        self.origin = origin;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn origin(&self) -> Option<[f64; 3]> {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f64 {
        self.data[flat_index(self.shape, d, h, w)]
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }
}

/// Integer class annotation; values lie in `0..=num_classes` with 0 as background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    data: Vec<u8>,
    shape: [usize; 3],
    spacing: Spacing,
    num_classes: u8,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], spacing: Spacing, data: Vec<u8>, num_classes: u8) -> Result<Self> {
        validate_spacing(&spacing)?;
        let n: usize = shape.iter().product();
        if n != data.len() || n == 0 {
            return Err(Error::Shape(format!("label shape {shape:?} needs {n} > 0 voxels, got {}", data.len())));
        }
        if let Some(&max) = data.iter().max().filter(|&&m| m > num_classes) {
            return Err(Error::Contract(format!("label value {max} exceeds class count {num_classes}")));
        }
        Ok(Self {
            data,
            shape,
            spacing,
            num_classes,
        })
    }

    /// Builds a label map whose class count is the largest value present.
    pub fn from_data(shape: [usize; 3], spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        let k = data.iter().copied().max().unwrap_or(0);
        Self::new(shape, spacing, data, k)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.data[flat_index(self.shape, d, h, w)]
    }

    pub fn with_num_classes(mut self, k: u8) -> Result<Self> {
        if self.data.iter().any(|&v| v > k) {
            return Err(Error::Contract(format!("labels exceed class count {k}")));
        }
        self.num_classes = k;
        Ok(self)
    }

    /// Voxel count per class value `0..=num_classes`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes as usize + 1];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    /// Binary mask of one class.
    pub fn mask(&self, class_id: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class_id).collect()
    }
}
