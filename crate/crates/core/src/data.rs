//! Manifest-driven case loading with the preprocessing chain applied.

use std::path::Path;

use crate::eval::Case;
use crate::volume::io::{load_labels, load_volume};
use crate::volume::manifest::{read_manifest, ManifestEntry, Split};
use crate::volume::preprocess::{clip_and_normalize, PreprocessConfig};
use crate::volume::resample::resample;
use crate::{Error, Result};

/// Resamples to the target spacing, then clips and normalizes intensities.
pub fn load_case(entry: &ManifestEntry, cfg: &PreprocessConfig) -> Result<Case> {
    cfg.validate()?;
    let (image, embedded) = load_volume(&entry.image)?;
    let labels = if entry.label.as_os_str().is_empty() {
        embedded
    } else if entry.label.is_file() {
        Some(load_labels(&entry.label)?)
    } else {
        log::warn!("label file {} not found", entry.label.display());
        embedded
    };
    if let Some(l) = &labels {
        if l.shape() != image.shape() {
            return Err(Error::Shape(format!(
                "{}: image {:?} vs labels {:?}",
                entry.case_id(),
                image.shape(),
                l.shape()
            )));
        }
    }
    let (image, labels) = resample(&image, labels.as_ref(), cfg.target_spacing_mm)?;
    Ok(Case {
        id: entry.case_id(),
        image: clip_and_normalize(&image, cfg)?,
        labels,
    })
}

/// Loads every manifest entry of `split`.
pub fn load_split(manifest: &Path, split: Split, cfg: &PreprocessConfig) -> Result<Vec<Case>> {
    read_manifest(manifest)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_case(e, cfg))
        .collect()
}
