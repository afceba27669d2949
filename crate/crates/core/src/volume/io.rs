//! Volume file dispatch: NIfTI-1 (`.nii`, `.nii.gz`) or the raw archive
//! format (`.vol`, any other extension) holding `image` and optional `labels`.

use std::path::Path;

use super::nifti::{self, DataType, NiftiImage};
use super::{validate_spacing, LabelMap, Spacing, Volume};
use crate::archive::{Archive, DType, Entry, Role};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    NiftiGz,
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Self {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
        if name.ends_with(".nii.gz") {
            VolumeFormat::NiftiGz
        } else if name.ends_with(".nii") {
            VolumeFormat::Nifti
        } else {
            VolumeFormat::Raw
        }
    }
}

fn spacing_meta(s: &Spacing) -> String {
    format!("{} {} {}", s[0], s[1], s[2])
}

fn parse_triple(field: &str, value: Option<&str>) -> Result<[f64; 3]> {
    let value = value.ok_or_else(|| Error::format(field, "missing"))?;
    let parts: Vec<f64> = value
        .split_whitespace()
        .map(|p| p.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(field, format!("cannot parse {value:?}")))?;
    parts.try_into().map_err(|_| Error::format(field, "expected three components"))
}

fn shape3(entry: &Entry, name: &str) -> Result<[usize; 3]> {
    entry
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::format(name, format!("expected a 3-D array, got {:?}", entry.shape)))
}

/// Decodes a raw-archive volume from memory.
pub fn decode_raw(bytes: &[u8]) -> Result<(Volume, Option<LabelMap>)> {
    let archive = Archive::from_bytes(bytes)?;
    let spacing = parse_triple("spacing", archive.meta("spacing"))?;
    validate_spacing(&spacing)?;
    let origin = archive.meta("origin").map(|o| parse_triple("origin", Some(o))).transpose()?;
    let image = archive.get("image").ok_or_else(|| Error::format("image", "entry missing"))?;
    let shape = shape3(image, "image")?;
    let volume = Volume::new(shape, spacing, image.data.clone())?.with_origin(origin);
    let labels = match archive.get("labels") {
        Some(l) => {
            if shape3(l, "labels")? != shape {
                return Err(Error::format("labels", "shape differs from image"));
            }
            let data: Vec<u8> = l.data.iter().map(|&v| v as u8).collect();
            let k = match archive.meta("num_classes") {
                Some(k) => k.parse().map_err(|_| Error::format("num_classes", "not an integer"))?,
                None => data.iter().copied().max().unwrap_or(0),
            };
            Some(LabelMap::new(shape, spacing, data, k)?)
        }
        None => None,
    };
    Ok((volume, labels))
}

pub fn encode_raw(volume: &Volume, labels: Option<&LabelMap>) -> Result<Vec<u8>> {
    let mut a = Archive::new();
    a.set_meta("spacing", spacing_meta(&volume.spacing()))?;
    if let Some(o) = volume.origin() {
        a.set_meta("origin", spacing_meta(&o))?;
    }
    a.insert("image", Entry::new(&volume.shape(), DType::F64, Role::Data, volume.data().to_vec())?)?;
    if let Some(l) = labels {
        if l.shape() != volume.shape() {
            return Err(Error::Shape("labels and image shapes differ".into()));
        }
        a.set_meta("num_classes", l.num_classes())?;
        a.insert("labels", Entry::new(&l.shape(), DType::U8, Role::Data, l.data().iter().map(|&v| v as f64).collect())?)?;
    }
    Ok(a.to_bytes())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads an image volume; raw archives may also carry labels.
pub fn load_volume(path: &Path) -> Result<(Volume, Option<LabelMap>)> {
    let bytes = read(path)?;
    match VolumeFormat::from_path(path) {
        VolumeFormat::Raw if !nifti::is_gzip(&bytes) => decode_raw(&bytes),
        _ => {
            let img = nifti::decode(&bytes)?;
            Ok((Volume::new(img.shape, img.spacing, img.data)?.with_origin(img.origin), None))
        }
    }
}

/// Loads a label map from a NIfTI file or the `labels` entry of a raw archive.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let bytes = read(path)?;
    match VolumeFormat::from_path(path) {
        VolumeFormat::Raw if !nifti::is_gzip(&bytes) => {
            decode_raw(&bytes)?.1.ok_or_else(|| Error::format("labels", format!("{} has no label entry", path.display())))
        }
        _ => {
            let img = nifti::decode(&bytes)?;
            if img.data.iter().any(|v| v.fract() != 0.0 || !(0.0..=255.0).contains(v)) {
                return Err(Error::format("labels", "label voxels must be integers in 0..=255"));
            }
            LabelMap::from_data(img.shape, img.spacing, img.data.iter().map(|&v| v as u8).collect())
        }
    }
}

pub fn save_volume(path: &Path, volume: &Volume, labels: Option<&LabelMap>) -> Result<()> {
    let format = VolumeFormat::from_path(path);
    if format == VolumeFormat::Raw {
        return write(path, &encode_raw(volume, labels)?);
    }
    if labels.is_some() {
        return Err(Error::Contract("NIfTI files hold one array; save labels separately".into()));
    }
    let bytes = nifti::encode(&NiftiImage {
        shape: volume.shape(),
        spacing: volume.spacing(),
        origin: volume.origin(),
        datatype: DataType::F64,
        data: volume.data().to_vec(),
    })?;
    write(path, &if format == VolumeFormat::NiftiGz { nifti::gzip(&bytes) } else { bytes })
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let format = VolumeFormat::from_path(path);
    if format == VolumeFormat::Raw {
        let carrier = Volume::filled(labels.shape(), labels.spacing(), 0.0)?;
        return write(path, &encode_raw(&carrier, Some(labels))?);
    }
    let bytes = nifti::encode(&NiftiImage {
        shape: labels.shape(),
        spacing: labels.spacing(),
        origin: None,
        datatype: DataType::U8,
        data: labels.data().iter().map(|&v| v as f64).collect(),
    })?;
    write(path, &if format == VolumeFormat::NiftiGz { nifti::gzip(&bytes) } else { bytes })
}
