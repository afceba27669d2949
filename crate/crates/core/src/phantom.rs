//! Deterministic desk-scale test assets: labelled multi-organ phantoms and
//! surrogate 2D encoder checkpoints.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, DType, Entry, Role};
use crate::encoder::{surrogate_2d_shapes, EncoderConfig};
use crate::params::named_rng;
use crate::volume::manifest::{render_manifest, ManifestEntry, Split};
use crate::volume::{io, validate_spacing, LabelMap, Volume};
use crate::{Error, Result};

pub const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    #[default]
    Sphere,
    Ellipsoid,
    Box,
}

/// Explicit organ geometry in voxel coordinates `(d, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub center: [f64; 3],
    /// Semi-axes for spheres and ellipsoids, half-widths for boxes.
    pub radii: [f64; 3],
}

impl Placement {
    pub fn contains(&self, family: ShapeFamily, p: [usize; 3]) -> bool {
        let q = [0, 1, 2].map(|a| (p[a] as f64 - self.center[a]) / self.radii[a]);
        match family {
            ShapeFamily::Sphere | ShapeFamily::Ellipsoid => q.iter().map(|x| x * x).sum::<f64>() <= 1.0,
            ShapeFamily::Box => q.iter().all(|x| x.abs() <= 1.0),
        }
    }

    /// Inclusive voxel bounding box clipped to the grid.
    fn bounds(&self, grid: [usize; 3]) -> [(usize, usize); 3] {
        [0, 1, 2].map(|a| {
            let lo = (self.center[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.radii[a]).ceil().max(0.0) as usize).min(grid[a] - 1);
            (lo.min(grid[a] - 1), hi)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid_shape: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing_mm: [f64; 3],
    #[serde(default = "one")]
    pub num_organs: usize,
    #[serde(default)]
    pub shape_family: ShapeFamily,
    /// Mean intensity per organ; empty spreads them evenly over `[100, 250]`.
    #[serde(default)]
    pub organ_intensity: Vec<f64>,
    #[serde(default = "default_background")]
    pub background_intensity: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Range of sampled radii in voxels.
    #[serde(default = "default_radius_range")]
    pub radius_range_vox: [f64; 2],
    /// Fixed geometry; when non-empty it must list one placement per organ.
    #[serde(default)]
    pub placements: Vec<Placement>,
    #[serde(default)]
    pub seed: u64,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn one() -> usize {
    1
}

fn default_background() -> f64 {
    -100.0
}

fn default_radius_range() -> [f64; 2] {
    [4.0, 8.0]
}

impl PhantomSpec {
    pub fn new(grid_shape: [usize; 3], num_organs: usize, seed: u64) -> Self {
        Self {
            grid_shape,
            spacing_mm: unit_spacing(),
            num_organs,
            shape_family: ShapeFamily::Sphere,
            organ_intensity: Vec::new(),
            background_intensity: default_background(),
            noise_sigma: 0.0,
            radius_range_vox: default_radius_range(),
            placements: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.grid_shape.iter().position(|&n| n < 8) {
            return Err(Error::config("grid_shape", format!("axis {a} has {} voxels, need at least 8", self.grid_shape[a])));
        }
        validate_spacing(&self.spacing_mm).map_err(|_| Error::config("spacing_mm", "components must be positive"))?;
        if self.num_organs == 0 || self.num_organs > 255 {
            return Err(Error::config("num_organs", "must be in 1..=255"));
        }
        if !self.organ_intensity.is_empty() && self.organ_intensity.len() != self.num_organs {
            return Err(Error::config("organ_intensity", format!("needs {} values", self.num_organs)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be finite and nonnegative"));
        }
        let [lo, hi] = self.radius_range_vox;
        if !(lo.is_finite() && hi.is_finite() && 0.5 <= lo && lo <= hi) {
            return Err(Error::config("radius_range_vox", "need 0.5 <= lo <= hi"));
        }
        if !self.placements.is_empty() && self.placements.len() != self.num_organs {
            return Err(Error::config("placements", format!("needs {} entries", self.num_organs)));
        }
        if self.placements.iter().any(|p| p.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) || p.center.iter().any(|c| !c.is_finite())) {
            return Err(Error::config("placements", "radii must be positive and centres finite"));
        }
        Ok(())
    }

    pub fn intensity(&self, organ: usize) -> f64 {
        if let Some(v) = self.organ_intensity.get(organ - 1) {
            return *v;
        }
        if self.num_organs == 1 {
            150.0
        } else {
            100.0 + 150.0 * (organ - 1) as f64 / (self.num_organs - 1) as f64
        }
    }
}

/// Rasterizes `p` as `label`, refusing overlap with or 26-adjacency to any
/// other organ. Returns the voxel indices written, or `None` on conflict.
fn try_place(labels: &mut [u8], grid: [usize; 3], family: ShapeFamily, p: &Placement, label: u8) -> Option<usize> {
    let b = p.bounds(grid);
    let mut voxels = Vec::new();
    for d in b[0].0..=b[0].1 {
        for h in b[1].0..=b[1].1 {
            for w in b[2].0..=b[2].1 {
                if p.contains(family, [d, h, w]) {
                    voxels.push([d, h, w]);
                }
            }
        }
    }
    if voxels.is_empty() {
        return None;
    }
    for &[d, h, w] in &voxels {
        for dd in d.saturating_sub(1)..=(d + 1).min(grid[0] - 1) {
            for hh in h.saturating_sub(1)..=(h + 1).min(grid[1] - 1) {
                for ww in w.saturating_sub(1)..=(w + 1).min(grid[2] - 1) {
                    let l = labels[(dd * grid[1] + hh) * grid[2] + ww];
                    if l != 0 && l != label {
                        return None;
                    }
                }
            }
        }
    }
    for &[d, h, w] in &voxels {
        labels[(d * grid[1] + h) * grid[2] + w] = label;
    }
    Some(voxels.len())
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let grid = spec.grid_shape;
    let n: usize = grid.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = vec![0u8; n];
    for organ in 1..=spec.num_organs {
        let label = organ as u8;
        if let Some(p) = spec.placements.get(organ - 1) {
            if try_place(&mut labels, grid, spec.shape_family, p, label).is_none() {
                return Err(Error::Placement { organ, attempts: 1 });
            }
            continue;
        }
        let [lo, hi] = spec.radius_range_vox;
        let placed = (0..PLACEMENT_ATTEMPTS).any(|_| {
            let r0 = rng.gen_range(lo..=hi);
            let radii = match spec.shape_family {
                ShapeFamily::Sphere => [r0; 3],
                _ => [r0, rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)],
            };
            let mut center = [0.0; 3];
            for a in 0..3 {
                let (cmin, cmax) = (radii[a].ceil(), grid[a] as f64 - 1.0 - radii[a].ceil());
                if cmin > cmax {
                    return false;
                }
                center[a] = rng.gen_range(cmin..=cmax).round();
            }
            try_place(&mut labels, grid, spec.shape_family, &Placement { center, radii }, label).is_some()
        });
        if !placed {
            return Err(Error::Placement {
                organ,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let data = labels
        .iter()
        .map(|&l| {
            let base = if l == 0 { spec.background_intensity } else { spec.intensity(l as usize) };
            if spec.noise_sigma > 0.0 {
                base + noise.sample(&mut rng)
            } else {
                base
            }
        })
        .collect();
    Ok((
        Volume::new(grid, spec.spacing_mm, data)?,
        LabelMap::new(grid, spec.spacing_mm, labels, spec.num_organs as u8)?,
    ))
}

/// Seeded pseudo-random stand-in for a pretrained 2D encoder, containing
/// every entry [`crate::encoder::import_2d_checkpoint`] expects.
pub fn generate_surrogate_2d_checkpoint(cfg: &EncoderConfig, seed: u64) -> Archive {
    let mut archive = Archive::new();
    for (name, shape) in surrogate_2d_shapes(cfg) {
        let n: usize = shape.iter().product();
        let (mean, std) = if name.ends_with("pos_embed") {
            (0.0, 0.1)
        } else if name.contains(".norm") {
            (if name.ends_with(".weight") { 1.0 } else { 0.0 }, 0.1)
        } else if name.ends_with(".bias") {
            (0.0, 0.02)
        } else {
            let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
            (0.0, 1.0 / (fan_in as f64).sqrt())
        };
        let mut rng = named_rng(seed, &name);
        let dist = Normal::new(mean, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let entry = Entry::new(&shape, DType::F64, Role::Frozen, data).expect("shape matches data");
        archive.insert(&name, entry).expect("valid name");
    }
    archive.set_meta("kind", "surrogate_2d").expect("valid meta");
    archive.set_meta("seed", seed).expect("valid meta");
    archive
}

/// A batch of phantom cases with split assignment, as read by `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub train_cases: usize,
    #[serde(default)]
    pub val_cases: usize,
    #[serde(default)]
    pub test_cases: usize,
    /// Case `i` uses `phantom.seed + i`.
    pub phantom: PhantomSpec,
}

impl DatasetSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::config(toml_error_key(&e, text), e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_cases + self.val_cases + self.test_cases == 0 {
            return Err(Error::config("train_cases", "dataset has no cases"));
        }
        self.phantom.validate().map_err(|e| match e {
            Error::Config { key, detail } => Error::config(format!("phantom.{key}"), detail),
            other => other,
        })
    }

    pub fn cases(&self) -> impl Iterator<Item = (usize, Split)> + '_ {
        let splits = std::iter::repeat(Split::Train)
            .take(self.train_cases)
            .chain(std::iter::repeat(Split::Val).take(self.val_cases))
            .chain(std::iter::repeat(Split::Test).take(self.test_cases));
        splits.enumerate()
    }
}

/// Best-effort dotted name of the offending key in a TOML error, prefixed
/// with the table it appears under.
pub fn toml_error_key(e: &toml::de::Error, text: &str) -> String {
    let msg = e.message();
    let field = ["unknown field `", "missing field `"]
        .iter()
        .find_map(|marker| msg.split(marker).nth(1).and_then(|rest| rest.split('`').next()));
    let table = e.span().map(|span| {
        let before = &text[..span.start.min(text.len())];
        before
            .lines()
            .rev()
            .map(str::trim)
            .find(|l| l.starts_with('[') && l.ends_with(']'))
            .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
            .unwrap_or_default()
    });
    match (table.filter(|t| !t.is_empty()), field) {
        (Some(t), Some(f)) => format!("{t}.{f}"),
        (None, Some(f)) => f.to_string(),
        (Some(t), None) => t,
        (None, None) => "config".to_string(),
    }
}

/// Writes every case as `caseNNN.vol` / `caseNNN_seg.vol` plus a manifest.
pub fn write_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    for (i, split) in spec.cases() {
        let case = PhantomSpec {
            seed: spec.phantom.seed.wrapping_add(i as u64),
            ..spec.phantom.clone()
        };
        let (vol, labels) = generate_phantom(&case)?;
        let image = out_dir.join(format!("case{i:03}.vol"));
        let label = out_dir.join(format!("case{i:03}_seg.vol"));
        io::save_volume(&image, &vol, None)?;
        io::save_labels(&label, &labels)?;
        entries.push(ManifestEntry { image, label, split });
    }
    let manifest = out_dir.join("manifest.tsv");
    std::fs::write(&manifest, render_manifest(&entries, out_dir)).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
