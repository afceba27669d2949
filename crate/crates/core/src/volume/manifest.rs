//! Dataset manifest: one case per line, `image<TAB>label<TAB>split`.
//! Blank lines and `#` comments are ignored. Relative paths resolve against
//! the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::format("split", format!("unknown split tag {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
}

impl ManifestEntry {
    /// Case identifier: the image file name without volume extensions.
    pub fn case_id(&self) -> String {
        let name = self.image.file_name().and_then(|n| n.to_str()).unwrap_or("case");
        for ext in [".nii.gz", ".nii", ".vol"] {
            if let Some(stem) = name.strip_suffix(ext) {
                return stem.to_string();
            }
        }
        name.to_string()
    }
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') { line.split('\t').map(str::trim).collect() } else { line.split_whitespace().collect() };
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::format(format!("manifest line {}", i + 1), "expected `image<TAB>label<TAB>split`"));
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        out.push(ManifestEntry {
            image: resolve(fields[0]),
            label: resolve(fields[1]),
            split: fields[2].parse().map_err(|_| Error::format(format!("manifest line {}", i + 1), format!("unknown split tag {:?}", fields[2])))?,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes paths relative to `base` when possible.
pub fn render_manifest(entries: &[ManifestEntry], base: &Path) -> String {
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut s = String::from("# image\tlabel\tsplit\n");
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\n", rel(&e.image), rel(&e.label), e.split));
    }
    s
}
