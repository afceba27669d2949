//! Named-array container used for checkpoints and raw volumes.
//!
//! A file is a plain-text manifest followed by a little-endian payload:
//!
//! ```text
//! APSARCH 1
//! meta epoch 12
//! tensor encoder.block0.attn.qkv.weight f64 32x96 0 frozen
//! tensor encoder.block0.adapter.up.weight f64 8x32 24576 tunable
//! end
//! <payload bytes>
//! ```
//!
//! Tensor lines are `tensor <name> <dtype> <dims> <byte offset> <role>` where
//! `dims` is `x`-separated, the offset is relative to the first payload byte,
//! and `role` is one of `frozen`, `tunable`, `data`. Meta lines are
//! `meta <key> <value>` with the value running to end of line.
//!
//! Parameter names are dotted paths, e.g. `encoder.block3.attn.qkv.weight`,
//! `apg.enc0.conv1.weight`, `decoder.proj_final.bias`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

const MAGIC: &str = "APSARCH 1";
/// Refuse manifests that declare absurd element counts.
const MAX_ELEMENTS: usize = 1 << 34;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
    U8,
}

impl DType {
    pub fn tag(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
            DType::U8 => "u8",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f64" => Some(DType::F64),
            "f32" => Some(DType::F32),
            "u8" => Some(DType::U8),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Frozen,
    Tunable,
    Data,
}

impl Role {
    fn tag(self) -> &'static str {
        match self {
            Role::Frozen => "frozen",
            Role::Tunable => "tunable",
            Role::Data => "data",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "frozen" => Some(Role::Frozen),
            "tunable" => Some(Role::Tunable),
            "data" => Some(Role::Data),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub role: Role,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn new(shape: &[usize], dtype: DType, role: Role, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("entry shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self {
            shape: shape.to_vec(),
            dtype,
            role,
            data,
        })
    }
}

/// Ordered collection of named arrays plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, Entry>,
    meta: BTreeMap<String, String>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, entry: Entry) -> Result<()> {
        if !valid_token(name) {
            return Err(Error::format("name", format!("invalid entry name {name:?}")));
        }
        if entry.dtype == DType::U8 && entry.data.iter().any(|v| v.fract() != 0.0 || !(0.0..=255.0).contains(v)) {
            return Err(Error::format(name, "u8 entry holds non-byte values"));
        }
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let value = value.to_string();
        if !valid_token(key) || value.contains('\n') || value.contains('\r') {
            return Err(Error::format("meta", format!("invalid metadata pair {key:?}")));
        }
        self.meta.insert(key.to_string(), value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Entry> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(header, "meta {k} {v}");
        }
        let mut offset = 0usize;
        for (name, e) in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() { "1".to_string() } else { dims.join("x") };
            let _ = writeln!(header, "tensor {name} {} {dims} {offset} {}", e.dtype.tag(), e.role.tag());
            offset += e.data.len() * e.dtype.size();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for e in self.entries.values() {
            match e.dtype {
                DType::F64 => e.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => e.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
                DType::U8 => out.extend(e.data.iter().map(|v| *v as u8)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = |what: &str| -> Result<&str> {
            let rest = &bytes[pos.min(bytes.len())..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format("manifest", format!("unterminated manifest while reading {what}")))?;
            let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("manifest", "manifest is not UTF-8"))?;
            pos += end + 1;
            Ok(line)
        };
        if next_line("magic")? != MAGIC {
            return Err(Error::format("magic", format!("expected `{MAGIC}`")));
        }
        let mut archive = Archive::new();
        let mut layout: Vec<(String, Vec<usize>, DType, usize, usize, Role)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut lineno = 1;
        loop {
            lineno += 1;
            let line = next_line("entries")?;
            if line == "end" {
                break;
            }
            let bad = |detail: &str| Error::format(format!("manifest line {lineno}"), detail.to_string());
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                if !valid_token(k) || archive.meta.contains_key(k) {
                    return Err(bad("invalid or duplicate meta key"));
                }
                archive.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 6 || fields[0] != "tensor" {
                return Err(bad("expected `tensor <name> <dtype> <dims> <offset> <role>`"));
            }
            let name = fields[1];
            if !valid_token(name) {
                return Err(bad("invalid entry name"));
            }
            let dtype = DType::parse(fields[2]).ok_or_else(|| bad("unknown dtype"))?;
            let shape = fields[3]
                .split('x')
                .map(|d| d.parse::<usize>().ok())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("malformed dims"))?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= MAX_ELEMENTS)
                .ok_or_else(|| bad("dims overflow"))?;
            let offset: usize = fields[4].parse().map_err(|_| bad("malformed offset"))?;
            let role = Role::parse(fields[5]).ok_or_else(|| bad("unknown role"))?;
            if !seen.insert(name) {
                return Err(Error::format(name, "duplicate entry name"));
            }
            layout.push((name.to_string(), shape, dtype, offset, numel, role));
        }
        let payload = &bytes[pos.min(bytes.len())..];
        for (name, shape, dtype, offset, numel, role) in layout {
            let len = numel * dtype.size();
            let end = offset.checked_add(len).filter(|&e| e <= payload.len()).ok_or_else(|| {
                Error::format(name.clone(), format!("payload range {offset}+{len} exceeds {} bytes", payload.len()))
            })?;
            let raw = &payload[offset..end];
            let data: Vec<f64> = match dtype {
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                DType::U8 => raw.iter().map(|&b| b as f64).collect(),
            };
            archive.entries.insert(name, Entry { shape, dtype, role, data });
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
