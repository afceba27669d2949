//! Named parameter store with per-parameter frozen flags.

use std::collections::BTreeMap;

use autoprosam_tape::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::archive::{Archive, DType, Entry, Role};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    /// Depthwise kernel `[C, 1, kd, kh, kw]` with a single unit tap at the
    /// centre `(kd/2, kh/2, kw/2)` of each filter.
    Delta,
}

/// Shape, policy and initialization of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub init: Init,
}

impl ParamDef {
    pub fn tunable(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            frozen: false,
            init,
        }
    }

    pub fn frozen(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            frozen: true,
            ..Self::tunable(name, shape, init)
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// RNG seeded from `(seed, name)`, so a parameter's initial value does not
/// depend on which other parameters exist.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

pub fn materialize(def: &ParamDef, seed: u64) -> Tensor {
    let n = def.numel();
    let normal = |std: f64| {
        let mut rng = named_rng(seed, &def.name);
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut rng)).collect::<Vec<f64>>()
    };
    let data = match def.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal { std } => normal(std),
        Init::He { fan_in } => normal((2.0 / fan_in.max(1) as f64).sqrt()),
        Init::Delta => {
            let s = &def.shape;
            assert_eq!(s.len(), 5, "delta init needs a 5-d kernel");
            let taps = s[2] * s[3] * s[4];
            let centre = ((s[2] / 2) * s[3] + s[3] / 2) * s[4] + s[4] / 2;
            let mut v = vec![0.0; n];
            for c in 0..n / taps {
                v[c * taps + centre] = 1.0;
            }
            v
        }
    };
    Tensor::from_vec(&def.shape, data).expect("shape matches numel")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` defined twice")));
        }
        self.params.insert(name, Param { value, frozen });
        Ok(())
    }

    /// Inserts freshly initialized parameters for every definition.
    pub fn extend_from_defs(&mut self, defs: &[ParamDef], seed: u64) -> Result<()> {
        for def in defs {
            self.insert(def.name.clone(), materialize(def, seed), def.frozen)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.params.get(name).map(|p| p.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        p.frozen = frozen;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn tunable_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, p)| !p.frozen).map(|(n, _)| n).collect()
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, p)| p.frozen).map(|(n, _)| n).collect()
    }

    /// `(tunable, frozen)` scalar counts.
    pub fn counts(&self) -> (usize, usize) {
        self.counts_where(|_| true)
    }

    pub fn counts_with_prefix(&self, prefix: &str) -> (usize, usize) {
        self.counts_where(|n| n.starts_with(prefix))
    }

    fn counts_where(&self, keep: impl Fn(&str) -> bool) -> (usize, usize) {
        self.iter().filter(|(n, _)| keep(n)).fold((0, 0), |(t, f), (_, p)| {
            if p.frozen {
                (t, f + p.value.numel())
            } else {
                (t + p.value.numel(), f)
            }
        })
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (name, p) in self.iter() {
            let role = if p.frozen { Role::Frozen } else { Role::Tunable };
            let entry = Entry::new(p.value.shape(), DType::F64, role, p.value.data().to_vec()).expect("shape matches data");
            a.insert(name, entry).expect("parameter names are valid archive names");
        }
        a
    }

    /// Reads every frozen or tunable entry; data entries are ignored.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let mut store = Self::new();
        for (name, e) in archive.iter() {
            let frozen = match e.role {
                Role::Frozen => true,
                Role::Tunable => false,
                Role::Data => continue,
            };
            let t = Tensor::from_vec(&e.shape, e.data.clone()).map_err(|err| Error::format(name, err.to_string()))?;
            store.insert(name, t, frozen)?;
        }
        Ok(store)
    }

    /// Checks that names, shapes and frozen flags agree with `defs` exactly.
    pub fn check_against(&self, defs: &[ParamDef]) -> Result<()> {
        for def in defs {
            let p = self.get(&def.name).ok_or_else(|| Error::Import {
                entry: def.name.clone(),
                detail: "missing".into(),
            })?;
            if p.value.shape() != def.shape.as_slice() {
                return Err(Error::Import {
                    entry: def.name.clone(),
                    detail: format!("expected shape {:?}, found {:?}", def.shape, p.value.shape()),
                });
            }
            if p.frozen != def.frozen {
                return Err(Error::Import {
                    entry: def.name.clone(),
                    detail: format!("frozen flag should be {}", def.frozen),
                });
            }
        }
        if self.len() != defs.len() {
            let extra = self.names().find(|n| !defs.iter().any(|d| d.name == *n)).unwrap_or("?");
            return Err(Error::Import {
                entry: extra.to_string(),
                detail: "not part of this model configuration".into(),
            });
        }
        Ok(())
    }
}
