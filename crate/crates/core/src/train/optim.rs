//! AdamW over the tunable subset of a parameter store, and the freeze policy.

use std::collections::BTreeMap;

use autoprosam_tape::Tensor;
use serde::{Deserialize, Serialize};

use super::schedule::OptimConfig;
use crate::archive::{Archive, DType, Entry, Role};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Only parameters not flagged frozen are updated.
    #[default]
    Standard,
    /// Everything is updated (for comparison runs).
    AllTunable,
}

impl FreezePolicy {
    pub fn trains(self, frozen: bool) -> bool {
        self == FreezePolicy::AllTunable || !frozen
    }
}

/// Zeroes gradients of frozen parameters under the standard policy.
pub fn apply_freeze_policy(
    params: &ParamStore,
    mut grads: BTreeMap<String, Tensor>,
    policy: FreezePolicy,
) -> Result<BTreeMap<String, Tensor>> {
    for (name, g) in grads.iter_mut() {
        let frozen = params
            .is_frozen(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
        if !policy.trains(frozen) {
            g.data_mut().fill(0.0);
        }
    }
    Ok(grads)
}

/// Whether decoupled weight decay applies to a parameter.
pub fn decays(name: &str) -> bool {
    !(name.contains(".norm") || name.ends_with("table_depth"))
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Names that have optimizer state.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// One update with learning rate `lr`. Parameters the policy does not
    /// train are skipped and never get state.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &OptimConfig,
        policy: FreezePolicy,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (name, g) in grads {
            let frozen = params
                .is_frozen(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if !policy.trains(frozen) {
                continue;
            }
            let p = params.tensor_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient for `{name}` is {:?}, parameter is {:?}", g.shape(), p.shape())));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                *w -= lr * wd * *w;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Stores moments as data entries `optim.m.<name>` / `optim.v.<name>`.
    pub fn save_into(&self, archive: &mut Archive) -> Result<()> {
        archive.set_meta("optim_step", self.step)?;
        for (name, st) in &self.state {
            for (tag, data) in [("m", &st.m), ("v", &st.v)] {
                archive.insert(
                    &format!("optim.{tag}.{name}"),
                    Entry::new(&[data.len()], DType::F64, Role::Data, data.clone())?,
                )?;
            }
        }
        Ok(())
    }

    pub fn load_from(archive: &Archive) -> Result<Self> {
        let step = archive
            .meta("optim_step")
            .ok_or_else(|| Error::format("optim_step", "checkpoint has no optimizer state"))?
            .parse()
            .map_err(|_| Error::format("optim_step", "not an integer"))?;
        let mut state = BTreeMap::new();
        for (key, e) in archive.iter() {
            if let Some(name) = key.strip_prefix("optim.m.") {
                let v = archive
                    .get(&format!("optim.v.{name}"))
                    .ok_or_else(|| Error::format(key, "second moment missing"))?;
                state.insert(
                    name.to_string(),
                    Moments {
                        m: e.data.clone(),
                        v: v.data.clone(),
                    },
                );
            }
        }
        Ok(Self { step, state })
    }
}
