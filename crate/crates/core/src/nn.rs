//! Graph-building context: binds stored parameters as tape leaves and
//! provides the small set of layers the model is assembled from.

use std::collections::BTreeMap;

use autoprosam_tape::{ConvSpec, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

pub struct Ctx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    track_grads: bool,
    frozen_grads: bool,
}

impl<'a> Ctx<'a> {
    /// With `track_grads` false no parameter receives a gradient, which is
    /// the inference mode.
    pub fn new(store: &'a ParamStore, track_grads: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            track_grads,
            frozen_grads: false,
        }
    }

    /// Also tracks gradients of frozen parameters (all-tunable runs).
    pub fn with_frozen_grads(mut self, on: bool) -> Self {
        self.frozen_grads = on;
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Binds a parameter once; later calls return the same leaf.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("model has no parameter `{name}`")))?;
        let v = self.graph.leaf(p.value.clone(), self.track_grads && (self.frozen_grads || !p.frozen));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of a scalar with respect to every bound tunable parameter.
    /// Parameters that did not influence the output get zero gradients.
    pub fn gradients(&self, output: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut g = self.graph.backward(output)?;
        let mut out = BTreeMap::new();
        for (name, v) in &self.bound {
            if self.graph.requires_grad(*v) {
                let t = g.take(*v).unwrap_or_else(|| Tensor::zeros(self.graph.shape(*v)));
                out.insert(name.clone(), t);
            }
        }
        Ok(out)
    }

    /// `x @ W (+ b)` over the last axis; weights are stored `[in, out]`.
    pub fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let mut y = self.graph.matmul(x, w)?;
        if bias {
            let b = self.param(&format!("{prefix}.bias"))?;
            let axis = self.graph.shape(y).len() - 1;
            y = self.graph.add_bias(y, b, axis)?;
        }
        Ok(y)
    }

    pub fn conv(&mut self, x: Var, prefix: &str, spec: ConvSpec, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.param(&format!("{prefix}.bias"))?) } else { None };
        Ok(self.graph.conv3d(x, w, b, spec)?)
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(self.graph.layer_norm(x, g, b, LN_EPS)?)
    }

    /// Layer norm over the channel axis of a `[B, C, D, H, W]` map.
    pub fn channel_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let t = self.graph.permute(x, &[0, 2, 3, 4, 1])?;
        let t = self.layer_norm(t, prefix)?;
        Ok(self.graph.permute(t, &[0, 4, 1, 2, 3])?)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Gelu => self.graph.gelu(x),
            Activation::Identity => x,
        }
    }

    /// `conv -> channel LN -> GELU`.
    pub fn conv_norm_act(&mut self, x: Var, conv: &str, norm: &str, spec: ConvSpec) -> Result<Var> {
        let y = self.conv(x, conv, spec, true)?;
        let y = self.channel_norm(y, norm)?;
        Ok(self.graph.gelu(y))
    }
}
