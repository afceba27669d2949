use crate::attention::{window_attention_backward, window_attention_forward, WindowProbs, WindowSpec};
use crate::conv::{conv3d_backward, conv3d_forward, ConvSpec};
use crate::gemm::{gemm, Layout};
use crate::kernels::{self, LayerNormCache};
use crate::{TapeError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this crate.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Gradients w.r.t. each input, given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var, axis: usize },
    MatMul(Var, Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Conv3d { x: Var, w: Var, bias: Option<Var>, spec: ConvSpec },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: LayerNormCache },
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    WindowAttention { qkv: Var, spec: WindowSpec, probs: Vec<WindowProbs> },
    Upsample { x: Var, factors: [usize; 3] },
    Resize { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record; values are computed eagerly.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: String) -> TapeError {
    TapeError::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.variable(t)
        } else {
            self.constant(t)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("mul: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Adds a vector along `axis` (broadcast over all other axes).
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var, TapeError> {
        let xs = self.shape(x);
        if axis >= xs.len() || self.shape(bias) != [xs[axis]] {
            return Err(shape_err(format!("add_bias: {:?} on axis {axis} of {xs:?}", self.shape(bias))));
        }
        let v = kernels::add_bias(self.value(x), self.value(bias), axis);
        Ok(self.push(v, Op::AddBias { x, bias, axis }, &[x, bias]))
    }

    /// `[..., K] @ [K, N] -> [..., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *sa.last().ok_or_else(|| shape_err("matmul on scalar".into()))?;
        if sb.len() != 2 || sb[0] != k {
            return Err(shape_err(format!("matmul: {sa:?} @ {sb:?}")));
        }
        let (m, n) = (self.value(a).numel() / k.max(1), sb[1]);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(n),
            0.0,
            out.data_mut(),
            Layout::row_major(n),
        );
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TapeError> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TapeError> {
        let rank = self.shape(x).len();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..rank).collect::<Vec<_>>() {
            return Err(shape_err(format!("permute: {perm:?} is not a permutation of rank {rank}")));
        }
        let v = self.value(x).permute(perm);
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var, TapeError> {
        let v = conv3d_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), &spec)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(v, Op::Conv3d { x, w, bias, spec }, &parents))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TapeError> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err(format!("layer_norm: affine params must be [{n}]")));
        }
        let (v, cache) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, cache }, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let v = kernels::softmax(self.value(x), axis);
        self.push(v, Op::Softmax { x, axis }, &[x])
    }

    pub fn window_attention(&mut self, qkv: Var, spec: WindowSpec) -> Result<Var, TapeError> {
        let fwd = window_attention_forward(self.value(qkv), &spec)?;
        Ok(self.push(
            fwd.out,
            Op::WindowAttention {
                qkv,
                spec,
                probs: fwd.probs,
            },
            &[qkv],
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factors: [usize; 3]) -> Result<Var, TapeError> {
        if self.shape(x).len() != 5 || factors.contains(&0) {
            return Err(shape_err(format!("upsample: {:?} by {factors:?}", self.shape(x))));
        }
        let v = kernels::upsample_nearest(self.value(x), factors);
        Ok(self.push(v, Op::Upsample { x, factors }, &[x]))
    }

    pub fn resize_trilinear(&mut self, x: Var, size: [usize; 3]) -> Result<Var, TapeError> {
        if self.shape(x).len() != 5 || size.contains(&0) {
            return Err(shape_err(format!("resize: {:?} to {size:?}", self.shape(x))));
        }
        let v = kernels::resize_trilinear(self.value(x), size);
        Ok(self.push(v, Op::Resize { x }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TapeError> {
        let first = self.shape(parts[0]).to_vec();
        for p in &parts[1..] {
            let s = self.shape(*p);
            let ok = s.len() == first.len() && (0..s.len()).all(|a| a == axis || s[a] == first[a]);
            if !ok {
                return Err(shape_err(format!("concat on axis {axis}: {first:?} vs {s:?}")));
            }
        }
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = kernels::concat(&vals, axis);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, TapeError> {
        if self.value(output).numel() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        Ok(self.backward_with(output, Tensor::full(self.shape(output), 1.0)))
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(output), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![(*a, g.zip_map(vb, |x, y| x * y)), (*b, g.zip_map(va, |x, y| x * y))]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::AddBias { x, bias, axis } => {
                let mut out = vec![(*x, g.clone())];
                if self.wants(*bias) {
                    out.push((*bias, kernels::reduce_to_axis(g, *axis)));
                }
                out
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.numel() / k.max(1);
                let mut out = Vec::new();
                if self.wants(*a) {
                    let mut da = Tensor::zeros(va.shape());
                    gemm(m, n, k, 1.0, g.data(), Layout::row_major(n), vb.data(), Layout::transposed(n), 0.0, da.data_mut(), Layout::row_major(k));
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(vb.shape());
                    gemm(k, m, n, 1.0, va.data(), Layout::transposed(k), g.data(), Layout::row_major(n), 0.0, db.data_mut(), Layout::row_major(n));
                    out.push((*b, db));
                }
                out
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.shape(*x)).expect("same numel"))],
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, g.permute(&inv))]
            }
            Op::Conv3d { x, w, bias, spec } => {
                let need = [self.wants(*x), self.wants(*w), bias.is_some_and(|b| self.wants(b))];
                let cg = conv3d_backward(self.value(*x), self.value(*w), spec, g, need);
                let mut out = Vec::new();
                out.extend(cg.dx.map(|d| (*x, d)));
                out.extend(cg.dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (bias, cg.db) {
                    out.push((*b, d));
                }
                out
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (dx, dg, db) = kernels::layer_norm_backward(cache, self.value(*gamma), g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Gelu(x) => vec![(*x, self.value(*x).zip_map(g, |v, gg| kernels::gelu_grad(v) * gg))],
            Op::Softmax { x, axis } => vec![(*x, kernels::softmax_backward(&node.value, g, *axis))],
            Op::WindowAttention { qkv, spec, probs } => {
                vec![(*qkv, window_attention_backward(self.value(*qkv), spec, probs, g))]
            }
            Op::Upsample { x, factors } => {
                vec![(*x, kernels::upsample_nearest_backward(g, self.shape(*x), *factors))]
            }
            Op::Resize { x } => vec![(*x, kernels::resize_trilinear_backward(g, self.shape(*x)))],
            Op::Concat { parts, axis } => {
                let sizes: Vec<usize> = parts.iter().map(|p| self.shape(*p)[*axis]).collect();
                parts.iter().copied().zip(kernels::concat_backward(g, &sizes, *axis)).collect()
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), g.item()))],
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&vals, &node.value, g);
                assert_eq!(grads.len(), inputs.len(), "custom op {} returned wrong arity", op.name());
                inputs.iter().copied().zip(grads).filter_map(|(v, g)| g.map(|g| (v, g))).collect()
            }
        }
    }
}
