//! Forward/backward kernels for the elementwise and reshaping ops.

use crate::Tensor;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// (outer, axis length, inner) split of a shape around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn add_bias(x: &Tensor, bias: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = x.clone();
    let od = out.data_mut();
    for o in 0..outer {
        for (c, &b) in bias.data().iter().enumerate() {
            let off = (o * n + c) * inner;
            for v in &mut od[off..off + inner] {
                *v += b;
            }
        }
    }
    out
}

pub fn reduce_to_axis(g: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(g.shape(), axis);
    let mut out = vec![0.0; n];
    for o in 0..outer {
        for (c, acc) in out.iter_mut().enumerate() {
            let off = (o * n + c) * inner;
            *acc += g.data()[off..off + inner].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(&[n], out).expect("axis length")
}

pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, LayerNormCache) {
    let n = *x.shape().last().expect("non-scalar");
    let rows = x.numel() / n;
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let xs = &x.data()[r * n..(r + 1) * n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        let od = &mut out.data_mut()[r * n..(r + 1) * n];
        for i in 0..n {
            let h = (xs[i] - mean) * rs;
            xhat[r * n + i] = h;
            od[i] = h * g[i] + b[i];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = gamma.numel();
    let rows = grad.numel() / n;
    let mut dx = Tensor::zeros(grad.shape());
    let mut dg = vec![0.0; n];
    let mut db = vec![0.0; n];
    let gm = gamma.data();
    let mut dxhat = vec![0.0; n];
    for r in 0..rows {
        let g = &grad.data()[r * n..(r + 1) * n];
        let xh = &cache.xhat[r * n..(r + 1) * n];
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..n {
            dg[i] += g[i] * xh[i];
            db[i] += g[i];
            dxhat[i] = g[i] * gm[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xh[i];
        }
        m1 /= n as f64;
        m2 /= n as f64;
        let rs = cache.rstd[r];
        let out = &mut dx.data_mut()[r * n..(r + 1) * n];
        for i in 0..n {
            out[i] = rs * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
    (
        dx,
        Tensor::from_vec(&[n], dg).expect("len"),
        Tensor::from_vec(&[n], db).expect("len"),
    )
}

pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let (xd, od) = (x.data(), out.data_mut());
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * n + c) * inner + i;
            let max = (0..n).map(|c| xd[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..n {
                let e = (xd[at(c)] - max).exp();
                od[at(c)] = e;
                z += e;
            }
            for c in 0..n {
                od[at(c)] /= z;
            }
        }
    }
    out
}

pub fn softmax_backward(y: &Tensor, grad: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), grad.data());
    let dd = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * n + c) * inner + i;
            let dot: f64 = (0..n).map(|c| yd[at(c)] * gd[at(c)]).sum();
            for c in 0..n {
                dd[at(c)] = yd[at(c)] * (gd[at(c)] - dot);
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling of the three trailing axes of `[B, C, D, H, W]`.
pub fn upsample_nearest(x: &Tensor, f: [usize; 3]) -> Tensor {
    let s = x.shape();
    let (bc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
    let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
    let mut out = Tensor::zeros(&[s[0], s[1], od, oh, ow]);
    let (xd, o) = (x.data(), out.data_mut());
    for c in 0..bc {
        for z in 0..od {
            for y in 0..oh {
                let src = ((c * d + z / f[0]) * h + y / f[1]) * w;
                let dst = ((c * od + z) * oh + y) * ow;
                for xx in 0..ow {
                    o[dst + xx] = xd[src + xx / f[2]];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(grad: &Tensor, in_shape: &[usize], f: [usize; 3]) -> Tensor {
    let (bc, d, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
    let mut dx = Tensor::zeros(in_shape);
    let (g, o) = (grad.data(), dx.data_mut());
    for c in 0..bc {
        for z in 0..od {
            for y in 0..oh {
                let dst = ((c * d + z / f[0]) * h + y / f[1]) * w;
                let src = ((c * od + z) * oh + y) * ow;
                for xx in 0..ow {
                    o[dst + xx / f[2]] += g[src + xx];
                }
            }
        }
    }
    dx
}

/// Linear interpolation taps `(i0, i1, w1)` mapping `out` samples onto `inp`
/// samples with half-pixel centres (no corner alignment).
pub fn linear_taps(inp: usize, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_trilinear(x: &Tensor, out_size: [usize; 3]) -> Tensor {
    let s = x.shape();
    let (bc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
    let taps = [linear_taps(d, out_size[0]), linear_taps(h, out_size[1]), linear_taps(w, out_size[2])];
    let [od, oh, ow] = out_size;
    let mut out = Tensor::zeros(&[s[0], s[1], od, oh, ow]);
    let (xd, o) = (x.data(), out.data_mut());
    for c in 0..bc {
        let at = |z: usize, y: usize, xx: usize| xd[((c * d + z) * h + y) * w + xx];
        for (z, &(z0, z1, tz)) in taps[0].iter().enumerate() {
            for (y, &(y0, y1, ty)) in taps[1].iter().enumerate() {
                for (xx, &(x0, x1, tx)) in taps[2].iter().enumerate() {
                    let lerp = |zz: usize, yy: usize| at(zz, yy, x0) * (1.0 - tx) + at(zz, yy, x1) * tx;
                    let p0 = lerp(z0, y0) * (1.0 - ty) + lerp(z0, y1) * ty;
                    let p1 = lerp(z1, y0) * (1.0 - ty) + lerp(z1, y1) * ty;
                    o[((c * od + z) * oh + y) * ow + xx] = p0 * (1.0 - tz) + p1 * tz;
                }
            }
        }
    }
    out
}

pub fn resize_trilinear_backward(grad: &Tensor, in_shape: &[usize]) -> Tensor {
    let (bc, d, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let gs = grad.shape();
    let (od, oh, ow) = (gs[2], gs[3], gs[4]);
    let taps = [linear_taps(d, od), linear_taps(h, oh), linear_taps(w, ow)];
    let mut dx = Tensor::zeros(in_shape);
    let (g, o) = (grad.data(), dx.data_mut());
    for c in 0..bc {
        for (z, &(z0, z1, tz)) in taps[0].iter().enumerate() {
            for (y, &(y0, y1, ty)) in taps[1].iter().enumerate() {
                for (xx, &(x0, x1, tx)) in taps[2].iter().enumerate() {
                    let gv = g[((c * od + z) * oh + y) * ow + xx];
                    for (zz, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                        for (yy, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                            for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                                o[((c * d + zz) * h + yy) * w + xi] += gv * wz * wy * wx;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let first = parts[0].shape();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut shape = first.to_vec();
    shape[axis] = total;
    let (outer, _, inner) = split_axis(first, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let n = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * n..(o + 1) * n]);
        }
    }
    Tensor::from_vec(&shape, data).expect("concat shape")
}

pub fn concat_backward(grad: &Tensor, sizes: &[usize], axis: usize) -> Vec<Tensor> {
    let total: usize = sizes.iter().sum();
    let (outer, _, inner) = split_axis(grad.shape(), axis);
    let mut outs: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
    for o in 0..outer {
        let mut off = o * total * inner;
        for (i, s) in sizes.iter().enumerate() {
            outs[i].extend_from_slice(&grad.data()[off..off + s * inner]);
            off += s * inner;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(d, &s)| {
            let mut shape = grad.shape().to_vec();
            shape[axis] = s;
            Tensor::from_vec(&shape, d).expect("split shape")
        })
        .collect()
}
