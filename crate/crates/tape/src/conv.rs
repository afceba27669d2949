//! Grouped 3D convolution via chunked im2col + GEMM.
//!
//! Layouts: input `[B, Cin, D, H, W]`, weight `[Cout, Cin / groups, kd, kh, kw]`,
//! optional bias `[Cout]`.

use crate::gemm::{gemm, Layout};
use crate::{TapeError, Tensor};

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, zero padding chosen to preserve spatial size for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            stride: [1; 3],
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
            groups: 1,
        }
    }

    pub fn strided(stride: [usize; 3]) -> Self {
        Self {
            stride,
            padding: [0; 3],
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn k3(&self) -> usize {
        self.kernel.iter().product()
    }
    fn rows(&self) -> usize {
        self.cin_g() * self.k3()
    }
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.output[1] * self.output[2]
    }
    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }
    fn chunk_depth(&self) -> usize {
        let per_plane = self.rows() * self.out_plane();
        (COL_BUDGET / per_plane.max(1)).clamp(1, self.output[0].max(1))
    }
}

fn geometry(x: &[usize], w: &[usize], spec: &ConvSpec) -> Result<Geometry, TapeError> {
    if x.len() != 5 || w.len() != 5 {
        return Err(TapeError::Shape(format!(
            "conv3d expects 5-D input and weight, got {x:?} and {w:?}"
        )));
    }
    let groups = spec.groups.max(1);
    let (cin, cout) = (x[1], w[0]);
    if cin % groups != 0 || cout % groups != 0 || w[1] * groups != cin {
        return Err(TapeError::Shape(format!(
            "conv3d channel mismatch: input {x:?}, weight {w:?}, groups {groups}"
        )));
    }
    let mut output = [0; 3];
    for a in 0..3 {
        let padded = x[2 + a] + 2 * spec.padding[a];
        let k = w[2 + a];
        if spec.stride[a] == 0 || k == 0 || padded < k {
            return Err(TapeError::Shape(format!(
                "conv3d axis {a}: input {} (+2x{} pad) smaller than kernel {k}",
                x[2 + a],
                spec.padding[a]
            )));
        }
        output[a] = (padded - k) / spec.stride[a] + 1;
    }
    Ok(Geometry {
        batch: x[0],
        cin,
        cout,
        groups,
        input: [x[2], x[3], x[4]],
        kernel: [w[2], w[3], w[4]],
        output,
        stride: spec.stride,
        padding: spec.padding,
    })
}

pub fn conv3d_output_shape(x: &[usize], w: &[usize], spec: &ConvSpec) -> Result<Vec<usize>, TapeError> {
    let g = geometry(x, w, spec)?;
    Ok(vec![g.batch, g.cout, g.output[0], g.output[1], g.output[2]])
}

/// Fills `col` (`rows x P`) for output depth planes `od0..od1` of one batch item and group.
fn im2col(g: &Geometry, x: &[f64], b: usize, group: usize, od0: usize, od1: usize, col: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let p = (od1 - od0) * oh * ow;
    let base = (b * g.cin + group * g.cin_g()) * g.in_vol();
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let xc = &x[base + ci * g.in_vol()..base + (ci + 1) * g.in_vol()];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut j = 0;
                    for od in od0..od1 {
                        let iz = (od * g.stride[0] + kz) as isize - g.padding[0] as isize;
                        for oy in 0..oh {
                            let iy = (oy * g.stride[1] + ky) as isize - g.padding[1] as isize;
                            let row_ok = iz >= 0 && (iz as usize) < id && iy >= 0 && (iy as usize) < ih;
                            if !row_ok {
                                dst[j..j + ow].fill(0.0);
                                j += ow;
                                continue;
                            }
                            let src = (iz as usize * ih + iy as usize) * iw;
                            for ox in 0..ow {
                                let ix = (ox * g.stride[2] + kx) as isize - g.padding[2] as isize;
                                dst[j] = if ix >= 0 && (ix as usize) < iw {
                                    xc[src + ix as usize]
                                } else {
                                    0.0
                                };
                                j += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` back into `dx`; adjoint of [`im2col`].
fn col2im(g: &Geometry, col: &[f64], b: usize, group: usize, od0: usize, od1: usize, dx: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let p = (od1 - od0) * oh * ow;
    let base = (b * g.cin + group * g.cin_g()) * g.in_vol();
    let in_vol = g.in_vol();
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let xc = &mut dx[base + ci * in_vol..base + (ci + 1) * in_vol];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let mut j = 0;
                    for od in od0..od1 {
                        let iz = (od * g.stride[0] + kz) as isize - g.padding[0] as isize;
                        for oy in 0..oh {
                            let iy = (oy * g.stride[1] + ky) as isize - g.padding[1] as isize;
                            if !(iz >= 0 && (iz as usize) < id && iy >= 0 && (iy as usize) < ih) {
                                j += ow;
                                continue;
                            }
                            let dst = (iz as usize * ih + iy as usize) * iw;
                            for ox in 0..ow {
                                let ix = (ox * g.stride[2] + kx) as isize - g.padding[2] as isize;
                                if ix >= 0 && (ix as usize) < iw {
                                    xc[dst + ix as usize] += src[j];
                                }
                                j += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor, TapeError> {
    let g = geometry(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(TapeError::Shape(format!(
                "conv3d bias shape {:?}, expected [{}]",
                b.shape(),
                g.cout
            )));
        }
    }
    let out_shape = [g.batch, g.cout, g.output[0], g.output[1], g.output[2]];
    let mut out = Tensor::zeros(&out_shape);
    let (rows, cout_g, out_vol, plane) = (g.rows(), g.cout_g(), g.out_vol(), g.out_plane());
    let chunk = g.chunk_depth();
    let mut col = vec![0.0; rows * chunk * plane];
    let wd = w.data();
    let od = out.data_mut();
    for b in 0..g.batch {
        for group in 0..g.groups {
            let mut d0 = 0;
            while d0 < g.output[0] {
                let d1 = (d0 + chunk).min(g.output[0]);
                let p = (d1 - d0) * plane;
                im2col(&g, x.data(), b, group, d0, d1, &mut col[..rows * p]);
                let c_off = (b * g.cout + group * cout_g) * out_vol + d0 * plane;
                gemm(
                    cout_g,
                    rows,
                    p,
                    1.0,
                    &wd[group * cout_g * rows..],
                    Layout::row_major(rows),
                    &col[..rows * p],
                    Layout::row_major(p),
                    0.0,
                    &mut od[c_off..],
                    Layout { rs: out_vol, cs: 1 },
                );
                d0 = d1;
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (c, &bv) in bias.data().iter().enumerate() {
                let off = (b * g.cout + c) * out_vol;
                for v in &mut od[off..off + out_vol] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need: [bool; 3],
) -> ConvGrads {
    let g = geometry(x.shape(), w.shape(), spec).expect("validated in forward");
    let (rows, cout_g, out_vol, plane) = (g.rows(), g.cout_g(), g.out_vol(), g.out_plane());
    let chunk = g.chunk_depth();
    let mut col = vec![0.0; rows * chunk * plane];
    let mut dcol = if need[0] { vec![0.0; rows * chunk * plane] } else { Vec::new() };
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = need[1].then(|| Tensor::zeros(w.shape()));
    let go = grad_out.data();
    let wd = w.data();
    if need[0] || need[1] {
        for b in 0..g.batch {
            for group in 0..g.groups {
                let mut d0 = 0;
                while d0 < g.output[0] {
                    let d1 = (d0 + chunk).min(g.output[0]);
                    let p = (d1 - d0) * plane;
                    let g_off = (b * g.cout + group * cout_g) * out_vol + d0 * plane;
                    if let Some(dw) = dw.as_mut() {
                        im2col(&g, x.data(), b, group, d0, d1, &mut col[..rows * p]);
                        gemm(
                            cout_g,
                            p,
                            rows,
                            1.0,
                            &go[g_off..],
                            Layout { rs: out_vol, cs: 1 },
                            &col[..rows * p],
                            Layout::transposed(p),
                            1.0,
                            &mut dw.data_mut()[group * cout_g * rows..],
                            Layout::row_major(rows),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            rows,
                            cout_g,
                            p,
                            1.0,
                            &wd[group * cout_g * rows..],
                            Layout::transposed(rows),
                            &go[g_off..],
                            Layout { rs: out_vol, cs: 1 },
                            0.0,
                            &mut dcol[..rows * p],
                            Layout::row_major(p),
                        );
                        col2im(&g, &dcol[..rows * p], b, group, d0, d1, dx.data_mut());
                    }
                    d0 = d1;
                }
            }
        }
    }
    let db = need[2].then(|| {
        let mut db = vec![0.0; g.cout];
        for b in 0..g.batch {
            for (c, acc) in db.iter_mut().enumerate() {
                let off = (b * g.cout + c) * out_vol;
                *acc += go[off..off + out_vol].iter().sum::<f64>();
            }
        }
        Tensor::from_vec(&[g.cout], db).expect("bias length")
    });
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution.
    fn naive(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Tensor {
        let g = geometry(x.shape(), w.shape(), spec).unwrap();
        let mut out = Tensor::zeros(&[g.batch, g.cout, g.output[0], g.output[1], g.output[2]]);
        let [id, ih, iw] = g.input;
        let [kd, kh, kw] = g.kernel;
        let [od, oh, ow] = g.output;
        for b in 0..g.batch {
            for co in 0..g.cout {
                let grp = co / g.cout_g();
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..g.cin_g() {
                                let cin = grp * g.cin_g() + ci;
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let iz = (z * g.stride[0] + a) as isize - g.padding[0] as isize;
                                            let iy = (y * g.stride[1] + bb) as isize - g.padding[1] as isize;
                                            let ix = (xx * g.stride[2] + c) as isize - g.padding[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz as usize >= id || iy as usize >= ih || ix as usize >= iw {
                                                continue;
                                            }
                                            let xv = x.data()[(((b * g.cin + cin) * id + iz as usize) * ih + iy as usize) * iw + ix as usize];
                                            let wv = w.data()[(((co * g.cin_g() + ci) * kd + a) * kh + bb) * kw + c];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((b * g.cout + co) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) * scale).collect()).unwrap()
    }

    #[test]
    fn forward_matches_naive_loops() {
        let cases = [
            ([2, 4, 5, 6, 7], [6, 2, 3, 3, 3], ConvSpec::same([3, 3, 3]).with_groups(2)),
            ([1, 3, 8, 8, 8], [4, 3, 2, 2, 2], ConvSpec::strided([2, 2, 2])),
            ([1, 4, 8, 4, 4], [4, 1, 4, 1, 1], ConvSpec::strided([4, 1, 1]).with_groups(4)),
            ([1, 1, 4, 9, 9], [5, 1, 1, 3, 3], ConvSpec { stride: [1, 3, 3], padding: [0, 1, 0], groups: 1 }),
        ];
        for (xs, ws, spec) in cases {
            let x = ramp(&xs, 0.01);
            let w = ramp(&ws, 0.003);
            let got = conv3d_forward(&x, &w, None, &spec).unwrap();
            let want = naive(&x, &w, &spec);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, conv^T(g)> and == <w, dW(g)>
        let spec = ConvSpec { stride: [2, 1, 1], padding: [1, 1, 0], groups: 2 };
        let x = ramp(&[2, 4, 6, 5, 4], 0.02);
        let w = ramp(&[4, 2, 3, 3, 2], 0.01);
        let y = conv3d_forward(&x, &w, None, &spec).unwrap();
        let gy = ramp(y.shape(), 0.05);
        let grads = conv3d_backward(&x, &w, &spec, &gy, [true, true, true]);
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data().iter().zip(grads.dx.unwrap().data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.data().iter().zip(grads.dw.unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - via_w).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((grads.db.unwrap().sum() - gy.sum()).abs() < 1e-9);
    }

    #[test]
    fn rejects_kernel_larger_than_input() {
        let x = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        assert!(conv3d_forward(&x, &w, None, &ConvSpec::strided([1, 1, 1])).is_err());
    }
}
