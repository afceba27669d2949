//! Multi-head self-attention restricted to non-overlapping 3D token windows.
//!
//! Tokens are laid out `[B, N, 3C]` with `N = gd * gh * gw` in row-major
//! `(d, h, w)` order and the last axis split as `q | k | v`, each further split
//! into `heads` contiguous chunks of `C / heads`. Windows that overhang the grid
//! are padded with masked slots: they never receive attention weight.

use crate::{TapeError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub heads: usize,
}

impl WindowSpec {
    /// Window size per axis, clamped to the grid.
    pub fn effective_window(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.window[a].clamp(1, self.grid[a].max(1)))
    }

    pub fn is_clamped(&self) -> bool {
        (0..3).any(|a| self.window[a] > self.grid[a])
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }

    /// Slot lists for every window; `None` marks a padding slot.
    pub fn partition(&self) -> Vec<Vec<Option<usize>>> {
        let win = self.effective_window();
        let counts = [0, 1, 2].map(|a| self.grid[a].div_ceil(win[a]));
        let mut out = Vec::with_capacity(counts.iter().product());
        for wz in 0..counts[0] {
            for wy in 0..counts[1] {
                for wx in 0..counts[2] {
                    let mut slots = Vec::with_capacity(win.iter().product());
                    for z in 0..win[0] {
                        for y in 0..win[1] {
                            for x in 0..win[2] {
                                let (gz, gy, gx) = (wz * win[0] + z, wy * win[1] + y, wx * win[2] + x);
                                let inside = gz < self.grid[0] && gy < self.grid[1] && gx < self.grid[2];
                                slots.push(inside.then(|| (gz * self.grid[1] + gy) * self.grid[2] + gx));
                            }
                        }
                    }
                    out.push(slots);
                }
            }
        }
        out
    }

    fn check(&self, shape: &[usize]) -> Result<(usize, usize, usize), TapeError> {
        if shape.len() != 3 || shape[2] % 3 != 0 {
            return Err(TapeError::Shape(format!("attention expects [B, N, 3C], got {shape:?}")));
        }
        let c = shape[2] / 3;
        if self.heads == 0 || c % self.heads != 0 {
            return Err(TapeError::Shape(format!("{c} channels not divisible by {} heads", self.heads)));
        }
        if shape[1] != self.tokens() {
            return Err(TapeError::Shape(format!(
                "token count {} does not match grid {:?}",
                shape[1], self.grid
            )));
        }
        Ok((shape[0], shape[1], c))
    }
}

/// Softmax weights of one (batch item, window, head): a `slots x slots`
/// row-major matrix. Rows of padding slots are all zero.
#[derive(Clone, Debug)]
pub struct WindowProbs {
    pub batch: usize,
    pub head: usize,
    pub slots: Vec<Option<usize>>,
    pub probs: Vec<f64>,
}

pub struct AttnForward {
    pub out: Tensor,
    pub probs: Vec<WindowProbs>,
}

pub fn window_attention_forward(qkv: &Tensor, spec: &WindowSpec) -> Result<AttnForward, TapeError> {
    let (batch, n, c) = spec.check(qkv.shape())?;
    let hd = c / spec.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let row = 3 * c;
    let data = qkv.data();
    let mut out = Tensor::zeros(&[batch, n, c]);
    let mut probs = Vec::new();
    let windows = spec.partition();
    for b in 0..batch {
        let tok = |t: usize| &data[(b * n + t) * row..(b * n + t + 1) * row];
        for slots in &windows {
            let s = slots.len();
            for h in 0..spec.heads {
                let (qo, ko, vo) = (h * hd, c + h * hd, 2 * c + h * hd);
                let mut p = vec![0.0; s * s];
                for (i, ti) in slots.iter().enumerate() {
                    let Some(ti) = *ti else { continue };
                    let q = &tok(ti)[qo..qo + hd];
                    let prow = &mut p[i * s..(i + 1) * s];
                    let mut max = f64::NEG_INFINITY;
                    for (j, tj) in slots.iter().enumerate() {
                        prow[j] = match tj {
                            Some(tj) => {
                                let k = &tok(*tj)[ko..ko + hd];
                                q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                            }
                            None => f64::NEG_INFINITY,
                        };
                        max = max.max(prow[j]);
                    }
                    let mut z = 0.0;
                    for v in prow.iter_mut() {
                        *v = (*v - max).exp();
                        z += *v;
                    }
                    for v in prow.iter_mut() {
                        *v /= z;
                    }
                    let dst = &mut out.data_mut()[(b * n + ti) * c + qo..(b * n + ti) * c + qo + hd];
                    for (j, tj) in slots.iter().enumerate() {
                        let Some(tj) = *tj else { continue };
                        let v = &tok(tj)[vo..vo + hd];
                        for (o, &vv) in dst.iter_mut().zip(v) {
                            *o += prow[j] * vv;
                        }
                    }
                }
                probs.push(WindowProbs {
                    batch: b,
                    head: h,
                    slots: slots.clone(),
                    probs: p,
                });
            }
        }
    }
    Ok(AttnForward { out, probs })
}

pub fn window_attention_backward(qkv: &Tensor, spec: &WindowSpec, probs: &[WindowProbs], grad_out: &Tensor) -> Tensor {
    let (_, n, c) = spec.check(qkv.shape()).expect("validated in forward");
    let hd = c / spec.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let row = 3 * c;
    let data = qkv.data();
    let go = grad_out.data();
    let mut dqkv = Tensor::zeros(qkv.shape());
    let dd = dqkv.data_mut();
    let mut dp = Vec::new();
    for wp in probs {
        let b = wp.batch;
        let s = wp.slots.len();
        let (qo, ko, vo) = (wp.head * hd, c + wp.head * hd, 2 * c + wp.head * hd);
        let at = |t: usize, off: usize| (b * n + t) * row + off;
        dp.clear();
        dp.resize(s * s, 0.0);
        for (i, ti) in wp.slots.iter().enumerate() {
            let Some(ti) = *ti else { continue };
            let g = &go[(b * n + ti) * c + qo..(b * n + ti) * c + qo + hd];
            let prow = &wp.probs[i * s..(i + 1) * s];
            let mut dot = 0.0;
            for (j, tj) in wp.slots.iter().enumerate() {
                let Some(tj) = *tj else { continue };
                // dV_j += p_ij * dO_i ; dP_ij = dO_i . V_j
                let mut d = 0.0;
                for e in 0..hd {
                    d += g[e] * data[at(tj, vo) + e];
                    dd[at(tj, vo) + e] += prow[j] * g[e];
                }
                dp[i * s + j] = d;
                dot += prow[j] * d;
            }
            for j in 0..s {
                dp[i * s + j] = prow[j] * (dp[i * s + j] - dot) * scale;
            }
        }
        for (i, ti) in wp.slots.iter().enumerate() {
            let Some(ti) = *ti else { continue };
            for (j, tj) in wp.slots.iter().enumerate() {
                let Some(tj) = *tj else { continue };
                let ds = dp[i * s + j];
                if ds == 0.0 {
                    continue;
                }
                for e in 0..hd {
                    dd[at(ti, qo) + e] += ds * data[at(tj, ko) + e];
                    dd[at(tj, ko) + e] += ds * data[at(ti, qo) + e];
                }
            }
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_covers_every_token_once() {
        let spec = WindowSpec { grid: [3, 5, 2], window: [2, 2, 2], heads: 1 };
        let mut seen = vec![0; spec.tokens()];
        let windows = spec.partition();
        assert_eq!(windows.len(), 2 * 3);
        for slots in windows {
            assert_eq!(slots.len(), 8);
            for t in slots.into_iter().flatten() {
                seen[t] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn oversized_window_is_clamped() {
        let spec = WindowSpec { grid: [1, 4, 4], window: [8, 8, 8], heads: 2 };
        assert!(spec.is_clamped());
        assert_eq!(spec.effective_window(), [1, 4, 4]);
        assert_eq!(spec.partition().len(), 1);
    }
}
