//! Pooling, resampling and channel concatenation.

use super::conv::Pad2d;
use super::graph::{BackCtx, Backward, Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Interpolation used by [`Graph::upsample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel centers, edges clamped (no corner alignment).
    Bilinear,
}

fn dims4(dims: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match dims {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err!("{op} expects N×C×H×W, got {dims:?}")),
    }
}

/// Gradient routed to one recorded source index per output element.
struct GatherRule {
    src: Vec<usize>,
    in_len: usize,
}

impl<T: Real> Backward<T> for GatherRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); self.in_len];
        for (&s, &g) in self.src.iter().zip(ctx.grad) {
            gx[s] += g;
        }
        vec![Some(gx)]
    }
}

struct AvgPoolRule {
    dims: (usize, usize, usize, usize),
    k: usize,
}

impl<T: Real> Backward<T> for AvgPoolRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (n, c, h, w) = self.dims;
        let k = self.k;
        let (ho, wo) = (h / k, w / k);
        let scale = T::of(1.0 / (k * k) as f64);
        let mut gx = vec![T::zero(); n * c * h * w];
        for p in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    gx[(p * h + i) * w + j] = ctx.grad[(p * ho + i / k) * wo + j / k] * scale;
                }
            }
        }
        vec![Some(gx)]
    }
}

struct GlobalAvgRule {
    hw: usize,
}

impl<T: Real> Backward<T> for GlobalAvgRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let scale = T::of(1.0 / self.hw as f64);
        let gx = ctx
            .grad
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * scale, self.hw))
            .collect();
        vec![Some(gx)]
    }
}

/// Per-axis interpolation taps: (low index, high index, weight of high).
fn bilinear_taps(len_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct BilinearRule {
    dims: (usize, usize, usize, usize),
    factor: usize,
}

impl BilinearRule {
    fn apply<T: Real>(&self, x: &[T], out: &mut [T], adjoint: bool) {
        let (n, c, h, w) = self.dims;
        let (ho, wo) = (h * self.factor, w * self.factor);
        let ty = bilinear_taps(h, self.factor);
        let tx = bilinear_taps(w, self.factor);
        for p in 0..n * c {
            for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let taps = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1, (1.0 - fy) * fx),
                        (y1, x0, fy * (1.0 - fx)),
                        (y1, x1, fy * fx),
                    ];
                    let o = (p * ho + oi) * wo + oj;
                    if adjoint {
                        let g = x[o];
                        for (yy, xx, wt) in taps {
                            out[(p * h + yy) * w + xx] += g * T::of(wt);
                        }
                    } else {
                        let mut acc = T::zero();
                        for (yy, xx, wt) in taps {
                            acc += x[(p * h + yy) * w + xx] * T::of(wt);
                        }
                        out[o] = acc;
                    }
                }
            }
        }
    }
}

impl<T: Real> Backward<T> for BilinearRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); ctx.inputs[0].len()];
        self.apply(ctx.grad, &mut gx, true);
        vec![Some(gx)]
    }
}

struct ConcatRule {
    n: usize,
    channels: Vec<usize>,
    hw: usize,
}

impl<T: Real> Backward<T> for ConcatRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.channels.len());
        for (i, &c) in self.channels.iter().enumerate() {
            if !ctx.needs(i) {
                grads.push(None);
                offset += c;
                continue;
            }
            let mut g = Vec::with_capacity(self.n * c * self.hw);
            for s in 0..self.n {
                let start = (s * total + offset) * self.hw;
                g.extend_from_slice(&ctx.grad[start..start + c * self.hw]);
            }
            grads.push(Some(g));
            offset += c;
        }
        grads
    }
}

impl<T: Real> Graph<T> {
    /// Per-channel maximum `N×C×H×W → N×C`. The gradient goes to the first
    /// maximal element in scan order.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.dims(x), "global_max_pool")?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut src = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let plane = &xv[p * hw..(p + 1) * hw];
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            src.push(p * hw + best);
        }
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push("global_max_pool", value, &[x], GatherRule { src, in_len: xv.len() }))
    }

    /// Per-channel mean `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.dims(x), "global_avg_pool")?;
        let hw = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| T::of(crate::tensor::pairwise_sum(p) / hw as f64))
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push("global_avg_pool", value, &[x], GlobalAvgRule { hw }))
    }

    /// `k×k` max pooling with stride `stride`; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: Pad2d) -> Result<Var> {
        let (n, c, h, w) = dims4(self.dims(x), "max_pool2d")?;
        let g = super::conv::ConvGeom::new(c, h, w, k, k, stride, pad, false)?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * g.ho * g.wo);
        let mut src = Vec::with_capacity(out.capacity());
        for p in 0..n * c {
            for oi in 0..g.ho {
                for oj in 0..g.wo {
                    let mut best: Option<usize> = None;
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - pad.top as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - pad.left as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let idx = (p * h + ii as usize) * w + jj as usize;
                            if best.is_none_or(|b| xv[idx] > xv[b]) {
                                best = Some(idx);
                            }
                        }
                    }
                    let b = best.ok_or_else(|| shape_err!("max_pool2d window fully in padding"))?;
                    out.push(xv[b]);
                    src.push(b);
                }
            }
        }
        let value = Tensor::new(&[n, c, g.ho, g.wo], out)?;
        Ok(self.push("max_pool2d", value, &[x], GatherRule { src, in_len: xv.len() }))
    }

    /// Non-overlapping `k×k` average pooling; H and W must be multiples of `k`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.dims(x), "avg_pool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err!("avg_pool2d window {k} does not tile {h}×{w}"));
        }
        let (ho, wo) = (h / k, w / k);
        let xv = self.value(x).data();
        let scale = 1.0 / (k * k) as f64;
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = 0.0;
                    for i in oi * k..(oi + 1) * k {
                        for j in oj * k..(oj + 1) * k {
                            acc += xv[(p * h + i) * w + j].f64();
                        }
                    }
                    out[(p * ho + oi) * wo + oj] = T::of(acc * scale);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push("avg_pool2d", value, &[x], AvgPoolRule { dims: (n, c, h, w), k }))
    }

    /// Integer-factor spatial upsampling.
    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let (n, c, h, w) = dims4(self.dims(x), "upsample")?;
        if factor == 0 {
            return Err(shape_err!("upsample factor must be positive"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        match mode {
            UpsampleMode::Nearest => {
                let mut out = Vec::with_capacity(n * c * ho * wo);
                let mut src = Vec::with_capacity(n * c * ho * wo);
                for p in 0..n * c {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let idx = (p * h + oi / factor) * w + oj / factor;
                            out.push(xv[idx]);
                            src.push(idx);
                        }
                    }
                }
                let value = Tensor::new(&[n, c, ho, wo], out)?;
                Ok(self.push("upsample_nearest", value, &[x], GatherRule { src, in_len: xv.len() }))
            }
            UpsampleMode::Bilinear => {
                let rule = BilinearRule { dims: (n, c, h, w), factor };
                let mut out = vec![T::zero(); n * c * ho * wo];
                rule.apply(xv, &mut out, false);
                let value = Tensor::new(&[n, c, ho, wo], out)?;
                Ok(self.push("upsample_bilinear", value, &[x], rule))
            }
        }
    }

    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        self.upsample(x, 2, mode)
    }

    /// Stack `N×Cᵢ×H×W` maps along the channel axis in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let (n, _, h, w) = dims4(self.dims(first), "concat_channels")?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ni, ci, hi, wi) = dims4(self.dims(x), "concat_channels")?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(shape_err!(
                    "concat_channels spatial mismatch: {:?} vs {:?}",
                    self.dims(first),
                    self.dims(x)
                ));
            }
            channels.push(ci);
        }
        let hw = h * w;
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (&x, &c) in xs.iter().zip(&channels) {
                let v = self.value(x).data();
                out.extend_from_slice(&v[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.push("concat_channels", value, xs, ConcatRule { n, channels, hw }))
    }
}
