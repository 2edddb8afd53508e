//! 2-D cross-correlation via im2col + GEMM.

use rayon::prelude::*;

use super::graph::{BackCtx, Backward, Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Zero padding applied to each spatial border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2d {
    pub fn uniform(p: usize) -> Self {
        Self { top: p, bottom: p, left: p, right: p }
    }

    /// `(k-1)/2` on every border: with floor-mode extents a `k×k`,
    /// stride-`s` window maps `H` to `ceil(H/s)`.
    pub fn same(k: usize) -> Self {
        Self::uniform((k.max(1) - 1) / 2)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Pad2d,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// With `exact`, windows must tile the padded input exactly; otherwise
    /// trailing rows/columns that do not fit a full window are dropped.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Pad2d,
        exact: bool,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err!("stride must be positive"));
        }
        let ph = h + pad.top + pad.bottom;
        let pw = w + pad.left + pad.right;
        if kh > ph || kw > pw {
            return Err(shape_err!("kernel {kh}×{kw} larger than padded input {ph}×{pw}"));
        }
        if exact && ((ph - kh) % stride != 0 || (pw - kw) % stride != 0) {
            return Err(shape_err!(
                "non-integral output extent: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
            ));
        }
        Ok(Self { c, h, w, kh, kw, stride, pad, ho: (ph - kh) / stride + 1, wo: (pw - kw) / stride + 1 })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == Pad2d::default()
    }

    /// Unfold one sample `[C,H,W]` into `[C·kh·kw, Ho·Wo]`.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad.top as isize;
                        let line = &mut dst[oi * wo..(oi + 1) * wo];
                        if ii < 0 || ii >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pad.left as isize;
                            *v = if jj < 0 || jj >= self.w as isize { T::zero() } else { src[jj as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add columns back to `[C,H,W]`.
    fn col2im<T: Real>(&self, col: &[T], x: &mut [T]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad.top as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad.left as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[jj as usize] += src[oi * wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvRule {
    n: usize,
    f: usize,
    geom: ConvGeom,
    has_bias: bool,
}

impl<T: Real> Backward<T> for ConvRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let geom = self.geom;
        let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad;
        let (rows, cols, f) = (geom.rows(), geom.cols(), self.f);
        let in_per = geom.c * geom.h * geom.w;
        let out_per = f * cols;
        let need_x = ctx.needs(0);
        let need_w = ctx.needs(1);

        // per-sample partial results, summed afterwards in sample order
        let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..self.n)
            .into_par_iter()
            .map(|s| {
                let gs = &g[s * out_per..(s + 1) * out_per];
                let xs = &x[s * in_per..(s + 1) * in_per];
                let owned;
                let col: &[T] = if geom.is_pointwise() {
                    xs
                } else if need_w {
                    let mut c = vec![T::zero(); rows * cols];
                    geom.im2col(xs, &mut c);
                    owned = c;
                    &owned
                } else {
                    &[]
                };
                let gw = need_w.then(|| {
                    let mut gw = vec![T::zero(); f * rows];
                    T::gemm(f, cols, rows, gs, false, col, true, T::zero(), &mut gw);
                    gw
                });
                let gx = need_x.then(|| {
                    if geom.is_pointwise() {
                        let mut gx = vec![T::zero(); in_per];
                        T::gemm(rows, f, cols, w, true, gs, false, T::zero(), &mut gx);
                        gx
                    } else {
                        let mut dcol = vec![T::zero(); rows * cols];
                        T::gemm(rows, f, cols, w, true, gs, false, T::zero(), &mut dcol);
                        let mut gx = vec![T::zero(); in_per];
                        geom.col2im(&dcol, &mut gx);
                        gx
                    }
                });
                (gx, gw)
            })
            .collect();

        let gx = need_x.then(|| {
            let mut gx = Vec::with_capacity(x.len());
            for (p, _) in &parts {
                gx.extend_from_slice(p.as_ref().unwrap());
            }
            gx
        });
        let gw = need_w.then(|| {
            let mut gw = vec![T::zero(); w.len()];
            for (_, p) in &parts {
                gw.iter_mut().zip(p.as_ref().unwrap()).for_each(|(a, &b)| *a += b);
            }
            gw
        });
        let mut out = vec![gx, gw];
        if self.has_bias {
            let gb = ctx.needs(2).then(|| {
                let mut gb = vec![0.0f64; f];
                for s in 0..self.n {
                    for (fi, acc) in gb.iter_mut().enumerate() {
                        let base = s * out_per + fi * cols;
                        *acc += g[base..base + cols].iter().map(|v| v.f64()).sum::<f64>();
                    }
                }
                gb.into_iter().map(T::of).collect()
            });
            out.push(gb);
        }
        out
    }
}

impl<T: Real> Graph<T> {
    /// Cross-correlation (no kernel flip) of `x: N×C×H×W` with
    /// `w: F×C×kh×kw`, plus an optional per-filter bias. The output extent
    /// `(H + 2·pad − kh)/stride + 1` must be integral.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl(x, w, bias, stride, Pad2d::uniform(pad), true)
    }

    /// Like [`Graph::conv2d`] with per-border padding and floor-mode extents.
    pub fn conv2d_padded(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: Pad2d) -> Result<Var> {
        self.conv_impl(x, w, bias, stride, pad, false)
    }

    fn conv_impl(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: Pad2d,
        exact: bool,
    ) -> Result<Var> {
        let (xd, wd) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if xd.len() != 4 || wd.len() != 4 {
            return Err(shape_err!("conv2d expects 4-d input and kernel, got {xd:?} and {wd:?}"));
        }
        if xd[1] != wd[1] {
            return Err(shape_err!("conv2d channel mismatch: input {xd:?}, kernel {wd:?}"));
        }
        let (n, f) = (xd[0], wd[0]);
        let geom = ConvGeom::new(xd[1], xd[2], xd[3], wd[2], wd[3], stride, pad, exact)?;
        if let Some(b) = bias {
            if self.dims(b) != [f] {
                return Err(shape_err!("conv2d bias must be [{f}], got {:?}", self.dims(b)));
            }
        }
        let (rows, cols) = (geom.rows(), geom.cols());
        let in_per = geom.c * geom.h * geom.w;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = bias.map(|b| self.value(b).data());
        let outs: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|s| {
                let xs = &xv[s * in_per..(s + 1) * in_per];
                let mut out = vec![T::zero(); f * cols];
                if let Some(bv) = bv {
                    for (fi, chunk) in out.chunks_mut(cols).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bv[fi]);
                    }
                }
                if geom.is_pointwise() {
                    T::gemm(f, rows, cols, wv, false, xs, false, T::one(), &mut out);
                } else {
                    let mut col = vec![T::zero(); rows * cols];
                    geom.im2col(xs, &mut col);
                    T::gemm(f, rows, cols, wv, false, &col, false, T::one(), &mut out);
                }
                out
            })
            .collect();
        let data = outs.concat();
        let value = Tensor::new(&[n, f, geom.ho, geom.wo], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rule = ConvRule { n, f, geom, has_bias: bias.is_some() };
        Ok(self.push("conv2d", value, &inputs, rule))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[1, 1, 1, 1], &[3.25]).unwrap());
        let w = g.input(Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap());
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[3.25]);
    }

    #[test]
    fn all_ones_two_by_two() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::ones(&[1, 1, 2, 2]));
        let w = g.input(Tensor::ones(&[1, 1, 2, 2]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.dims(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn non_integral_extent_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.input(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.conv2d(x, w, None, 2, 0).is_err());
        assert!(g.conv2d(x, w, None, 2, 1).is_err());
        // floor mode halves the extent
        let y = g.conv2d_padded(x, w, None, 2, Pad2d::same(3)).unwrap();
        assert_eq!(g.dims(y), &[1, 1, 2, 2]);
        let w1 = g.input(Tensor::zeros(&[1, 1, 1, 1]));
        let y = g.conv2d_padded(x, w1, None, 2, Pad2d::same(1)).unwrap();
        assert_eq!(g.dims(y), &[1, 1, 2, 2]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.input(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
    }

}
