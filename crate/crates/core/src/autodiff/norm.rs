//! Softmax and normalization layers.

use super::graph::{BackCtx, Backward, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

struct SoftmaxRule {
    n: usize,
}

impl<T: Real> Backward<T> for SoftmaxRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let y = ctx.output.data();
        let mut gx = vec![T::zero(); y.len()];
        for ((yr, gr), out) in y
            .chunks(self.n)
            .zip(ctx.grad.chunks(self.n))
            .zip(gx.chunks_mut(self.n))
        {
            let dot: f64 = yr.iter().zip(gr).map(|(&y, &g)| (y * g).f64()).sum();
            let dot = T::of(dot);
            for ((o, &y), &g) in out.iter_mut().zip(yr).zip(gr) {
                *o = y * (g - dot);
            }
        }
        vec![Some(gx)]
    }
}

/// Shared backward for per-group standardization followed by an affine map.
/// `xhat` holds the standardized values, `inv_std` one entry per group.
fn standardize_backward<T: Real>(
    grad: &[T],
    xhat: &[T],
    gamma: impl Fn(usize) -> T,
    groups: usize,
    members: impl Fn(usize) -> Vec<(usize, usize)>,
    inv_std: &[f64],
    gx: &mut [T],
) {
    for grp in 0..groups {
        let idx = members(grp);
        let m = idx.len() as f64;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for &(i, p) in &idx {
            let d = (grad[i] * gamma(p)).f64();
            sum_d += d;
            sum_dx += d * xhat[i].f64();
        }
        for &(i, p) in &idx {
            let d = (grad[i] * gamma(p)).f64();
            let v = inv_std[grp] / m * (m * d - sum_d - xhat[i].f64() * sum_dx);
            gx[i] = T::of(v);
        }
    }
}

struct LayerNormRule<T> {
    d: usize,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
}

impl<T: Real> Backward<T> for LayerNormRule<T> {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let d = self.d;
        let gamma = ctx.inputs[1].data();
        let g = ctx.grad;
        let rows = g.len() / d;
        let gx = ctx.needs(0).then(|| {
            let mut gx = vec![T::zero(); g.len()];
            for r in 0..rows {
                let sl = r * d..(r + 1) * d;
                standardize_backward(
                    &g[sl.clone()],
                    &self.xhat[sl.clone()],
                    |p| gamma[p],
                    1,
                    |_| (0..d).map(|j| (j, j)).collect(),
                    &self.inv_std[r..r + 1],
                    &mut gx[sl],
                );
            }
            gx
        });
        let (gg, gb) = affine_param_grads(g, &self.xhat, d, |i| i % d);
        vec![gx, ctx.needs(1).then_some(gg), ctx.needs(2).then_some(gb)]
    }
}

fn affine_param_grads<T: Real>(
    g: &[T],
    xhat: &[T],
    params: usize,
    owner: impl Fn(usize) -> usize,
) -> (Vec<T>, Vec<T>) {
    let mut gg = vec![0.0f64; params];
    let mut gb = vec![0.0f64; params];
    for i in 0..g.len() {
        let p = owner(i);
        gg[p] += (g[i] * xhat[i]).f64();
        gb[p] += g[i].f64();
    }
    (gg.into_iter().map(T::of).collect(), gb.into_iter().map(T::of).collect())
}

struct BatchNormTrainRule<T> {
    dims: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
}

impl<T: Real> Backward<T> for BatchNormTrainRule<T> {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (n, c, hw) = (self.dims[0], self.dims[1], self.dims[2..].iter().product::<usize>());
        let gamma = ctx.inputs[1].data();
        let g = ctx.grad;
        let gx = ctx.needs(0).then(|| {
            let mut gx = vec![T::zero(); g.len()];
            standardize_backward(
                g,
                &self.xhat,
                |p| gamma[p],
                c,
                |ch| {
                    let mut v = Vec::with_capacity(n * hw);
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        v.extend((base..base + hw).map(|i| (i, ch)));
                    }
                    v
                },
                &self.inv_std,
                &mut gx,
            );
            gx
        });
        let (gg, gb) = affine_param_grads(g, &self.xhat, c, |i| (i / hw) % c);
        vec![gx, ctx.needs(1).then_some(gg), ctx.needs(2).then_some(gb)]
    }
}

struct BatchNormEvalRule<T> {
    hw: usize,
    c: usize,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
}

impl<T: Real> Backward<T> for BatchNormEvalRule<T> {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (hw, c) = (self.hw, self.c);
        let gamma = ctx.inputs[1].data();
        let g = ctx.grad;
        let gx = ctx.needs(0).then(|| {
            g.iter()
                .enumerate()
                .map(|(i, &gi)| {
                    let ch = (i / hw) % c;
                    gi * gamma[ch] * T::of(self.inv_std[ch])
                })
                .collect()
        });
        let (gg, gb) = affine_param_grads(g, &self.xhat, c, |i| (i / hw) % c);
        vec![gx, ctx.needs(1).then_some(gg), ctx.needs(2).then_some(gb)]
    }
}

/// Running statistics owned by a batch-norm layer.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
    pub momentum: f64,
}

impl<T: Real> Graph<T> {
    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let dims = self.dims(x).to_vec();
        let n = *dims.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += v.f64();
            }
            let inv = T::of(1.0 / z);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(&dims, out).unwrap();
        self.push("softmax_rows", value, &[x], SoftmaxRule { n })
    }

    /// Per-row standardization over the last axis followed by `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let d = *dims.last().unwrap();
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(shape_err!(
                "layer_norm over last dim {d} needs gamma/beta of [{d}], got {:?} / {:?}",
                self.dims(gamma),
                self.dims(beta)
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = T::of((row[j].f64() - mean) * is);
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(&dims, out)?;
        Ok(self.push("layer_norm", value, &[x, gamma, beta], LayerNormRule { d, xhat, inv_std }))
    }

    /// Batch normalization over axis 1 of an `N×C×...` tensor. In training
    /// mode batch statistics are used and the running statistics are updated
    /// in place; otherwise the running statistics normalize.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: RunningStats<'_, T>,
        training: bool,
        eps: f64,
    ) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() < 2 {
            return Err(shape_err!("batch_norm needs N×C×..., got {dims:?}"));
        }
        let (n, c) = (dims[0], dims[1]);
        let hw: usize = dims[2..].iter().product();
        if self.dims(gamma) != [c] || self.dims(beta) != [c] || running.mean.len() != c {
            return Err(shape_err!(
                "batch_norm over {c} channels got gamma {:?}, beta {:?}",
                self.dims(gamma),
                self.dims(beta)
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let m = n * hw;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![0.0f64; c];
        if training {
            if m < 2 {
                return Err(Error::DegenerateVariance(dims));
            }
            for ch in 0..c {
                let mut sum = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    sum += xv[base..base + hw].iter().map(|v| v.f64()).sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    sq += xv[base..base + hw].iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / m as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[ch] = is;
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    for i in base..base + hw {
                        let h = T::of((xv[i].f64() - mean) * is);
                        xhat[i] = h;
                        out[i] = h * gv[ch] + bv[ch];
                    }
                }
                let mo = running.momentum;
                let unbiased = sq / (m - 1) as f64;
                running.mean[ch] = T::of((1.0 - mo) * running.mean[ch].f64() + mo * mean);
                running.var[ch] = T::of((1.0 - mo) * running.var[ch].f64() + mo * unbiased);
            }
            let value = Tensor::new(&dims, out)?;
            Ok(self.push(
                "batch_norm",
                value,
                &[x, gamma, beta],
                BatchNormTrainRule { dims, xhat, inv_std },
            ))
        } else {
            for ch in 0..c {
                let mean = running.mean[ch].f64();
                let is = 1.0 / (running.var[ch].f64() + eps).sqrt();
                inv_std[ch] = is;
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    for i in base..base + hw {
                        let h = T::of((xv[i].f64() - mean) * is);
                        xhat[i] = h;
                        out[i] = h * gv[ch] + bv[ch];
                    }
                }
            }
            let value = Tensor::new(&dims, out)?;
            Ok(self.push(
                "batch_norm",
                value,
                &[x, gamma, beta],
                BatchNormEvalRule { hw, c, xhat, inv_std },
            ))
        }
    }
}
