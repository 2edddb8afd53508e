//! Matrix products and layout ops.

use super::graph::{BackCtx, Backward, Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Batched product: `a: [batch, m, k]`, `b: [batch_b, k, n]` where
/// `batch_b` is either `batch` or 1 (shared right operand).
struct MatmulRule {
    batch: usize,
    shared_b: bool,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Real> Backward<T> for MatmulRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad;
        let (m, k, n) = (self.m, self.k, self.n);
        let ga = ctx.needs(0).then(|| {
            // dA = dC · Bᵀ
            let mut ga = vec![T::zero(); a.len()];
            for i in 0..self.batch {
                let bi = if self.shared_b { 0 } else { i };
                T::gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..],
                    false,
                    &b[bi * k * n..],
                    true,
                    T::zero(),
                    &mut ga[i * m * k..],
                );
            }
            ga
        });
        let gb = ctx.needs(1).then(|| {
            // dB = Aᵀ · dC
            let mut gb = vec![T::zero(); b.len()];
            if self.shared_b {
                T::gemm(k, self.batch * m, n, a, true, g, false, T::zero(), &mut gb);
            } else {
                for i in 0..self.batch {
                    T::gemm(
                        k,
                        m,
                        n,
                        &a[i * m * k..],
                        true,
                        &g[i * m * n..],
                        false,
                        T::zero(),
                        &mut gb[i * k * n..],
                    );
                }
            }
            gb
        });
        vec![ga, gb]
    }
}

struct PermuteRule {
    in_dims: Vec<usize>,
    axes: Vec<usize>,
}

fn permute_data<T: Copy>(src: &[T], in_dims: &[usize], axes: &[usize], inverse: bool) -> Vec<T> {
    let rank = in_dims.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_dims[i + 1];
    }
    let out_dims: Vec<usize> = axes.iter().map(|&a| in_dims[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut dst = vec![src[0]; if inverse { src.len() } else { 0 }];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for o in 0..src.len() {
        if inverse {
            dst[off] = src[o];
        } else {
            out.push(src[off]);
        }
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            off -= src_strides[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    if inverse {
        dst
    } else {
        out
    }
}

impl<T: Real> Backward<T> for PermuteRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(permute_data(ctx.grad, &self.in_dims, &self.axes, true))]
    }
}

struct ReshapeRule;

impl<T: Real> Backward<T> for ReshapeRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.to_vec())]
    }
}

impl<T: Real> Graph<T> {
    /// Matrix product. Accepts `[m,k]·[k,n]`, `[..,m,k]·[k,n]` (shared right
    /// operand) and `[..,m,k]·[..,k,n]` with identical leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad.len() < 2 || bd.len() < 2 {
            return Err(shape_err!("matmul needs rank ≥ 2 operands, got {ad:?} · {bd:?}"));
        }
        let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
        let (kb, n) = (bd[bd.len() - 2], bd[bd.len() - 1]);
        if k != kb {
            return Err(shape_err!(
                "matmul inner dims disagree: left {ad:?} has k={k}, right {bd:?} has k={kb}"
            ));
        }
        let batch: usize = ad[..ad.len() - 2].iter().product();
        let batch_b: usize = bd[..bd.len() - 2].iter().product();
        let shared_b = bd.len() == 2;
        if !shared_b && (bd.len() != ad.len() || ad[..ad.len() - 2] != bd[..bd.len() - 2]) {
            return Err(shape_err!("matmul batch dims disagree: {ad:?} · {bd:?}"));
        }
        debug_assert!(shared_b || batch == batch_b);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        if shared_b {
            T::gemm(batch * m, k, n, av, false, bv, false, T::zero(), &mut out);
        } else {
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[i * k * n..],
                    false,
                    T::zero(),
                    &mut out[i * m * n..],
                );
            }
        }
        let mut dims = ad[..ad.len() - 2].to_vec();
        dims.extend([m, n]);
        let value = Tensor::new(&dims, out)?;
        Ok(self.push("matmul", value, &[a, b], MatmulRule { batch, shared_b, m, k, n }))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let in_dims = self.dims(x).to_vec();
        let mut seen = vec![false; in_dims.len()];
        if axes.len() != in_dims.len()
            || axes.iter().any(|&a| a >= in_dims.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err!("invalid permutation {axes:?} for shape {in_dims:?}"));
        }
        let out_dims: Vec<usize> = axes.iter().map(|&a| in_dims[a]).collect();
        let data = permute_data(self.value(x).data(), &in_dims, axes, false);
        let value = Tensor::new(&out_dims, data)?;
        Ok(self.push("permute", value, &[x], PermuteRule { in_dims, axes: axes.to_vec() }))
    }

    /// Swap the two trailing axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.dims(x).len();
        if r < 2 {
            return Err(shape_err!("transpose needs rank ≥ 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(dims)?;
        Ok(self.push("reshape", value, &[x], ReshapeRule))
    }
}
