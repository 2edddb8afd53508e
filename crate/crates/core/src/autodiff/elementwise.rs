//! Elementwise arithmetic with numpy-style broadcasting, activations and
//! full reductions.

use super::graph::{BackCtx, Backward, Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{pairwise_sum, Real, Tensor};

/// Broadcast shape of two operands, right-aligned.
pub(crate) fn broadcast_dims(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `src` laid against `out`, zero on broadcast axes.
fn aligned_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let o = i + rank - src.len();
        strides[o] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Visit every output position with the matching flat offsets into both
/// operands.
fn for_each_pair(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut counter = vec![0usize; rank.saturating_sub(1)];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..outer {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // advance the outer multi-index
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            base_a += sa[ax];
            base_b += sb[ax];
            if counter[ax] < out[ax] {
                break;
            }
            base_a -= sa[ax] * out[ax];
            base_b -= sb[ax] * out[ax];
            counter[ax] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryRule {
    kind: BinaryKind,
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    same: bool,
}

impl<T: Real> Backward<T> for BinaryRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad;
        let mut ga = ctx.needs(0).then(|| vec![T::zero(); a.len()]);
        let mut gb = ctx.needs(1).then(|| vec![T::zero(); b.len()]);
        let (ad, bd) = (a.data(), b.data());
        if self.same {
            for i in 0..g.len() {
                let (da, db) = match self.kind {
                    BinaryKind::Add => (g[i], g[i]),
                    BinaryKind::Sub => (g[i], -g[i]),
                    BinaryKind::Mul => (g[i] * bd[i], g[i] * ad[i]),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[i] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[i] += db;
                }
            }
        } else {
            for_each_pair(&self.out, &self.sa, &self.sb, |o, ia, ib| {
                let (da, db) = match self.kind {
                    BinaryKind::Add => (g[o], g[o]),
                    BinaryKind::Sub => (g[o], -g[o]),
                    BinaryKind::Mul => (g[o] * bd[ib], g[o] * ad[ia]),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            });
        }
        vec![ga, gb]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Gelu,
    Tanh,
    Exp,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::Exp => "exp",
        }
    }

    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => {
                let half = T::of(0.5);
                half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
            }
            Activation::Tanh => x.tanh(),
            Activation::Exp => x.exp(),
        }
    }

    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Gelu => {
                let cdf = T::of(0.5)
                    * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
                cdf + x * pdf
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Exp => y,
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct UnaryRule(Activation);

impl<T: Real> Backward<T> for UnaryRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let g = ctx
            .grad
            .iter()
            .zip(x.iter().zip(y))
            .map(|(&g, (&x, &y))| g * self.0.derivative(x, y))
            .collect();
        vec![Some(g)]
    }
}

struct ScaleRule<T>(T);

impl<T: Real> Backward<T> for ScaleRule<T> {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.iter().map(|&g| g * self.0).collect())]
    }
}

struct IdentityRule;

impl<T: Real> Backward<T> for IdentityRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.to_vec())]
    }
}

struct SumRule<T>(T);

impl<T: Real> Backward<T> for SumRule<T> {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![ctx.grad[0] * self.0; ctx.inputs[0].len()])]
    }
}

struct BroadcastRule {
    out: Vec<usize>,
    sa: Vec<usize>,
}

impl<T: Real> Backward<T> for BroadcastRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut ga = vec![T::zero(); ctx.inputs[0].len()];
        let zeros = vec![0; self.out.len()];
        for_each_pair(&self.out, &self.sa, &zeros, |o, ia, _| ga[ia] += ctx.grad[o]);
        vec![Some(ga)]
    }
}

impl<T: Real> Graph<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let out = broadcast_dims(&ad, &bd)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n: usize = out.iter().product();
        let op = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let same = ad == bd;
        let (sa, sb) = (aligned_strides(&ad, &out), aligned_strides(&bd, &out));
        let data = if same {
            av.iter().zip(bv).map(|(&x, &y)| op(x, y)).collect()
        } else {
            let mut data = vec![T::zero(); n];
            for_each_pair(&out, &sa, &sb, |o, ia, ib| data[o] = op(av[ia], bv[ib]));
            data
        };
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let value = Tensor::new(&out, data)?;
        Ok(self.push(name, value, &[a, b], BinaryRule { kind, out, sa, sb, same }))
    }

    /// `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    /// `a - b` with broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// `a ⊙ b` with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let data = self.value(a).data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(self.dims(a), data).unwrap();
        self.push("scale", value, &[a], ScaleRule(s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let data = self.value(a).data().iter().map(|&v| v + s).collect();
        let value = Tensor::new(self.dims(a), data).unwrap();
        self.push("add_scalar", value, &[a], IdentityRule)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let data = self.value(x).data().iter().map(|&v| act.apply(v)).collect();
        let value = Tensor::new(self.dims(x), data).unwrap();
        self.push(act.name(), value, &[x], UnaryRule(act))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = pairwise_sum(self.value(x).data());
        self.push("sum", Tensor::scalar(T::of(s)), &[x], SumRule(T::one()))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = pairwise_sum(self.value(x).data()) / n;
        self.push("mean", Tensor::scalar(T::of(s)), &[x], SumRule(T::of(1.0 / n)))
    }

    /// Expand `x` to `dims` by repeating along unit axes.
    pub fn broadcast_to(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let out = broadcast_dims(&xd, dims)?;
        if out != dims {
            return Err(shape_err!("cannot broadcast {xd:?} to {dims:?}"));
        }
        let sa = aligned_strides(&xd, &out);
        let zeros = vec![0; out.len()];
        let src = self.value(x).data();
        let mut data = vec![T::zero(); out.iter().product()];
        for_each_pair(&out, &sa, &zeros, |o, ia, _| data[o] = src[ia]);
        let value = Tensor::new(&out, data)?;
        Ok(self.push("broadcast_to", value, &[x], BroadcastRule { out, sa }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_dims(&[2, 3, 4], &[4]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_dims(&[2, 1, 4], &[1, 3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_dims(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_mul_and_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let s = g.param(Tensor::from_f64(&[2, 1], &[10., 100.]).unwrap());
        let y = g.mul(x, s).unwrap();
        assert_eq!(g.value(y).data(), &[10., 20., 30., 400., 500., 600.]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[10., 10., 10., 100., 100., 100.]);
        assert_eq!(g.grad(s).unwrap(), &[6., 15.]);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[3], &[-3., 0., 3.]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0., 0., 3.]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(sigmoid(-800.0f64) > 0.0 || sigmoid(-800.0f64) == 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn sum_of_x_grad_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[4], &[1., -2., 3., 0.5]).unwrap());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_grad_is_two_x() {
        let mut g = Graph::<f64>::new();
        let xs = [1., -2., 3., 0.5];
        let x = g.param(Tensor::from_f64(&[4], &xs).unwrap());
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        let expect: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn fan_out_accumulates() {
        let xs = [0.3, -1.2, 2.0];
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &xs).unwrap());
        let y = g.add(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        let via_fanout = g.grad(x).unwrap().to_vec();

        let mut h = Graph::<f64>::new();
        let x2 = h.param(Tensor::from_f64(&[3], &xs).unwrap());
        let y2 = h.scale(x2, 2.0);
        let l2 = h.sum(y2);
        h.backward(l2).unwrap();
        assert_eq!(via_fanout, h.grad(x2).unwrap());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn finite_check_names_first_bad_op() {
        let mut g = Graph::<f64>::new().with_finite_checks();
        let x = g.input(Tensor::from_f64(&[2], &[1.0, 1000.0]).unwrap());
        let e = g.activation(x, Activation::Exp);
        let _ = g.relu(e);
        let (id, name) = g.first_non_finite().unwrap();
        assert_eq!(id, e.index());
        assert_eq!(name, "exp");
    }
}
