//! Parameter storage, forward sessions and the basic layers shared by every
//! part of the network.

use rand::Rng;

use crate::autodiff::{Graph, Pad2d, RunningStats, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named model state: trainable parameters plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Replace a tensor by name, checking that dims agree.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| crate::Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        let cur = &self.entries[id.0].value;
        if cur.dims() != value.dims() {
            return Err(shape_err!("`{name}` has dims {:?}, got {:?}", cur.dims(), value.dims()));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    #[cfg(test)]
    pub(crate) fn zero_biases(&mut self) {
        for e in self.entries.iter_mut().filter(|e| e.name.ends_with(".bias")) {
            e.value.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }
}

/// One forward (and optionally backward) pass over a [`ParamStore`].
pub struct Session<'s, T: Real> {
    pub graph: Graph<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    track_grads: bool,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, training: bool, track_grads: bool) -> Self {
        let bound = vec![None; store.len()];
        Self { graph: Graph::new(), store, bound, training, track_grads }
    }

    /// Training mode with gradients.
    pub fn train(store: &'s mut ParamStore<T>) -> Self {
        Self::new(store, true, true)
    }

    /// Eval mode, no gradient bookkeeping.
    pub fn eval(store: &'s mut ParamStore<T>) -> Self {
        Self::new(store, false, false)
    }

    pub fn with_finite_checks(mut self) -> Self {
        self.graph = std::mem::take(&mut self.graph).with_finite_checks();
        self
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph handle of a stored parameter, recorded once per session.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.track_grads && self.store.is_trainable(id) {
            self.graph.param(value)
        } else {
            self.graph.input(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.graph.dims(v)
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BatchNorm2d) -> Result<Var> {
        let gamma = self.p(bn.gamma);
        let beta = self.p(bn.beta);
        let mut mean = self.store.get(bn.running_mean).data().to_vec();
        let mut var = self.store.get(bn.running_var).data().to_vec();
        let stats = RunningStats { mean: &mut mean, var: &mut var, momentum: bn.momentum };
        let y = self.graph.batch_norm(x, gamma, beta, stats, self.training, bn.eps)?;
        if self.training {
            self.store.get_mut(bn.running_mean).data_mut().copy_from_slice(&mean);
            self.store.get_mut(bn.running_var).data_mut().copy_from_slice(&var);
        }
        Ok(y)
    }

    /// Backpropagate `loss` and collect the gradient of every bound
    /// trainable parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<(ParamId, Vec<T>)>> {
        self.graph.backward(loss)?;
        let mut grads = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = *v else { continue };
            if !self.store.entries[i].trainable {
                continue;
            }
            let g = self
                .graph
                .take_grad(v)
                .unwrap_or_else(|| vec![T::zero(); self.store.entries[i].value.len()]);
            grads.push((ParamId(i), g));
        }
        Ok(grads)
    }
}

/// Half-width of the uniform init `U(−1/√fan_in, 1/√fan_in)` used for
/// every conv and linear weight and bias.
fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn init_uniform<T: Real, R: Rng + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let b = init_bound(fan_in);
    Tensor::uniform(dims, -b, b, rng)
}

/// 2-D convolution with optional bias and "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: Pad2d,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let weight = store.add(format!("{name}.weight"), init_uniform(&[out_ch, in_ch, k, k], fan_in, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), init_uniform(&[out_ch], fan_in, rng)));
        Self { weight, bias, stride, pad: Pad2d::same(k), in_ch, out_ch }
    }

    /// Non-overlapping `k×k` patch projection (kernel = stride = `k`).
    pub fn patchify<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let weight = store.add(format!("{name}.weight"), init_uniform(&[out_ch, in_ch, k, k], fan_in, rng));
        let bias = Some(store.add(format!("{name}.bias"), init_uniform(&[out_ch], fan_in, rng)));
        Self { weight, bias, stride: k, pad: Pad2d::default(), in_ch, out_ch }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let b = self.bias.map(|b| s.p(b));
        s.graph.conv2d_padded(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, ch: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[ch])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[ch])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[ch])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[ch])),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        s.batch_norm(x, self)
    }
}

/// Convolution → batch norm → optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, k, stride, false);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_ch);
        Self { conv, bn, relu }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(if self.relu { s.graph.relu(y) } else { y })
    }
}

/// Affine map over the last axis: `y = x·W + b`, `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init_uniform(&[in_dim, out_dim], in_dim, rng)),
            bias: store.add(format!("{name}.bias"), init_uniform(&[out_dim], in_dim, rng)),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let dims = s.dims(x).to_vec();
        if dims.last() != Some(&self.in_dim) {
            return Err(shape_err!("linear expects trailing dim {}, got {dims:?}", self.in_dim));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let x2 = s.graph.reshape(x, &[rows, self.in_dim])?;
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        let y = s.graph.matmul(x2, w)?;
        let y = s.graph.add(y, b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        s.graph.reshape(y, &out_dims)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        s.graph.layer_norm(x, g, b, self.eps)
    }
}

/// Zero every trainable tensor whose name starts with `prefix`.
pub fn zero_params<T: Real>(store: &mut ParamStore<T>, prefix: &str) {
    let ids: Vec<ParamId> = store.trainable_ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
}
