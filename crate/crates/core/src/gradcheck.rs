//! Central finite-difference checks of the autodiff engine.
//!
//! Every case is scalarized with a fixed random projection `c`, i.e. the
//! checked function is `⟨c, f(x)⟩`, so the whole Jacobian participates
//! rather than just its column sums.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Pad2d, UpsampleMode};
use crate::cnn::BasicBlock;
use crate::decoder::AttentionGate;
use crate::fusion::{MugenBlock, MugenConfig};
use crate::losses::{combined_loss, total_loss, LossConfig};
use crate::nn::{ParamStore, Session};
use crate::vit::{Block, PatchConfig};
use crate::{Error, Result, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error. Gradients that vanish
/// identically (e.g. a key bias under softmax) leave only round-off on
/// both sides, about 1e-10 at this step size.
pub const FLOOR: f64 = 1e-6;

type Forward = Box<dyn Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Op,
    Composite,
}

/// A differentiable function of some input tensors and the trainable
/// parameters of `store`.
pub struct Case {
    pub name: &'static str,
    pub kind: Kind,
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub forward: Forward,
}

impl Case {
    fn op(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Self { name, kind: Kind::Op, store: ParamStore::new(), inputs, forward: Box::new(f) }
    }

    fn composite(
        name: &'static str,
        store: ParamStore<f64>,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self { name, kind: Kind::Composite, store, inputs, forward: Box::new(f) }
    }

    pub fn tolerance(&self) -> f64 {
        match self.kind {
            Kind::Op => OP_TOLERANCE,
            Kind::Composite => COMPOSITE_TOLERANCE,
        }
    }

    /// Value of the raw (unprojected) output. Training-mode batch norm uses
    /// batch statistics, so the running buffers never feed back; the store
    /// is cloned anyway to keep every evaluation independent.
    pub fn output(&self, inputs: &[Tensor<f64>], store: &ParamStore<f64>) -> Result<Tensor<f64>> {
        let mut store = store.clone();
        let mut s = Session::new(&mut store, true, false);
        let vars: Vec<Var> = inputs.iter().map(|t| s.input(t.clone())).collect();
        let out = (self.forward)(&mut s, &vars)?;
        Ok(s.value(out).clone())
    }

    /// Gradients of `⟨c, f⟩` with respect to every input, followed by every
    /// trainable parameter in store order.
    pub fn analytic(&self, projection: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
        let mut store = self.store.clone();
        let mut s = Session::new(&mut store, true, true);
        let vars: Vec<Var> = self.inputs.iter().map(|t| s.graph.param(t.clone())).collect();
        let out = (self.forward)(&mut s, &vars)?;
        let c = s.input(projection.clone());
        let prod = s.graph.mul(out, c)?;
        let loss = s.graph.sum(prod);
        let params = s.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| s.graph.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        let mut by_id = params.into_iter().collect::<std::collections::HashMap<_, _>>();
        for id in self.store.trainable_ids() {
            grads.push(by_id.remove(&id).unwrap_or_else(|| vec![0.0; self.store.get(id).len()]));
        }
        Ok(grads)
    }

    /// Number of tensors [`Case::analytic`] reports on.
    pub fn num_tensors(&self) -> usize {
        self.inputs.len() + self.store.num_trainable()
    }
}

/// Outcome of checking one case.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub kind: Kind,
    pub max_rel_err: f64,
    pub coords: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, FLOOR)` over the sampled coordinates.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(FLOOR, f64::max);
    diff / scale
}

/// Checks `case` on at most `max_coords` randomly chosen coordinates per
/// tensor.
pub fn check(case: &Case, max_coords: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_dims = case.output(&case.inputs, &case.store)?.dims().to_vec();
    let projection = Tensor::uniform(&out_dims, -1.0, 1.0, &mut rng);
    let analytic = case.analytic(&projection)?;
    let objective = |inputs: &[Tensor<f64>], store: &ParamStore<f64>| -> Result<f64> {
        let out = case.output(inputs, store)?;
        Ok(out.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum())
    };
    let param_ids: Vec<_> = case.store.trainable_ids().collect();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (k, grad) in analytic.iter().enumerate() {
        let idx = sample_coords(grad.len(), max_coords, &mut rng);
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        for &i in &idx {
            let eval = |delta: f64| -> Result<f64> {
                let mut inputs = case.inputs.clone();
                let mut store = case.store.clone();
                if k < inputs.len() {
                    inputs[k].data_mut()[i] += delta;
                } else {
                    store.get_mut(param_ids[k - inputs.len()]).data_mut()[i] += delta;
                }
                objective(&inputs, &store)
            };
            let fd = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            a.push(grad[i]);
            n.push(fd);
        }
        coords += idx.len();
        worst = worst.max(rel_error(&a, &n));
    }
    Ok(CheckResult { name: case.name, kind: case.kind, max_rel_err: worst, coords, tolerance: case.tolerance() })
}

fn sample_coords(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, max).into_vec()
}

fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(dims, 1.0, rng)
}

/// Values in `(0.05, 0.95)`, away from the BCE clamp.
fn probs(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(dims, 0.05, 0.95, rng)
}

fn binary(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    Tensor::new(dims, data).expect("dims match")
}

/// Every differentiable op of the engine.
pub fn op_cases(seed: u64) -> Vec<Case> {
    use crate::autodiff::Activation::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let img = [2, 3, 5, 4];
    let mut cases = vec![
        Case::op("add", vec![randn(&[3, 4], r), randn(&[3, 4], r)], |s, v| s.graph.add(v[0], v[1])),
        Case::op("add_broadcast", vec![randn(&[2, 3, 2, 2], r), randn(&[1, 3, 1, 1], r)], |s, v| s.graph.add(v[0], v[1])),
        Case::op("sub", vec![randn(&[3, 4], r), randn(&[3, 4], r)], |s, v| s.graph.sub(v[0], v[1])),
        Case::op("mul", vec![randn(&[3, 4], r), randn(&[3, 4], r)], |s, v| s.graph.mul(v[0], v[1])),
        Case::op("mul_broadcast", vec![randn(&[2, 3, 2, 2], r), randn(&[2, 3, 1, 1], r)], |s, v| s.graph.mul(v[0], v[1])),
        Case::op("scale", vec![randn(&[5], r)], |s, v| Ok(s.graph.scale(v[0], -1.7))),
        Case::op("add_scalar", vec![randn(&[5], r)], |s, v| Ok(s.graph.add_scalar(v[0], 0.3))),
        Case::op("sum", vec![randn(&[2, 5], r)], |s, v| Ok(s.graph.sum(v[0]))),
        Case::op("mean", vec![randn(&[2, 5], r)], |s, v| Ok(s.graph.mean(v[0]))),
        Case::op("broadcast_to", vec![randn(&[1, 3, 1], r)], |s, v| s.graph.broadcast_to(v[0], &[2, 3, 4])),
        Case::op("matmul", vec![randn(&[3, 4], r), randn(&[4, 2], r)], |s, v| s.graph.matmul(v[0], v[1])),
        Case::op("matmul_batched", vec![randn(&[2, 3, 4], r), randn(&[2, 4, 5], r)], |s, v| s.graph.matmul(v[0], v[1])),
        Case::op("permute", vec![randn(&[2, 3, 4], r)], |s, v| s.graph.permute(v[0], &[2, 0, 1])),
        Case::op("transpose", vec![randn(&[3, 5], r)], |s, v| s.graph.transpose(v[0])),
        Case::op("reshape", vec![randn(&[2, 6], r)], |s, v| s.graph.reshape(v[0], &[3, 4])),
        Case::op("softmax_rows", vec![randn(&[3, 5], r)], |s, v| Ok(s.graph.softmax_rows(v[0]))),
        Case::op("layer_norm", vec![randn(&[4, 6], r), randn(&[6], r), randn(&[6], r)], |s, v| {
            s.graph.layer_norm(v[0], v[1], v[2], 1e-6)
        }),
        Case::op("batch_norm", vec![randn(&img, r), randn(&[3], r), randn(&[3], r)], |s, v| {
            let (mut m, mut var) = (vec![0.0; 3], vec![1.0; 3]);
            let stats = crate::autodiff::RunningStats { mean: &mut m, var: &mut var, momentum: 0.1 };
            s.graph.batch_norm(v[0], v[1], v[2], stats, true, 1e-5)
        }),
        Case::op("conv2d", vec![randn(&img, r), randn(&[4, 3, 3, 3], r), randn(&[4], r)], |s, v| {
            s.graph.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        Case::op("conv2d_stride2", vec![randn(&[1, 2, 6, 6], r), randn(&[3, 2, 3, 3], r)], |s, v| {
            s.graph.conv2d_padded(v[0], v[1], None, 2, Pad2d::same(3))
        }),
        Case::op("conv2d_patch", vec![randn(&[1, 2, 8, 8], r), randn(&[3, 2, 4, 4], r), randn(&[3], r)], |s, v| {
            s.graph.conv2d(v[0], v[1], Some(v[2]), 4, 0)
        }),
        Case::op("conv2d_pointwise", vec![randn(&img, r), randn(&[2, 3, 1, 1], r)], |s, v| s.graph.conv2d(v[0], v[1], None, 1, 0)),
        Case::op("global_avg_pool", vec![randn(&img, r)], |s, v| s.graph.global_avg_pool(v[0])),
        Case::op("global_max_pool", vec![randn(&img, r)], |s, v| s.graph.global_max_pool(v[0])),
        Case::op("max_pool2d", vec![randn(&[1, 2, 6, 6], r)], |s, v| s.graph.max_pool2d(v[0], 3, 2, Pad2d::same(3))),
        Case::op("avg_pool2d", vec![randn(&[1, 2, 4, 6], r)], |s, v| s.graph.avg_pool2d(v[0], 2)),
        Case::op("upsample_nearest", vec![randn(&[1, 2, 3, 2], r)], |s, v| s.graph.upsample(v[0], 2, UpsampleMode::Nearest)),
        Case::op("upsample_bilinear", vec![randn(&[1, 2, 3, 2], r)], |s, v| s.graph.upsample(v[0], 4, UpsampleMode::Bilinear)),
        Case::op("concat_channels", vec![randn(&[2, 1, 2, 3], r), randn(&[2, 3, 2, 3], r)], |s, v| {
            s.graph.concat_channels(&[v[0], v[1]])
        }),
    ];
    for (name, act) in [("relu", Relu), ("sigmoid", Sigmoid), ("gelu", Gelu), ("tanh", Tanh), ("exp", Exp)] {
        cases.push(Case::op(name, vec![randn(&[3, 4], r)], move |s, v| Ok(s.graph.activation(v[0], act))));
    }
    let (p, g, w) = (probs(&[2, 1, 4, 4], r), binary(&[2, 1, 4, 4], r), Tensor::uniform(&[2, 1, 4, 4], 1.0, 6.0, r));
    let (g2, w2) = (g.clone(), w.clone());
    cases.push(Case::op("weighted_bce", vec![p.clone()], move |s, v| {
        let (t, w) = (s.input(g.clone()), s.input(w.clone()));
        s.graph.weighted_bce(v[0], t, w)
    }));
    let (g3, w3) = (g2.clone(), w2.clone());
    cases.push(Case::op("weighted_iou", vec![p.clone()], move |s, v| {
        let (t, w) = (s.input(g2.clone()), s.input(w2.clone()));
        s.graph.weighted_iou(v[0], t, w)
    }));
    cases.push(Case::op("combined_loss", vec![p], move |s, v| {
        let (t, w) = (s.input(g3.clone()), s.input(w3.clone()));
        combined_loss(&mut s.graph, v[0], t, w, 1.2)
    }));
    cases
}

/// The composite blocks of the network at small sizes.
pub fn composite_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();

    let cfg = PatchConfig { patch_size: 4, embed_dim: 8, num_heads: 2, num_layers: 1, mlp_ratio: 2 };
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, r, "msa", &cfg);
    cases.push(Case::composite("msa_block", store, vec![randn(&[2, 5, 8], r)], move |s, v| block.forward(s, v[0])));

    for (name, in_ch, out_ch, stride) in [("basic_block", 3, 3, 1), ("basic_block_projection", 2, 4, 2)] {
        let mut store = ParamStore::new();
        let block = BasicBlock::new(&mut store, r, name, in_ch, out_ch, stride)?;
        cases.push(Case::composite(name, store, vec![randn(&[2, in_ch, 4, 4], r)], move |s, v| block.forward(s, v[0])));
    }

    for (name, attention) in [("mugen_fuse", true), ("mugen_fuse_plain", false)] {
        let mut store = ParamStore::new();
        let cfg = MugenConfig { channels: 4, reduction: 2, out_channels: 3 };
        let block = MugenBlock::new(&mut store, r, name, cfg, attention)?;
        let inputs = vec![randn(&[2, 4, 3, 3], r), randn(&[2, 4, 3, 3], r)];
        cases.push(Case::composite(name, store, inputs, move |s, v| block.forward(s, v[0], v[1])));
    }

    let mut store = ParamStore::new();
    let gate = AttentionGate::new(&mut store, r, "ag", 3, 4);
    let inputs = vec![randn(&[2, 3, 3, 3], r), randn(&[2, 4, 3, 3], r)];
    cases.push(Case::composite("attention_gate", store, inputs, move |s, v| gate.forward(s, v[0], v[1])));

    let dims = [2, 1, 8, 8];
    let mask = binary(&dims, r);
    let inputs = vec![probs(&dims, r), probs(&dims, r), probs(&dims, r)];
    let loss_cfg = LossConfig { weight_kernel: 3, ..LossConfig::default() };
    cases.push(Case::composite("total_loss", ParamStore::new(), inputs, move |s, v| {
        Ok(total_loss(&mut s.graph, v[0], v[1], v[2], &mask, &loss_cfg)?.total)
    }));
    Ok(cases)
}

/// Module names accepted by [`cases_for`].
pub const MODULES: [&str; 6] = ["tensor_autodiff", "vit_branch", "cnn_branch", "mugen_fusion", "decoder_ag", "losses"];

fn module_of(case: &Case) -> &'static str {
    match case.name {
        "weighted_bce" | "weighted_iou" | "combined_loss" | "total_loss" => "losses",
        "msa_block" => "vit_branch",
        n if n.starts_with("basic_block") => "cnn_branch",
        n if n.starts_with("mugen_fuse") => "mugen_fusion",
        "attention_gate" => "decoder_ag",
        _ => "tensor_autodiff",
    }
}

/// Every case, or those of one module or with one case name.
pub fn cases_for(filter: Option<&str>, seed: u64) -> Result<Vec<Case>> {
    let mut cases = op_cases(seed);
    cases.extend(composite_cases(seed)?);
    let Some(f) = filter else { return Ok(cases) };
    let picked: Vec<Case> = cases.into_iter().filter(|c| module_of(c) == f || c.name == f).collect();
    if picked.is_empty() {
        return Err(Error::Config(format!("unknown gradcheck module `{f}`; expected one of {MODULES:?} or a case name")));
    }
    Ok(picked)
}

/// Runs every op and composite case.
pub fn run_all(seed: u64, max_coords: usize) -> Result<Vec<CheckResult>> {
    cases_for(None, seed)?.iter().map(|c| check(c, max_coords, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_is_scale_free() {
        assert_eq!(rel_error(&[2.0, 4.0], &[2.0, 4.0]), 0.0);
        assert!((rel_error(&[1e3], &[1.001e3]) - 1e-3 / 1.001).abs() < 1e-12);
        assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn mul_passes_and_a_mismatch_is_flagged() {
        let mut cases = op_cases(1);
        let mul = cases.iter_mut().find(|c| c.name == "mul").unwrap();
        let res = check(mul, 50, 1).unwrap();
        assert!(res.passed(), "{res:?}");
        assert!(rel_error(&[2.0], &[3.0]) > OP_TOLERANCE);
    }

    #[test]
    fn every_module_has_cases() {
        for m in MODULES {
            assert!(!cases_for(Some(m), 0).unwrap().is_empty(), "{m}");
        }
        assert_eq!(cases_for(Some("conv2d"), 0).unwrap().len(), 1);
        assert!(cases_for(Some("nope"), 0).is_err());
    }
}
