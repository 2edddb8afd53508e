//! Boundary-weighted IoU + BCE loss with deep supervision over the two
//! branch predictions and the fused output.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackCtx, Backward, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Predictions are clamped to `[CLAMP, 1 − CLAMP]` before taking logs.
pub const CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the BCE term relative to the IoU term.
    pub n: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Odd side of the averaging window behind the pixel weights.
    pub weight_kernel: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { n: 6.0 / 5.0, alpha: 0.5, beta: 0.5, gamma: 1.0, weight_kernel: 31 }
    }
}

impl LossConfig {
    pub fn desk() -> Self {
        Self { weight_kernel: 7, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if !(self.n > 0.0) || w.iter().any(|&v| !(v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(format!(
                "loss needs n > 0 and non-negative, not all zero α/β/γ; got {self:?}"
            )));
        }
        if self.weight_kernel % 2 == 0 {
            return Err(Error::Config(format!("weight kernel {} must be odd", self.weight_kernel)));
        }
        Ok(())
    }
}

/// `ω = 1 + 5·|avgpool_k(G) − G|` for a single `h×w` mask. The pool is
/// zero-padded and always divides by `k²`.
pub fn pixel_weights(mask: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    assert_eq!(mask.len(), h * w, "mask length");
    let r = (k / 2) as isize;
    // summed-area table with a zero border row/column
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += mask[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    let area = (k * k) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        let (y0, y1) = (clip(y - r, h), clip(y + r + 1, h));
        for x in 0..w as isize {
            let (x0, x1) = (clip(x - r, w), clip(x + r + 1, w));
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
            let g = mask[y as usize * w + x as usize];
            out.push(1.0 + 5.0 * (s / area - g).abs());
        }
    }
    out
}

/// Pixel weights for an `N×1×H×W` mask batch.
pub fn pixel_weight_map<T: Real>(mask: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let d = mask.dims();
    if d.len() != 4 || d[1] != 1 {
        return Err(shape_err!("pixel weights expect an N×1×H×W mask, got {d:?}"));
    }
    let (h, w) = (d[2], d[3]);
    let m = mask.to_f64_vec();
    let mut out = Vec::with_capacity(m.len());
    for plane in m.chunks(h * w) {
        out.extend(pixel_weights(plane, h, w, k).into_iter().map(T::of));
    }
    Tensor::new(d, out)
}

#[derive(Clone, Copy)]
enum Kind {
    Bce,
    Iou,
}

struct WeightedRule {
    kind: Kind,
    plane: usize,
}

fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

impl<T: Real> Backward<T> for WeightedRule {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (p, g, w) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
        let mut gp = Vec::with_capacity(p.len());
        for (s, &up) in ctx.grad.iter().enumerate() {
            let range = s * self.plane..(s + 1) * self.plane;
            let (ps, gs, ws) = (&p[range.clone()], &g[range.clone()], &w[range]);
            let up = up.f64();
            match self.kind {
                Kind::Bce => {
                    let wsum = crate::tensor::pairwise_sum(ws);
                    for ((&pi, &gi), &wi) in ps.iter().zip(gs).zip(ws) {
                        let raw = pi.f64();
                        let pc = clamp(raw);
                        let (gi, wi) = (gi.f64(), wi.f64());
                        let d = if raw == pc { -gi / pc + (1.0 - gi) / (1.0 - pc) } else { 0.0 };
                        gp.push(T::of(up * wi * d / wsum));
                    }
                }
                Kind::Iou => {
                    let (inter, union) = iou_sums(ps, gs, ws);
                    // ∂(1 − I/U)/∂p = −ω·(g·U − I·(1 − g)) / U²
                    for (&gi, &wi) in gs.iter().zip(ws) {
                        let d = if union > 0.0 {
                            let (gi, wi) = (gi.f64(), wi.f64());
                            -wi * (gi * union - inter * (1.0 - gi)) / (union * union)
                        } else {
                            0.0
                        };
                        gp.push(T::of(up * d));
                    }
                }
            }
        }
        vec![Some(gp), None, None]
    }
}

fn iou_sums<T: Real>(p: &[T], g: &[T], w: &[T]) -> (f64, f64) {
    let mut inter = Vec::with_capacity(p.len());
    let mut union = Vec::with_capacity(p.len());
    for ((&pi, &gi), &wi) in p.iter().zip(g).zip(w) {
        let (pi, gi, wi) = (pi.f64(), gi.f64(), wi.f64());
        inter.push(wi * pi * gi);
        union.push(wi * (pi + gi - pi * gi));
    }
    (crate::tensor::pairwise_sum_f64(&inter), crate::tensor::pairwise_sum_f64(&union))
}

fn bce_value<T: Real>(p: &[T], g: &[T], w: &[T]) -> f64 {
    let terms: Vec<f64> = p
        .iter()
        .zip(g)
        .zip(w)
        .map(|((&pi, &gi), &wi)| {
            let (pc, gi) = (clamp(pi.f64()), gi.f64());
            wi.f64() * (-gi * pc.ln() - (1.0 - gi) * (1.0 - pc).ln())
        })
        .collect();
    crate::tensor::pairwise_sum_f64(&terms) / crate::tensor::pairwise_sum(w)
}

impl<T: Real> Graph<T> {
    fn weighted_loss(&mut self, kind: Kind, pred: Var, target: Var, weights: Var) -> Result<Var> {
        let d = self.dims(pred).to_vec();
        if d.len() != 4 || d[1] != 1 || self.dims(target) != d || self.dims(weights) != d {
            return Err(shape_err!(
                "loss expects matching N×1×H×W maps, got {:?}, {:?}, {:?}",
                d,
                self.dims(target),
                self.dims(weights)
            ));
        }
        let plane = d[2] * d[3];
        let (p, g, w) = (self.value(pred).data(), self.value(target).data(), self.value(weights).data());
        let vals: Vec<T> = (0..d[0])
            .map(|s| {
                let r = s * plane..(s + 1) * plane;
                let (ps, gs, ws) = (&p[r.clone()], &g[r.clone()], &w[r]);
                T::of(match kind {
                    Kind::Bce => bce_value(ps, gs, ws),
                    Kind::Iou => {
                        let (i, u) = iou_sums(ps, gs, ws);
                        if u > 0.0 {
                            1.0 - i / u
                        } else {
                            0.0
                        }
                    }
                })
            })
            .collect();
        let value = Tensor::new(&[d[0]], vals)?;
        let name = match kind {
            Kind::Bce => "weighted_bce",
            Kind::Iou => "weighted_iou",
        };
        Ok(self.push(name, value, &[pred, target, weights], WeightedRule { kind, plane }))
    }

    /// Per-sample `Σω·BCE / Σω`, shape `[N]`.
    pub fn weighted_bce(&mut self, pred: Var, target: Var, weights: Var) -> Result<Var> {
        self.weighted_loss(Kind::Bce, pred, target, weights)
    }

    /// Per-sample `1 − Σω·P·G / Σω·(P + G − P·G)`, shape `[N]`; an empty
    /// union counts as a perfect match.
    pub fn weighted_iou(&mut self, pred: Var, target: Var, weights: Var) -> Result<Var> {
        self.weighted_loss(Kind::Iou, pred, target, weights)
    }
}

/// `L = L_IoU + n·L_BCE`, averaged over the batch.
pub fn combined_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, weights: Var, n: f64) -> Result<Var> {
    let iou = g.weighted_iou(pred, target, weights)?;
    let bce = g.weighted_bce(pred, target, weights)?;
    let bce = g.scale(bce, n);
    let per_sample = g.add(iou, bce)?;
    Ok(g.mean(per_sample))
}

/// Loss nodes of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub transformer: Option<Var>,
    pub cnn: Option<Var>,
    pub fused: Option<Var>,
}

/// `α·L(G, S_t) + β·L(G, S_r) + γ·L(G, S_z)`. Terms with zero weight are
/// not built.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    s_t: Var,
    s_r: Var,
    s_z: Var,
    mask: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    for v in [s_t, s_r, s_z] {
        if g.dims(v) != mask.dims() {
            return Err(shape_err!("prediction {:?} does not match mask {:?}", g.dims(v), mask.dims()));
        }
    }
    let weights = pixel_weight_map(mask, cfg.weight_kernel)?;
    let target = g.input(mask.clone());
    let weights = g.input(weights);
    let term = |g: &mut Graph<T>, s: Var, k: f64| -> Result<Option<Var>> {
        if k == 0.0 {
            return Ok(None);
        }
        combined_loss(g, s, target, weights, cfg.n).map(Some)
    };
    let lt = term(g, s_t, cfg.alpha)?;
    let lr = term(g, s_r, cfg.beta)?;
    let lz = term(g, s_z, cfg.gamma)?;
    let mut total: Option<Var> = None;
    for (l, k) in [(lt, cfg.alpha), (lr, cfg.beta), (lz, cfg.gamma)] {
        if let Some(l) = l {
            let scaled = g.scale(l, k);
            total = Some(match total {
                Some(t) => g.add(t, scaled)?,
                None => scaled,
            });
        }
    }
    let total = total.ok_or_else(|| Error::Config("all deep-supervision weights are zero".into()))?;
    Ok(LossTerms { total, transformer: lt, cnn: lr, fused: lz })
}
