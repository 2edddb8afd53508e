//! Attention-gated progressive decoder: three fused maps in, one
//! full-resolution sigmoid map out.

use rand::Rng;

use crate::autodiff::{UpsampleMode, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, ConvBn, ParamStore, Session};
use crate::tensor::Real;

/// Additive gate `α = σ(ψ(relu(W_g·g + W_x·x)))`, output `α ⊙ x`.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    pub wg: Conv2d,
    pub wx: Conv2d,
    pub psi: Conv2d,
    pub skip_ch: usize,
}

impl AttentionGate {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        gate_ch: usize,
        skip_ch: usize,
    ) -> Self {
        let mid = (skip_ch / 2).max(1);
        Self {
            wg: Conv2d::new(store, rng, &format!("{name}.wg"), gate_ch, mid, 1, 1, true),
            wx: Conv2d::new(store, rng, &format!("{name}.wx"), skip_ch, mid, 1, 1, false),
            psi: Conv2d::new(store, rng, &format!("{name}.psi"), mid, 1, 1, 1, true),
            skip_ch,
        }
    }

    /// The one-channel gate map `N×1×h×w`.
    pub fn alpha<T: Real>(&self, s: &mut Session<'_, T>, g: Var, x: Var) -> Result<Var> {
        let (gd, xd) = (s.dims(g).to_vec(), s.dims(x).to_vec());
        if gd.len() != 4 || xd.len() != 4 || gd[0] != xd[0] || gd[2..] != xd[2..] {
            return Err(shape_err!("attention gate needs aligned maps, got {gd:?} and {xd:?}"));
        }
        let a = self.wg.forward(s, g)?;
        let b = self.wx.forward(s, x)?;
        let h = s.graph.add(a, b)?;
        let h = s.graph.relu(h);
        let logit = self.psi.forward(s, h)?;
        Ok(s.graph.sigmoid(logit))
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, g: Var, x: Var) -> Result<Var> {
        let alpha = self.alpha(s, g, x)?;
        s.graph.mul(x, alpha)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub z1: Var,
    pub z2: Var,
    pub z3: Var,
    pub z_out: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub stage1: ConvBn,
    pub gate2: AttentionGate,
    pub stage2: ConvBn,
    pub gate3: AttentionGate,
    pub stage3: ConvBn,
    pub out: Conv2d,
}

impl Decoder {
    /// `fused` are the channel counts of `y¹, y², y³`; `widths` those of `z¹, z², z³`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fused: [usize; 3],
        widths: [usize; 3],
    ) -> Self {
        Self {
            stage1: ConvBn::new(store, rng, &format!("{name}.stage1"), fused[0], widths[0], 3, 1, true),
            gate2: AttentionGate::new(store, rng, &format!("{name}.gate2"), widths[0], fused[1]),
            stage2: ConvBn::new(store, rng, &format!("{name}.stage2"), widths[0] + fused[1], widths[1], 3, 1, true),
            gate3: AttentionGate::new(store, rng, &format!("{name}.gate3"), widths[1], fused[2]),
            stage3: ConvBn::new(store, rng, &format!("{name}.stage3"), widths[1] + fused[2], widths[2], 3, 1, true),
            out: Conv2d::new(store, rng, &format!("{name}.out"), widths[2], 1, 3, 1, true),
        }
    }

    fn gated_stage<T: Real>(
        s: &mut Session<'_, T>,
        gate: &AttentionGate,
        conv: &ConvBn,
        z: Var,
        y: Var,
    ) -> Result<Var> {
        let gated = gate.forward(s, z, y)?;
        let cat = s.graph.concat_channels(&[z, gated])?;
        let h = conv.forward(s, cat)?;
        s.graph.upsample2x(h, UpsampleMode::Bilinear)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, y: [Var; 3]) -> Result<DecoderState> {
        let h = self.stage1.forward(s, y[0])?;
        let z1 = s.graph.upsample2x(h, UpsampleMode::Bilinear)?;
        let z2 = Self::gated_stage(s, &self.gate2, &self.stage2, z1, y[1])?;
        let z3 = Self::gated_stage(s, &self.gate3, &self.stage3, z2, y[2])?;
        let up = s.graph.upsample2x(z3, UpsampleMode::Bilinear)?;
        let logit = self.out.forward(s, up)?;
        let z_out = s.graph.sigmoid(logit);
        Ok(DecoderState { z1, z2, z3, z_out })
    }
}
