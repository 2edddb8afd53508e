//! Mugen fusion: squeeze-excitation on the transformer stream, max-pool
//! channel attention on the CNN stream, and a residual conv block over the
//! concatenation `[t̂, r̂, t, r]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, ConvBn, Linear, ParamStore, Session};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MugenConfig {
    /// Channels of each incoming stream.
    pub channels: usize,
    /// Bottleneck reduction rate of both gates.
    pub reduction: usize,
    pub out_channels: usize,
}

impl MugenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "{} channels not divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("fusion needs at least one output channel".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Squeeze {
    Avg,
    Max,
}

/// Pool → FC(C→C/r) → ReLU → FC(C/r→C) → sigmoid → per-channel scale.
#[derive(Debug, Clone)]
pub struct ChannelGate {
    pub fc1: Linear,
    pub fc2: Linear,
    pub squeeze: Squeeze,
    pub channels: usize,
}

impl ChannelGate {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
        squeeze: Squeeze,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible by reduction {reduction}")));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, channels),
            squeeze,
            channels,
        })
    }

    /// Squeeze-excitation gate (average pooling).
    pub fn se<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, channels, reduction, Squeeze::Avg)
    }

    /// Channel attention with the max-pool path only.
    pub fn max_attention<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, channels, reduction, Squeeze::Max)
    }

    /// Gate values `N×C` in (0, 1).
    pub fn gate<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let dims = s.dims(x).to_vec();
        if dims.len() != 4 || dims[1] != self.channels {
            return Err(shape_err!("channel gate expects N×{}×H×W, got {dims:?}", self.channels));
        }
        let pooled = match self.squeeze {
            Squeeze::Avg => s.graph.global_avg_pool(x)?,
            Squeeze::Max => s.graph.global_max_pool(x)?,
        };
        let h = self.fc1.forward(s, pooled)?;
        let h = s.graph.relu(h);
        let g = self.fc2.forward(s, h)?;
        Ok(s.graph.sigmoid(g))
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = self.gate(s, x)?;
        let d = s.dims(x).to_vec();
        let g = s.graph.reshape(g, &[d[0], d[1], 1, 1])?;
        s.graph.mul(x, g)
    }
}

/// Residual fusion of one pyramid scale.
#[derive(Debug, Clone)]
pub struct MugenBlock {
    pub cfg: MugenConfig,
    pub se: ChannelGate,
    pub ca: ChannelGate,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Conv2d,
    /// When false the gated copies are replaced by the raw streams,
    /// i.e. the residual block sees `[t, r, t, r]`.
    pub attention: bool,
}

impl MugenBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: MugenConfig,
        attention: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let c4 = 4 * cfg.channels;
        Ok(Self {
            cfg,
            se: ChannelGate::se(store, rng, &format!("{name}.se"), cfg.channels, cfg.reduction)?,
            ca: ChannelGate::max_attention(store, rng, &format!("{name}.ca"), cfg.channels, cfg.reduction)?,
            conv1: ConvBn::new(store, rng, &format!("{name}.conv1"), c4, cfg.out_channels, 3, 1, true),
            conv2: ConvBn::new(store, rng, &format!("{name}.conv2"), cfg.out_channels, cfg.out_channels, 3, 1, false),
            shortcut: Conv2d::new(store, rng, &format!("{name}.shortcut"), c4, cfg.out_channels, 1, 1, true),
            attention,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, t: Var, r: Var) -> Result<Var> {
        if s.dims(t) != s.dims(r) {
            return Err(shape_err!("fusion streams differ: {:?} vs {:?}", s.dims(t), s.dims(r)));
        }
        let (th, rh) = if self.attention {
            (self.se.forward(s, t)?, self.ca.forward(s, r)?)
        } else {
            (t, r)
        };
        let f = s.graph.concat_channels(&[th, rh, t, r])?;
        let main = self.conv1.forward(s, f)?;
        let main = self.conv2.forward(s, main)?;
        let skip = self.shortcut.forward(s, f)?;
        let y = s.graph.add(main, skip)?;
        Ok(s.graph.relu(y))
    }
}

/// Conv-BN stack reducing a fused map to one sigmoid channel.
#[derive(Debug, Clone)]
pub struct SideHead {
    pub hidden: ConvBn,
    pub out: Conv2d,
}

impl SideHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
    ) -> Self {
        let mid = (in_ch / 2).max(1);
        Self {
            hidden: ConvBn::new(store, rng, &format!("{name}.hidden"), in_ch, mid, 3, 1, true),
            out: Conv2d::new(store, rng, &format!("{name}.out"), mid, 1, 1, 1, true),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, y: Var) -> Result<Var> {
        let h = self.hidden.forward(s, y)?;
        let z = self.out.forward(s, h)?;
        Ok(s.graph.sigmoid(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_fc_gates_halve_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for squeeze in [Squeeze::Avg, Squeeze::Max] {
            let mut store = ParamStore::<f64>::new();
            let g = ChannelGate::new(&mut store, &mut rng, "g", 4, 2, squeeze).unwrap();
            zero_params(&mut store, "g");
            let mut s = Session::eval(&mut store);
            let xt = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng);
            let x = s.input(xt.clone());
            let y = g.forward(&mut s, x).unwrap();
            for (a, b) in s.value(y).data().iter().zip(xt.data()) {
                assert!((a - 0.5 * b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn max_gate_sees_only_channel_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let g = ChannelGate::max_attention(&mut store, &mut rng, "ca", 2, 1).unwrap();
        let a = Tensor::from_f64(&[1, 2, 2, 2], &[0.0, 3.0, -1.0, 1.0, 2.0, 2.0, 0.5, 0.0]).unwrap();
        let b = Tensor::from_f64(&[1, 2, 2, 2], &[3.0, 3.0, 3.0, 3.0, -4.0, 2.0, 1.0, 1.5]).unwrap();
        let mut s = Session::eval(&mut store);
        let (xa, xb) = (s.input(a), s.input(b));
        let ga = g.gate(&mut s, xa).unwrap();
        let gb = g.gate(&mut s, xb).unwrap();
        assert_eq!(s.value(ga).data(), s.value(gb).data());
    }

    #[test]
    fn zero_streams_fuse_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let cfg = MugenConfig { channels: 4, reduction: 2, out_channels: 8 };
        let m = MugenBlock::new(&mut store, &mut rng, "m", cfg, true).unwrap();
        store.zero_biases();
        let mut s = Session::eval(&mut store);
        let t = s.input(Tensor::zeros(&[1, 4, 12, 16]));
        let r = s.input(Tensor::zeros(&[1, 4, 12, 16]));
        let y = m.forward(&mut s, t, r).unwrap();
        assert_eq!(s.dims(y), &[1, 8, 12, 16]);
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_streams_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let cfg = MugenConfig { channels: 4, reduction: 2, out_channels: 4 };
        let m = MugenBlock::new(&mut store, &mut rng, "m", cfg, true).unwrap();
        let mut s = Session::train(&mut store);
        let t = s.input(Tensor::zeros(&[1, 4, 4, 4]));
        let r = s.input(Tensor::zeros(&[1, 4, 4, 8]));
        assert!(matches!(m.forward(&mut s, t, r), Err(Error::Shape(_))));
    }

    #[test]
    fn reduction_must_divide_channels() {
        let cfg = MugenConfig { channels: 6, reduction: 4, out_channels: 4 };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
