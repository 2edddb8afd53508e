//! Full network: transformer and CNN branches, three Mugen fusions, the
//! gated decoder, and ablation switches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::cnn::{CnnBranch, ResNetConfig};
use crate::decoder::{Decoder, DecoderState};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{MugenBlock, MugenConfig};
use crate::nn::{ParamId, ParamStore, Session};
use crate::tensor::{Real, Tensor};
use crate::vit::{BranchOutput, PatchConfig, PredictionHead, VitBranch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Branches {
    pub transformer: bool,
    pub cnn: bool,
    pub mugen_module: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self { transformer: true, cnn: true, mugen_module: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Transformer branch off.
    Tb,
    /// CNN branch off.
    Cb,
    /// Attention inside the Mugen fusion off.
    Mm,
}

impl Branches {
    pub fn ablate(mut self, a: Ablation) -> Self {
        match a {
            Ablation::Tb => self.transformer = false,
            Ablation::Cb => self.cnn = false,
            Ablation::Mm => self.mugen_module = false,
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub patch: PatchConfig,
    pub resnet: ResNetConfig,
    /// Widths `D₀, D₁, D₂` of both pyramids and of the fused maps.
    pub pyramid: [usize; 3],
    /// Widths of the decoder stages `z¹, z², z³`.
    pub decoder: [usize; 3],
    pub reduction: usize,
    #[serde(default)]
    pub branches: Branches,
}

impl ModelConfig {
    /// 64×48 input, 4-pixel patches, narrow widths.
    pub fn desk() -> Self {
        Self {
            height: 48,
            width: 64,
            in_channels: 3,
            patch: PatchConfig { patch_size: 4, embed_dim: 64, num_heads: 4, num_layers: 2, mlp_ratio: 2 },
            resnet: ResNetConfig::desk(),
            pyramid: [64, 64, 64],
            decoder: [64, 32, 16],
            reduction: 2,
            branches: Branches::default(),
        }
    }

    /// 256×192 input, 16-pixel patches, DeiT-small-sized transformer and a
    /// ResNet-34 layout.
    pub fn paper() -> Self {
        Self {
            height: 192,
            width: 256,
            in_channels: 3,
            patch: PatchConfig { patch_size: 16, embed_dim: 384, num_heads: 6, num_layers: 12, mlp_ratio: 4 },
            resnet: ResNetConfig::resnet34(),
            pyramid: [384, 128, 64],
            decoder: [128, 64, 32],
            reduction: 16,
            branches: Branches::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.branches.transformer && !self.branches.cnn {
            return Err(Error::Config("at least one encoder branch must be enabled".into()));
        }
        if self.height % 16 != 0 || self.width % 16 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "resolution {}×{} must be a nonzero multiple of 16",
                self.width, self.height
            )));
        }
        if self.pyramid[0] != self.patch.embed_dim {
            return Err(Error::Config(format!(
                "first pyramid width {} must equal embed dim {}",
                self.pyramid[0], self.patch.embed_dim
            )));
        }
        if self.pyramid.iter().chain(&self.decoder).any(|&c| c == 0) || self.in_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        self.patch.validate(self.height, self.width)?;
        self.resnet.validate()?;
        for &c in &self.pyramid {
            MugenConfig { channels: c, reduction: self.reduction, out_channels: c }.validate()?;
        }
        Ok(())
    }

    /// Spatial extents of the three pyramid scales.
    pub fn pyramid_sizes(&self) -> [(usize, usize); 3] {
        let (h, w) = (self.height, self.width);
        [(h / 16, w / 16), (h / 8, w / 8), (h / 4, w / 4)]
    }
}

/// Stand-in for a disabled branch: learned constant maps shared by every
/// sample, plus the branch's own prediction head.
#[derive(Debug, Clone)]
pub struct ConstantStream {
    pub maps: [ParamId; 3],
    pub head: PredictionHead,
}

impl ConstantStream {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &ModelConfig,
    ) -> Self {
        let sizes = cfg.pyramid_sizes();
        let maps = std::array::from_fn(|i| {
            let (h, w) = sizes[i];
            store.add(format!("{name}.map{i}"), Tensor::zeros(&[1, cfg.pyramid[i], h, w]))
        });
        Self { maps, head: PredictionHead::new(store, rng, &format!("{name}.head"), cfg.pyramid[2], 4) }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, batch: usize) -> Result<BranchOutput> {
        let mut pyramid = [Var(0); 3];
        for (slot, &id) in pyramid.iter_mut().zip(&self.maps) {
            let m = s.p(id);
            let mut d = s.dims(m).to_vec();
            d[0] = batch;
            *slot = s.graph.broadcast_to(m, &d)?;
        }
        let pred = self.head.forward(s, pyramid[2])?;
        Ok(BranchOutput { pyramid, pred })
    }
}

#[derive(Debug, Clone)]
pub enum TransformerStream {
    On(VitBranch),
    Off(ConstantStream),
}

#[derive(Debug, Clone)]
pub enum CnnStream {
    On(CnnBranch),
    Off(ConstantStream),
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub s_t: Var,
    pub s_r: Var,
    pub s_z: Var,
    pub t: [Var; 3],
    pub r: [Var; 3],
    pub y: [Var; 3],
    pub decoder: DecoderState,
}

#[derive(Debug, Clone)]
pub struct MugenNet {
    pub cfg: ModelConfig,
    pub transformer: TransformerStream,
    pub cnn: CnnStream,
    pub fusion: [MugenBlock; 3],
    pub decoder: Decoder,
}

impl MugenNet {
    /// Builds the network and registers its parameters in `store`.
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let transformer = if cfg.branches.transformer {
            TransformerStream::On(VitBranch::new(
                store,
                rng,
                "vit",
                cfg.in_channels,
                &cfg.patch,
                cfg.pyramid,
                cfg.height,
                cfg.width,
            )?)
        } else {
            TransformerStream::Off(ConstantStream::new(store, rng, "vit_const", cfg))
        };
        let cnn = if cfg.branches.cnn {
            CnnStream::On(CnnBranch::new(store, rng, "cnn", cfg.in_channels, &cfg.resnet, cfg.pyramid)?)
        } else {
            CnnStream::Off(ConstantStream::new(store, rng, "cnn_const", cfg))
        };
        let mut fusion = Vec::with_capacity(3);
        for (i, &c) in cfg.pyramid.iter().enumerate() {
            let mc = MugenConfig { channels: c, reduction: cfg.reduction, out_channels: c };
            fusion.push(MugenBlock::new(store, rng, &format!("mugen{i}"), mc, cfg.branches.mugen_module)?);
        }
        let fusion: [MugenBlock; 3] = fusion.try_into().expect("three scales");
        let decoder = Decoder::new(store, rng, "decoder", cfg.pyramid, cfg.decoder);
        Ok(Self { cfg: cfg.clone(), transformer, cnn, fusion, decoder })
    }

    /// Convenience constructor returning a fresh parameter store.
    pub fn init<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let net = Self::new(&mut store, rng, cfg)?;
        Ok((net, store))
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, image: Var) -> Result<ModelOutput> {
        let d = s.dims(image).to_vec();
        let expect = [self.cfg.in_channels, self.cfg.height, self.cfg.width];
        if d.len() != 4 || d[1..] != expect {
            return Err(shape_err!("model expects N×{}×{}×{} input, got {d:?}", expect[0], expect[1], expect[2]));
        }
        let n = d[0];
        let tb = match &self.transformer {
            TransformerStream::On(b) => b.forward(s, image)?,
            TransformerStream::Off(c) => c.forward(s, n)?,
        };
        let cb = match &self.cnn {
            CnnStream::On(b) => b.forward(s, image)?,
            CnnStream::Off(c) => c.forward(s, n)?,
        };
        let mut y = [Var(0); 3];
        for i in 0..3 {
            y[i] = self.fusion[i].forward(s, tb.pyramid[i], cb.pyramid[i])?;
        }
        let dec = self.decoder.forward(s, y)?;
        Ok(ModelOutput {
            s_t: tb.pred,
            s_r: cb.pred,
            s_z: dec.z_out,
            t: tb.pyramid,
            r: cb.pyramid,
            y,
            decoder: dec,
        })
    }

    /// Eval-mode fused prediction for a batch, no tape kept.
    pub fn predict<T: Real>(&self, store: &mut ParamStore<T>, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::new(store, false, false);
        let x = s.input(images);
        let out = self.forward(&mut s, x)?;
        Ok(s.value(out.s_z).clone())
    }
}
