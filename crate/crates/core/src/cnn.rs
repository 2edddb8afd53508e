//! Residual convolutional branch producing the `r⁰, r¹, r²` pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Pad2d, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{ConvBn, ParamStore, Session};
use crate::tensor::Real;
use crate::vit::{BranchOutput, PredictionHead, UpStage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// 3×3 stride-1 conv; every stage downsamples.
    Compact,
    /// 7×7 stride-2 conv followed by 3×3 stride-2 max pooling.
    Classical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub stem: Stem,
    pub stem_channels: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub strides: Vec<usize>,
}

impl ResNetConfig {
    /// Small encoder for 64×48 inputs.
    pub fn desk() -> Self {
        Self {
            stem: Stem::Compact,
            stem_channels: 16,
            widths: vec![16, 32, 64, 64],
            blocks: vec![2, 2, 2, 2],
            strides: vec![2, 2, 2, 2],
        }
    }

    /// ResNet-34 stage layout (3-4-6-3), last stage kept at stride 1 so the
    /// deepest map sits at 1/16 resolution.
    pub fn resnet34() -> Self {
        Self {
            stem: Stem::Classical,
            stem_channels: 64,
            widths: vec![64, 128, 256, 512],
            blocks: vec![3, 4, 6, 3],
            strides: vec![1, 2, 2, 1],
        }
    }

    pub fn output_stride(&self) -> usize {
        let stem = match self.stem {
            Stem::Compact => 1,
            Stem::Classical => 4,
        };
        stem * self.strides.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.blocks.len() != n || self.strides.len() != n {
            return Err(Error::Config("widths, blocks and strides must have equal, nonzero length".into()));
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("stage widths must be non-decreasing: {:?}", self.widths)));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) || self.blocks.contains(&0) {
            return Err(Error::Config("strides must be 1 or 2 and every stage needs a block".into()));
        }
        if self.output_stride() != 16 {
            return Err(Error::Config(format!(
                "encoder output stride is {}, expected 16",
                self.output_stride()
            )));
        }
        Ok(())
    }
}

/// `conv3×3-BN-ReLU-conv3×3-BN` plus identity or projection shortcut, then ReLU.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl BasicBlock {
    /// Adds a 1×1 projection shortcut whenever channels or stride change.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let project = in_ch != out_ch || stride != 1;
        Self::build(store, rng, name, in_ch, out_ch, stride, project)
    }

    /// Identity shortcut only; channel or stride changes are a shape error.
    pub fn with_identity<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        if in_ch != out_ch || stride != 1 {
            return Err(shape_err!(
                "identity shortcut cannot map {in_ch} channels to {out_ch} at stride {stride}"
            ));
        }
        Self::build(store, rng, name, in_ch, out_ch, stride, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        project: bool,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("basic block stride must be 1 or 2, got {stride}")));
        }
        Ok(Self {
            conv1: ConvBn::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, true),
            conv2: ConvBn::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, false),
            shortcut: project
                .then(|| ConvBn::new(store, rng, &format!("{name}.shortcut"), in_ch, out_ch, 1, stride, false)),
            in_ch,
            out_ch,
            stride,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let c = s.dims(x).get(1).copied().unwrap_or(0);
        if c != self.in_ch {
            return Err(shape_err!("basic block expects {} channels, got {:?}", self.in_ch, s.dims(x)));
        }
        let h = self.conv1.forward(s, x)?;
        let h = self.conv2.forward(s, h)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(s, x)?,
            None => x,
        };
        let y = s.graph.add(h, skip)?;
        Ok(s.graph.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct CnnBranch {
    pub cfg: ResNetConfig,
    pub stem: ConvBn,
    pub stages: Vec<Vec<BasicBlock>>,
    /// 1×1 projection of the deepest stage to the pyramid width.
    pub proj: ConvBn,
    pub up1: UpStage,
    pub up2: UpStage,
    pub head: PredictionHead,
}

impl CnnBranch {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        cfg: &ResNetConfig,
        widths: [usize; 3],
    ) -> Result<Self> {
        cfg.validate()?;
        let stem = match cfg.stem {
            Stem::Compact => ConvBn::new(store, rng, &format!("{name}.stem"), in_ch, cfg.stem_channels, 3, 1, true),
            Stem::Classical => ConvBn::new(store, rng, &format!("{name}.stem"), in_ch, cfg.stem_channels, 7, 2, true),
        };
        let mut stages = Vec::with_capacity(cfg.widths.len());
        let mut ch = cfg.stem_channels;
        for (si, ((&w, &nb), &stride)) in cfg.widths.iter().zip(&cfg.blocks).zip(&cfg.strides).enumerate() {
            let mut blocks = Vec::with_capacity(nb);
            for bi in 0..nb {
                let st = if bi == 0 { stride } else { 1 };
                blocks.push(BasicBlock::new(store, rng, &format!("{name}.layer{si}.{bi}"), ch, w, st)?);
                ch = w;
            }
            stages.push(blocks);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            proj: ConvBn::new(store, rng, &format!("{name}.proj"), ch, widths[0], 1, 1, true),
            up1: UpStage::new(store, rng, &format!("{name}.up1"), widths[0], widths[1]),
            up2: UpStage::new(store, rng, &format!("{name}.up2"), widths[1], widths[2]),
            head: PredictionHead::new(store, rng, &format!("{name}.head"), widths[2], 4),
        })
    }

    /// Deepest encoder feature map (stride 16, last stage width).
    pub fn encode<T: Real>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let dims = s.dims(image).to_vec();
        if dims.len() != 4 || dims[2] % 16 != 0 || dims[3] % 16 != 0 {
            return Err(shape_err!("CNN branch needs N×C×H×W with H, W divisible by 16, got {dims:?}"));
        }
        let mut x = self.stem.forward(s, image)?;
        if self.cfg.stem == Stem::Classical {
            x = s.graph.max_pool2d(x, 3, 2, Pad2d::same(3))?;
        }
        for stage in &self.stages {
            for block in stage {
                x = block.forward(s, x)?;
            }
        }
        Ok(x)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, image: Var) -> Result<BranchOutput> {
        let deep = self.encode(s, image)?;
        let r0 = self.proj.forward(s, deep)?;
        let r1 = self.up1.forward(s, r0)?;
        let r2 = self.up2.forward(s, r1)?;
        let pred = self.head.forward(s, r2)?;
        Ok(BranchOutput { pyramid: [r0, r1, r2], pred })
    }
}
