//! Transformer branch: patch embedding, pre-LN encoder blocks, and two
//! learned upsampling stages producing the `t⁰, t¹, t²` pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{UpsampleMode, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, ConvBn, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
}

impl PatchConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || height % p != 0 || width % p != 0 {
            return Err(shape_err!("{height}×{width} image is not divisible into {p}×{p} patches"));
        }
        if 16 % p != 0 {
            return Err(Error::Config(format!("patch size {p} must divide 16")));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// `N×C×H×W` image → `N×T×D` tokens plus a learned positional code.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub pos: ParamId,
    pub grid: (usize, usize),
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        cfg: &PatchConfig,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        cfg.validate(height, width)?;
        let p = cfg.patch_size;
        let grid = (height / p, width / p);
        let proj = Conv2d::patchify(store, rng, &format!("{name}.proj"), in_ch, cfg.embed_dim, p);
        let pos = store.add(format!("{name}.pos"), Tensor::zeros(&[1, grid.0 * grid.1, cfg.embed_dim]));
        Ok(Self { proj, pos, grid, dim: cfg.embed_dim })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Tokens without the positional code.
    pub fn project<T: Real>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let dims = s.dims(image).to_vec();
        let p = self.proj.stride;
        if dims.len() != 4 || dims[2] != self.grid.0 * p || dims[3] != self.grid.1 * p {
            return Err(shape_err!(
                "patch embedding built for {}×{} inputs, got {dims:?}",
                self.grid.0 * p,
                self.grid.1 * p
            ));
        }
        let maps = self.proj.forward(s, image)?; // N×D×h×w
        let n = dims[0];
        let flat = s.graph.reshape(maps, &[n, self.dim, self.num_tokens()])?;
        s.graph.permute(flat, &[0, 2, 1])
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let tokens = self.project(s, image)?;
        let pos = s.p(self.pos);
        s.graph.add(tokens, pos)
    }
}

/// Multi-head self-attention, `softmax(q·kᵀ/√D_h)·v` per head.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim),
            heads,
        }
    }

    fn split_heads<T: Real>(&self, s: &mut Session<'_, T>, x: Var, n: usize, t: usize, dh: usize) -> Result<Var> {
        let x = s.graph.reshape(x, &[n, t, self.heads, dh])?;
        let x = s.graph.permute(x, &[0, 2, 1, 3])?;
        s.graph.reshape(x, &[n * self.heads, t, dh])
    }

    /// Returns the projected output and the attention weights
    /// (`N·heads × T × T`). The output before projection is `mixed`.
    pub fn forward_detailed<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<AttentionTrace> {
        let dims = s.dims(x).to_vec();
        let [n, t, d] = dims[..] else {
            return Err(shape_err!("attention expects N×T×D tokens, got {dims:?}"));
        };
        if d % self.heads != 0 {
            return Err(shape_err!("token dim {d} not divisible by {} heads", self.heads));
        }
        let dh = d / self.heads;
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, x)?;
        let v = self.v.forward(s, x)?;
        let q = self.split_heads(s, q, n, t, dh)?;
        let k = self.split_heads(s, k, n, t, dh)?;
        let v = self.split_heads(s, v, n, t, dh)?;
        let kt = s.graph.transpose(k)?;
        let logits = s.graph.matmul(q, kt)?;
        let logits = s.graph.scale(logits, 1.0 / (dh as f64).sqrt());
        let weights = s.graph.softmax_rows(logits);
        let heads_out = s.graph.matmul(weights, v)?;
        let merged = s.graph.reshape(heads_out, &[n, self.heads, t, dh])?;
        let merged = s.graph.permute(merged, &[0, 2, 1, 3])?;
        let mixed = s.graph.reshape(merged, &[n, t, d])?;
        let out = self.proj.forward(s, mixed)?;
        Ok(AttentionTrace { out, weights, mixed })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(s, x)?.out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    pub out: Var,
    pub weights: Var,
    pub mixed: Var,
}

/// `linear → GELU → linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.graph.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Pre-LN encoder block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: &PatchConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, cfg.num_heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, d * cfg.mlp_ratio),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(s, x)?;
        let a = self.attn.forward(s, h)?;
        let x = s.graph.add(x, a)?;
        let h = self.ln2.forward(s, x)?;
        let m = self.mlp.forward(s, h)?;
        s.graph.add(x, m)
    }
}

/// `upsample2x → 3×3 conv → BN → ReLU`.
#[derive(Debug, Clone)]
pub struct UpStage {
    pub conv: ConvBn,
}

impl UpStage {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        Self { conv: ConvBn::new(store, rng, name, in_ch, out_ch, 3, 1, true) }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let up = s.graph.upsample2x(x, UpsampleMode::Bilinear)?;
        self.conv.forward(s, up)
    }
}

/// One-channel prediction head: `1×1 conv → upsample ×factor → sigmoid`.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub conv: Conv2d,
    pub factor: usize,
}

impl PredictionHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        factor: usize,
    ) -> Self {
        Self { conv: Conv2d::new(store, rng, name, in_ch, 1, 1, 1, true), factor }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let logit = self.conv.forward(s, x)?;
        let up = s.graph.upsample(logit, self.factor, UpsampleMode::Bilinear)?;
        Ok(s.graph.sigmoid(up))
    }
}

/// Multi-scale output of either encoder branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    /// Feature maps at 1/16, 1/8 and 1/4 of the input resolution.
    pub pyramid: [Var; 3],
    /// Auxiliary sigmoid prediction at input resolution.
    pub pred: Var,
}

#[derive(Debug, Clone)]
pub struct VitBranch {
    pub cfg: PatchConfig,
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub up1: UpStage,
    pub up2: UpStage,
    pub head: PredictionHead,
}

impl VitBranch {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        cfg: &PatchConfig,
        widths: [usize; 3],
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height % 16 != 0 || width % 16 != 0 {
            return Err(shape_err!("input {height}×{width} must be divisible by 16"));
        }
        if widths[0] != cfg.embed_dim {
            return Err(Error::Config(format!(
                "t⁰ width {} must equal the embed dim {}",
                widths[0], cfg.embed_dim
            )));
        }
        let embed = PatchEmbed::new(store, rng, &format!("{name}.embed"), in_ch, cfg, height, width)?;
        let blocks = (0..cfg.num_layers)
            .map(|i| Block::new(store, rng, &format!("{name}.blocks.{i}"), cfg))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.embed_dim),
            up1: UpStage::new(store, rng, &format!("{name}.up1"), widths[0], widths[1]),
            up2: UpStage::new(store, rng, &format!("{name}.up2"), widths[1], widths[2]),
            head: PredictionHead::new(store, rng, &format!("{name}.head"), widths[2], 4),
        })
    }

    /// Encoder tokens `N×T×D` after the final layer norm.
    pub fn encode<T: Real>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let mut x = self.embed.forward(s, image)?;
        for b in &self.blocks {
            x = b.forward(s, x)?;
        }
        self.norm.forward(s, x)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, image: Var) -> Result<BranchOutput> {
        let tokens = self.encode(s, image)?;
        let n = s.dims(tokens)[0];
        let (gh, gw) = self.embed.grid;
        let d = self.cfg.embed_dim;
        let maps = s.graph.permute(tokens, &[0, 2, 1])?;
        let maps = s.graph.reshape(maps, &[n, d, gh, gw])?;
        // token grid is H/P; bring it to H/16
        let pool = 16 / self.cfg.patch_size;
        let t0 = if pool > 1 { s.graph.avg_pool2d(maps, pool)? } else { maps };
        let t1 = self.up1.forward(s, t0)?;
        let t2 = self.up2.forward(s, t1)?;
        let pred = self.head.forward(s, t2)?;
        Ok(BranchOutput { pyramid: [t0, t1, t2], pred })
    }
}
