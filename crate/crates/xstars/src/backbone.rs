//! Vision Transformer encoder, DINO projection head and per-sensor linear
//! projection heads.
//!
//! Images enter as [`Raster`]s and are patchified on the host; the transformer
//! then works on `(batch, tokens, width)` tensors. Token 0 of every sequence is
//! a learned classification token, which serves as the global token.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::ops::{l2_normalize_last, layer_norm, linear, softmax_last};
use crate::params::{Init, ParamBuilder};
use crate::raster::Raster;
use crate::{Error, Result};

const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];
const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Transformer size. `patch_side` is 16 for every preset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackbonePreset {
    pub name: String,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_side: usize,
    pub mlp_ratio: usize,
}

impl BackbonePreset {
    fn make(name: &str, depth: usize, width: usize, heads: usize) -> Self {
        Self {
            name: name.to_string(),
            depth,
            width,
            heads,
            patch_side: 16,
            mlp_ratio: 4,
        }
    }

    /// Desk-scale default: depth 4, width 96, 4 heads.
    pub fn tiny_desk() -> Self {
        Self::make("tiny-desk", 4, 96, 4)
    }

    /// ViT-T/16.
    pub fn vit_tiny() -> Self {
        Self::make("tiny/16", 12, 192, 3)
    }

    /// ViT-B/16.
    pub fn vit_base() -> Self {
        Self::make("base/16", 12, 768, 12)
    }

    /// ViT-L/16.
    pub fn vit_large() -> Self {
        Self::make("large/16", 24, 1024, 16)
    }

    pub fn all() -> Vec<Self> {
        vec![
            Self::tiny_desk(),
            Self::vit_tiny(),
            Self::vit_base(),
            Self::vit_large(),
        ]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown backbone preset `{name}` (expected one of tiny-desk, tiny/16, base/16, large/16)"
                ))
            })
    }

    /// Patch grid side for a square input, or a shape error when the input
    /// side is not a positive multiple of the patch side.
    pub fn grid_side(&self, input_side: usize) -> Result<usize> {
        if input_side == 0 || input_side % self.patch_side != 0 {
            return Err(Error::Shape(format!(
                "input side {input_side} is not a positive multiple of patch side {}",
                self.patch_side
            )));
        }
        Ok(input_side / self.patch_side)
    }
}

/// Global token plus patch tokens for a batch of images.
#[derive(Debug, Clone)]
pub struct TokenEmbeddings {
    /// `(batch, D)`
    pub global: Tensor,
    /// `(batch, T, D)`
    pub patches: Tensor,
    /// Patch grid `(rows, cols)` with `rows * cols == T`.
    pub grid: (usize, usize),
}

impl TokenEmbeddings {
    pub fn batch_size(&self) -> usize {
        self.global.dims()[0]
    }

    pub fn token_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn width(&self) -> usize {
        self.global.dims()[1]
    }

    /// Patch token `t` of every item, `(batch, D)`.
    pub fn patch(&self, t: usize) -> Result<Tensor> {
        Ok(self.patches.narrow(1, t, 1)?.squeeze(1)?)
    }

    pub fn detach(&self) -> Self {
        Self {
            global: self.global.detach(),
            patches: self.patches.detach(),
            grid: self.grid,
        }
    }
}

/// Converts square images of side `input_side` into `(batch, T, 3 * p * p)`
/// normalized patch vectors, ordered row-major over the grid.
pub fn patchify(images: &[Raster], patch_side: usize, dtype: DType) -> Result<(Tensor, (usize, usize))> {
    let first = images
        .first()
        .ok_or_else(|| Error::Usage("cannot encode an empty image batch".into()))?;
    let side = first.side().ok_or_else(|| {
        Error::Shape(format!(
            "images must be square, got {}x{}",
            first.height(),
            first.width()
        ))
    })?;
    if side == 0 || side % patch_side != 0 {
        return Err(Error::Shape(format!(
            "input side {side} is not a positive multiple of patch side {patch_side}"
        )));
    }
    let g = side / patch_side;
    let pdim = 3 * patch_side * patch_side;
    let mut buf = Vec::with_capacity(images.len() * g * g * pdim);
    for img in images {
        if img.side() != Some(side) {
            return Err(Error::Shape(format!(
                "mixed image sizes in one batch: {} vs {}x{}",
                side,
                img.height(),
                img.width()
            )));
        }
        for gy in 0..g {
            for gx in 0..g {
                // channel-major inside a patch, matching a conv weight layout
                for c in 0..3 {
                    for py in 0..patch_side {
                        for px in 0..patch_side {
                            let v = img.get(gy * patch_side + py, gx * patch_side + px, c);
                            buf.push((v - PIXEL_MEAN[c]) / PIXEL_STD[c]);
                        }
                    }
                }
            }
        }
    }
    let t = Tensor::from_vec(buf, (images.len(), g * g, pdim), &Device::Cpu)?.to_dtype(dtype)?;
    Ok((t, (g, g)))
}

/// Row-stochastic `(dst*dst, src*src)` matrix resampling a square grid of
/// embeddings bilinearly with half-pixel centers.
pub fn grid_interpolation_matrix(src: usize, dst: usize) -> Vec<f64> {
    let weights_1d = |d: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..d)
            .map(|i| {
                let f = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = f.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, f - i0 as f64)
            })
            .collect()
    };
    let w = weights_1d(dst);
    let mut m = vec![0.0; dst * dst * src * src];
    for (oy, &(y0, y1, wy)) in w.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in w.iter().enumerate() {
            let row = (oy * dst + ox) * src * src;
            for (yy, fy) in [(y0, 1.0 - wy), (y1, wy)] {
                for (xx, fx) in [(x0, 1.0 - wx), (x1, wx)] {
                    m[row + yy * src + xx] += fy * fx;
                }
            }
        }
    }
    m
}

struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    fn new(b: &mut ParamBuilder, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = b.get(&format!("{name}.weight"), &[output, input], Init::TruncNormal(INIT_STD))?;
        let bias = if bias {
            Some(b.get(&format!("{name}.bias"), &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        linear(xs, &self.weight, self.bias.as_ref())
    }
}

struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(b: &mut ParamBuilder, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get(&format!("{name}.weight"), &[width], Init::Ones)?,
            bias: b.get(&format!("{name}.bias"), &[width], Init::Zeros)?,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        layer_norm(xs, &self.weight, &self.bias, LN_EPS)
    }
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(b: &mut ParamBuilder, name: &str, preset: &BackbonePreset) -> Result<Self> {
        let d = preset.width;
        let hidden = d * preset.mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), d)?,
            qkv: Linear::new(b, &format!("{name}.attn.qkv"), d, 3 * d, true)?,
            proj: Linear::new(b, &format!("{name}.attn.proj"), d, d, true)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), d)?,
            fc1: Linear::new(b, &format!("{name}.mlp.fc1"), d, hidden, true)?,
            fc2: Linear::new(b, &format!("{name}.mlp.fc2"), hidden, d, true)?,
            heads: preset.heads,
        })
    }

    fn attention(&self, xs: &Tensor) -> Result<Tensor> {
        let (bsz, n, d) = xs.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(xs)?
            .reshape((bsz, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bsz, n, d))?;
        self.proj.forward(&out)
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let xs = (xs + self.attention(&self.norm1.forward(xs)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&xs)?)?.gelu_erf()?;
        Ok((&xs + self.fc2.forward(&h)?)?)
    }
}

/// ViT encoder with a learned classification token and learned positional
/// embeddings on a fixed grid. Inputs whose grid differs from the configured
/// one (small multi-crop views) get bilinearly resampled positional
/// embeddings.
pub struct VisionTransformer {
    preset: BackbonePreset,
    input_side: usize,
    grid: usize,
    dtype: DType,
    patch_embed: Linear,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl VisionTransformer {
    /// Declares (or reuses) parameters under `prefix` in the builder's set.
    pub fn new(b: &mut ParamBuilder, prefix: &str, preset: &BackbonePreset, input_side: usize) -> Result<Self> {
        let grid = preset.grid_side(input_side)?;
        let d = preset.width;
        if d % preset.heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {} heads",
                preset.heads
            )));
        }
        let pdim = 3 * preset.patch_side * preset.patch_side;
        let patch_embed = Linear::new(b, &format!("{prefix}.patch_embed"), pdim, d, true)?;
        let cls_token = b.get(&format!("{prefix}.cls_token"), &[1, 1, d], Init::TruncNormal(INIT_STD))?;
        let pos_embed = b.get(
            &format!("{prefix}.pos_embed"),
            &[1, grid * grid + 1, d],
            Init::TruncNormal(INIT_STD),
        )?;
        let blocks = (0..preset.depth)
            .map(|i| Block::new(b, &format!("{prefix}.blocks.{i}"), preset))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(b, &format!("{prefix}.norm"), d)?;
        Ok(Self {
            preset: preset.clone(),
            input_side,
            grid,
            dtype: b.dtype(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        })
    }

    pub fn preset(&self) -> &BackbonePreset {
        &self.preset
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn width(&self) -> usize {
        self.preset.width
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn positional(&self, grid: usize) -> Result<Tensor> {
        if grid == self.grid {
            return Ok(self.pos_embed.clone());
        }
        let d = self.preset.width;
        let cls = self.pos_embed.narrow(1, 0, 1)?;
        let patches = self.pos_embed.narrow(1, 1, self.grid * self.grid)?.squeeze(0)?;
        let m = Tensor::from_vec(
            grid_interpolation_matrix(self.grid, grid),
            (grid * grid, self.grid * self.grid),
            &Device::Cpu,
        )?
        .to_dtype(self.dtype)?;
        let resampled = m.matmul(&patches)?.reshape((1, grid * grid, d))?;
        Ok(Tensor::cat(&[cls, resampled], 1)?)
    }

    /// Runs the encoder on prepared patch vectors, returning the final
    /// normalized sequence `(batch, 1 + T, D)`.
    pub fn forward_patches(&self, patches: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let (bsz, t, _) = patches.dims3()?;
        if grid.0 != grid.1 || grid.0 * grid.1 != t {
            return Err(Error::Shape(format!(
                "patch grid {grid:?} inconsistent with {t} tokens"
            )));
        }
        let d = self.preset.width;
        let x = self.patch_embed.forward(patches)?;
        let cls = self.cls_token.broadcast_as((bsz, 1, d))?;
        let mut x = Tensor::cat(&[cls, x], 1)?.broadcast_add(&self.positional(grid.0)?)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.norm.forward(&x)
    }

    /// Global and patch tokens of the final transformer layer.
    ///
    /// Any square image whose side is a multiple of the patch side is
    /// accepted; the configured input side is the one that avoids resampling
    /// positional embeddings.
    pub fn encode(&self, images: &[Raster]) -> Result<TokenEmbeddings> {
        let (patches, grid) = patchify(images, self.preset.patch_side, self.dtype)?;
        let seq = self.forward_patches(&patches, grid)?;
        let t = grid.0 * grid.1;
        Ok(TokenEmbeddings {
            global: seq.narrow(1, 0, 1)?.squeeze(1)?,
            patches: seq.narrow(1, 1, t)?,
            grid,
        })
    }

    /// [`encode`](Self::encode) that insists on the configured input side.
    pub fn encode_at_input_side(&self, images: &[Raster]) -> Result<TokenEmbeddings> {
        if let Some(img) = images.iter().find(|i| i.side() != Some(self.input_side)) {
            return Err(Error::Shape(format!(
                "expected {s}x{s} inputs, got {}x{}",
                img.height(),
                img.width(),
                s = self.input_side
            )));
        }
        self.encode(images)
    }
}

/// DINO projection head sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DinoHeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub out_dim: usize,
}

impl Default for DinoHeadConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            bottleneck: 128,
            out_dim: 1024,
        }
    }
}

/// Three-layer MLP, L2 normalization, then a weight-normalized linear layer
/// producing `out_dim` logits.
pub struct DinoHead {
    layers: Vec<Linear>,
    last: Tensor,
}

impl DinoHead {
    pub const LAST_LAYER: &'static str = "dino_head.last.weight";

    pub fn new(b: &mut ParamBuilder, input: usize, cfg: &DinoHeadConfig) -> Result<Self> {
        let layers = vec![
            Linear::new(b, "dino_head.mlp.0", input, cfg.hidden, true)?,
            Linear::new(b, "dino_head.mlp.1", cfg.hidden, cfg.hidden, true)?,
            Linear::new(b, "dino_head.mlp.2", cfg.hidden, cfg.bottleneck, true)?,
        ];
        let last = b.get(Self::LAST_LAYER, &[cfg.out_dim, cfg.bottleneck], Init::TruncNormal(INIT_STD))?;
        Ok(Self { layers, last })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut h = xs.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < n {
                h = h.gelu_erf()?;
            }
        }
        let h = l2_normalize_last(&h, 1e-12)?;
        let w = l2_normalize_last(&self.last, 1e-12)?;
        linear(&h, &w, None)
    }
}

/// Backbone and DINO head sharing one parameter set; the shape of both the
/// student and the DINO teacher.
pub struct DinoNetwork {
    pub backbone: VisionTransformer,
    pub head: DinoHead,
}

impl DinoNetwork {
    pub fn new(b: &mut ParamBuilder, preset: &BackbonePreset, input_side: usize, head: &DinoHeadConfig) -> Result<Self> {
        let backbone = VisionTransformer::new(b, "backbone", preset, input_side)?;
        let head = DinoHead::new(b, preset.width, head)?;
        Ok(Self { backbone, head })
    }

    /// DINO logits of the global token, `(batch, out_dim)`.
    pub fn logits(&self, images: &[Raster]) -> Result<Tensor> {
        let tokens = self.backbone.encode(images)?;
        self.head.forward(&tokens.global)
    }
}

/// Per-sensor linear map applied to the global token and independently to
/// every patch token.
pub struct ProjectionHead {
    sensor_id: String,
    weight: Tensor,
    bias: Tensor,
}

impl ProjectionHead {
    pub fn new(b: &mut ParamBuilder, sensor_id: &str, input: usize, output: usize) -> Result<Self> {
        let weight = b.get(&format!("psi.{sensor_id}.weight"), &[output, input], Init::TruncNormal(INIT_STD))?;
        let bias = b.get(&format!("psi.{sensor_id}.bias"), &[output], Init::Zeros)?;
        Ok(Self {
            sensor_id: sensor_id.to_string(),
            weight,
            bias,
        })
    }

    /// Head with explicit weights, mostly for tests.
    pub fn from_weights(sensor_id: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.dims() != [out] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {out} outputs",
                bias.dims()
            )));
        }
        Ok(Self {
            sensor_id: sensor_id.to_string(),
            weight,
            bias,
        })
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn input_width(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn project(&self, tokens: &TokenEmbeddings) -> Result<TokenEmbeddings> {
        if tokens.width() != self.input_width() {
            return Err(Error::Shape(format!(
                "projection head for `{}` expects width {}, tokens have {}",
                self.sensor_id,
                self.input_width(),
                tokens.width()
            )));
        }
        Ok(TokenEmbeddings {
            global: linear(&tokens.global, &self.weight, Some(&self.bias))?,
            patches: linear(&tokens.patches, &self.weight, Some(&self.bias))?,
            grid: tokens.grid,
        })
    }
}

/// Mean over the token axis `(batch, T, D) -> (batch, D)`; handy for probes.
pub fn mean_patch(tokens: &TokenEmbeddings) -> Result<Tensor> {
    Ok(tokens.patches.mean(D::Minus2)?)
}
