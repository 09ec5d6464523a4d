//! Frozen ViT-style student encoder, per-level LoRA experts, the stage-1
//! dimension-alignment projector and the prompt-free segmentation decoder.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SamoraError};
use crate::nn::{self, multi_head_attention, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::rng;

/// Hierarchical level of a LoRA expert. Ordered IMAGE > PATCH > PIXEL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Pixel,
    Patch,
    Image,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Image, Level::Patch, Level::Pixel];

    pub fn name(self) -> &'static str {
        match self {
            Level::Image => "image",
            Level::Patch => "patch",
            Level::Pixel => "pixel",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = SamoraError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "image" | "im" => Ok(Level::Image),
            "patch" | "pa" => Ok(Level::Patch),
            "pixel" | "pi" => Ok(Level::Pixel),
            other => Err(SamoraError::config(format!("unknown level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub mlp_ratio: f64,
    #[serde(default)]
    pub expert_path: ExpertPath,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            dim: 128,
            heads: 4,
            patch_size: 8,
            image_size: 64,
            mlp_ratio: 4.0,
            expert_path: ExpertPath::PureDelta,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch_size == 0 || self.image_size == 0 {
            return Err(SamoraError::config("encoder sizes must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(SamoraError::config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(SamoraError::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.patch_size.is_power_of_two() {
            return Err(SamoraError::config("patch_size must be a power of two"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(SamoraError::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length `L = (image_size / patch_size)^2`.
    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn mlp_dim(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// How the expert path treats the frozen weights.
///
/// `PureDelta` computes adapted projections from `B·A` alone and reuses the
/// frozen matrices (without bias) for projections that carry no adapter.
/// `Merged` uses `θ + Δθ` everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertPath {
    #[default]
    PureDelta,
    Merged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Q,
    K,
    V,
    Out,
    Fc1,
    Fc2,
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl EncoderBlock {
    pub fn load(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::load(store, &format!("{prefix}.norm1"))?,
            q: Linear::load(store, &format!("{prefix}.attn.q"))?,
            k: Linear::load(store, &format!("{prefix}.attn.k"))?,
            v: Linear::load(store, &format!("{prefix}.attn.v"))?,
            out: Linear::load(store, &format!("{prefix}.attn.out"))?,
            norm2: LayerNorm::load(store, &format!("{prefix}.norm2"))?,
            fc1: Linear::load(store, &format!("{prefix}.mlp.fc1"))?,
            fc2: Linear::load(store, &format!("{prefix}.mlp.fc2"))?,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.in_dim()
    }

    fn linear(&self, p: Projection) -> &Linear {
        match p {
            Projection::Q => &self.q,
            Projection::K => &self.k,
            Projection::V => &self.v,
            Projection::Out => &self.out,
            Projection::Fc1 => &self.fc1,
            Projection::Fc2 => &self.fc2,
        }
    }

    /// Pre-LN transformer block with a pluggable projection rule.
    fn run<F>(&self, x: &Tensor, proj: F) -> Result<(Tensor, Tensor)>
    where
        F: Fn(Projection, &Linear, &Tensor) -> Result<Tensor>,
    {
        let (x, squeeze) = nn::batched(x)?;
        let d = x.dims()[2];
        if d != self.dim() {
            return Err(SamoraError::dim(format!(
                "block expects width {}, got {d}",
                self.dim()
            )));
        }
        let h = self.norm1.forward(&x)?;
        let q = proj(Projection::Q, self.linear(Projection::Q), &h)?;
        let k = proj(Projection::K, self.linear(Projection::K), &h)?;
        let v = proj(Projection::V, self.linear(Projection::V), &h)?;
        let (attn, weights) = multi_head_attention(&q, &k, &v, self.heads)?;
        let attn = proj(Projection::Out, self.linear(Projection::Out), &attn)?;
        let x1 = (&x + attn)?;
        let h2 = self.norm2.forward(&x1)?;
        let f = proj(Projection::Fc1, self.linear(Projection::Fc1), &h2)?.gelu_erf()?;
        let f = proj(Projection::Fc2, self.linear(Projection::Fc2), &f)?;
        let y = (x1 + f)?;
        Ok((nn::unbatch(y, squeeze)?, weights))
    }
}

/// `F_θ(x) = x' + FFN(LN(x'))`, `x' = x + Attn(LN(x))`, all weights frozen.
pub fn forward_frozen_block(block: &EncoderBlock, x: &Tensor) -> Result<Tensor> {
    Ok(block.run(x, |_, lin, h| lin.forward(h))?.0)
}

/// Low-rank adapter pair: `ΔW = B·A` with `A: [r, in]`, `B: [out, r]`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            a: store.get(&format!("{prefix}.a"))?,
            b: store.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.dims()[0]
    }

    /// `x (B·A)^T`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let down = x.broadcast_matmul(&self.a.t()?)?;
        Ok(down.broadcast_matmul(&self.b.t()?)?)
    }

    /// Dense `B·A`.
    pub fn delta_weight(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?)
    }
}

pub const ADAPTED: [Projection; 4] = [Projection::Q, Projection::V, Projection::Fc1, Projection::Fc2];

fn adapter_key(p: Projection) -> &'static str {
    match p {
        Projection::Q => "q",
        Projection::V => "v",
        Projection::Fc1 => "fc1",
        Projection::Fc2 => "fc2",
        Projection::K => "k",
        Projection::Out => "out",
    }
}

#[derive(Debug, Clone)]
pub struct BlockAdapters {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
    pub fc1: LoraAdapter,
    pub fc2: LoraAdapter,
}

impl BlockAdapters {
    pub fn get(&self, p: Projection) -> Option<&LoraAdapter> {
        match p {
            Projection::Q => Some(&self.q),
            Projection::V => Some(&self.v),
            Projection::Fc1 => Some(&self.fc1),
            Projection::Fc2 => Some(&self.fc2),
            _ => None,
        }
    }
}

/// One complete LoRA expert: adapters for every encoder block.
///
/// `level` is `None` for composite experts built by [`crate::fusion::weight_compose`].
#[derive(Debug, Clone)]
pub struct LoraExpertSet {
    pub level: Option<Level>,
    pub rank: usize,
    pub blocks: Vec<BlockAdapters>,
}

pub fn lora_prefix(level: Level) -> String {
    format!("lora.{}", level.name())
}

impl LoraExpertSet {
    pub fn load(store: &ParamStore, level: Level, depth: usize) -> Result<Self> {
        let prefix = lora_prefix(level);
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            let p = format!("{prefix}.blocks.{i}");
            let load = |proj| LoraAdapter::load(store, &format!("{p}.{}", adapter_key(proj)));
            blocks.push(BlockAdapters {
                q: load(Projection::Q)?,
                v: load(Projection::V)?,
                fc1: load(Projection::Fc1)?,
                fc2: load(Projection::Fc2)?,
            });
        }
        let rank = blocks.first().map(|b| b.q.rank()).unwrap_or(0);
        Ok(Self {
            level: Some(level),
            rank,
            blocks,
        })
    }

    pub fn block(&self, index: usize) -> Result<&BlockAdapters> {
        self.blocks.get(index).ok_or_else(|| {
            SamoraError::config(format!(
                "expert {:?} has no adapter for block {index} ({} blocks)",
                self.level,
                self.blocks.len()
            ))
        })
    }
}

/// Create the adapters for `level` in `store`: `A` Kaiming-uniform,
/// `B` zeros. Fails if the level was already injected.
pub fn inject_lora(store: &mut ParamStore, cfg: &EncoderConfig, level: Level, rank: usize, seed: u64) -> Result<LoraExpertSet> {
    if rank == 0 {
        return Err(SamoraError::config("LoRA rank must be positive"));
    }
    if rank > cfg.dim {
        return Err(SamoraError::config(format!(
            "LoRA rank {rank} exceeds width {}",
            cfg.dim
        )));
    }
    let prefix = lora_prefix(level);
    if store.names().any(|n| n.starts_with(&format!("{prefix}."))) {
        return Err(SamoraError::config(format!("level `{level}` already injected")));
    }
    let mut r = rng::stream(seed, &format!("lora-init-{level}"), 0);
    let (d, m) = (cfg.dim, cfg.mlp_dim());
    for i in 0..cfg.depth {
        for (proj, in_dim, out_dim) in [
            (Projection::Q, d, d),
            (Projection::V, d, d),
            (Projection::Fc1, d, m),
            (Projection::Fc2, m, d),
        ] {
            let p = format!("{prefix}.blocks.{i}.{}", adapter_key(proj));
            let bound = 1.0 / (in_dim as f64).sqrt();
            store.init_uniform(&format!("{p}.a"), &[rank, in_dim], bound, &mut r)?;
            store.init_const(&format!("{p}.b"), &[out_dim, rank], 0.0)?;
        }
    }
    LoraExpertSet::load(store, level, cfg.depth)
}

fn expert_projection(
    path: ExpertPath,
    adapters: &BlockAdapters,
    p: Projection,
    lin: &Linear,
    h: &Tensor,
) -> Result<Tensor> {
    match (path, adapters.get(p)) {
        (ExpertPath::PureDelta, Some(ad)) => ad.delta(h),
        (ExpertPath::PureDelta, None) => lin.forward_no_bias(h),
        (ExpertPath::Merged, Some(ad)) => Ok((lin.forward(h)? + ad.delta(h)?)?),
        (ExpertPath::Merged, None) => lin.forward(h),
    }
}

/// `E_Δθ(x)`: the block recomputed through the expert's projections.
pub fn forward_expert_block(
    block: &EncoderBlock,
    expert: &LoraExpertSet,
    block_index: usize,
    x: &Tensor,
    path: ExpertPath,
) -> Result<Tensor> {
    Ok(forward_expert_block_with_attention(block, expert, block_index, x, path)?.0)
}

pub fn forward_expert_block_with_attention(
    block: &EncoderBlock,
    expert: &LoraExpertSet,
    block_index: usize,
    x: &Tensor,
    path: ExpertPath,
) -> Result<(Tensor, Tensor)> {
    if expert.rank == 0 {
        return Err(SamoraError::config("expert rank must be positive"));
    }
    let adapters = expert.block(block_index)?;
    block.run(x, |p, lin, h| expert_projection(path, adapters, p, lin, h))
}

/// Frozen patch embedding, positional embedding and transformer blocks.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub pos_embed: Tensor,
    pub blocks: Vec<EncoderBlock>,
}

impl FrozenEncoder {
    /// Random stand-in for pretrained weights: LeCun-normal projections,
    /// small biases, unit LayerNorms.
    pub fn init_params(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "encoder-init", 0);
        let (d, m, pp) = (cfg.dim, cfg.mlp_dim(), cfg.patch_size * cfg.patch_size);
        let lecun = |n: usize| 1.0 / (n as f64).sqrt();
        store.init_normal("encoder.patch_embed.weight", &[d, pp], lecun(pp), &mut r)?;
        store.init_trunc_normal("encoder.patch_embed.bias", &[d], 0.02, &mut r)?;
        store.init_normal("encoder.pos_embed", &[cfg.seq_len(), d], 0.5, &mut r)?;
        for i in 0..cfg.depth {
            let p = format!("encoder.blocks.{i}");
            store.init_layer_norm(&format!("{p}.norm1"), d)?;
            store.init_layer_norm(&format!("{p}.norm2"), d)?;
            for (name, in_dim, out_dim) in [
                ("attn.q", d, d),
                ("attn.k", d, d),
                ("attn.v", d, d),
                ("attn.out", d, d),
                ("mlp.fc1", d, m),
                ("mlp.fc2", m, d),
            ] {
                store.init_normal(&format!("{p}.{name}.weight"), &[out_dim, in_dim], lecun(in_dim), &mut r)?;
                store.init_trunc_normal(&format!("{p}.{name}.bias"), &[out_dim], 0.02, &mut r)?;
            }
        }
        Ok(())
    }

    pub fn load(store: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::load(store, &format!("encoder.blocks.{i}"), cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::load(store, "encoder.patch_embed")?,
            pos_embed: store.get("encoder.pos_embed")?,
            blocks,
        })
    }

    /// `[B, 1, H, W]` images to `[B, L, d]` tokens.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        if h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(SamoraError::dim(format!(
                "encoder expects {}x{} images, got {h}x{w}",
                self.cfg.image_size, self.cfg.image_size
            )));
        }
        let patches = nn::patchify(images, self.cfg.patch_size)?;
        let tokens = self.patch_embed.forward(&patches)?;
        Ok(tokens.broadcast_add(&self.pos_embed)?)
    }

    /// Plain frozen forward through every block.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.embed(images)?;
        for b in &self.blocks {
            x = forward_frozen_block(b, &x)?;
        }
        Ok(x)
    }
}

/// Trainable teacher→student dimension alignment: `teacher_dim -> student_dim`.
#[derive(Debug, Clone)]
pub struct Projector {
    pub linear: Linear,
}

pub fn projector_prefix(level: Level) -> String {
    format!("projector.{}", level.name())
}

impl Projector {
    pub fn init_params(store: &mut ParamStore, level: Level, teacher_dim: usize, student_dim: usize, seed: u64) -> Result<()> {
        let mut r = rng::stream(seed, &format!("projector-{level}"), 0);
        store.init_linear(&projector_prefix(level), teacher_dim, student_dim, 0.02, &mut r)
    }

    pub fn load(store: &ParamStore, level: Level) -> Result<Self> {
        Ok(Self {
            linear: Linear::load(store, &projector_prefix(level))?,
        })
    }

    pub fn teacher_dim(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn student_dim(&self) -> usize {
        self.linear.out_dim()
    }
}

pub fn project_features(p: &Projector, teacher_feat: &Tensor) -> Result<Tensor> {
    let last = teacher_feat.dims().last().copied().unwrap_or(0);
    if last != p.teacher_dim() {
        return Err(SamoraError::dim(format!(
            "projector expects teacher dim {}, got {last}",
            p.teacher_dim()
        )));
    }
    p.linear.forward(teacher_feat)
}

/// Channels of each upsampling stage: halve from `dim`, floor at 16.
pub fn decoder_channels(dim: usize, stages: usize) -> Vec<usize> {
    let mut ch = vec![dim];
    for _ in 0..stages {
        let last = *ch.last().expect("non-empty");
        ch.push((last / 2).max(16));
    }
    ch
}

/// Upsampling decoder: LayerNorm, `log2(patch)` stride-2 transposed convs
/// with GELU, and a per-class 1x1 head. Channel 0 is background.
#[derive(Debug, Clone)]
pub struct SegDecoder {
    pub norm: LayerNorm,
    pub ups: Vec<Linear>,
    pub head: Linear,
    pub grid: usize,
    pub resolution: usize,
    pub num_classes: usize,
}

impl SegDecoder {
    pub fn stages(cfg: &EncoderConfig) -> usize {
        cfg.patch_size.trailing_zeros() as usize
    }

    pub fn init_params(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, out_channels: usize, seed: u64) -> Result<()> {
        let mut r = rng::stream(seed, &format!("{prefix}-init"), 0);
        let ch = decoder_channels(cfg.dim, Self::stages(cfg));
        store.init_layer_norm(&format!("{prefix}.norm"), cfg.dim)?;
        for s in 0..Self::stages(cfg) {
            store.init_linear(&format!("{prefix}.up.{s}"), ch[s], 4 * ch[s + 1], 0.02, &mut r)?;
        }
        store.init_linear(&format!("{prefix}.head"), *ch.last().unwrap(), out_channels, 0.02, &mut r)
    }

    pub fn load(store: &ParamStore, prefix: &str, cfg: &EncoderConfig, num_classes: usize) -> Result<Self> {
        let ups = (0..Self::stages(cfg))
            .map(|s| Linear::load(store, &format!("{prefix}.up.{s}")))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::load(store, &format!("{prefix}.head"))?;
        Ok(Self {
            norm: LayerNorm::load(store, &format!("{prefix}.norm"))?,
            ups,
            head,
            grid: cfg.grid(),
            resolution: cfg.image_size,
            num_classes,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.head.out_dim()
    }
}

/// `[B, L, d]` features to `[B, C, H, W]` logits.
pub fn forward_decoder(dec: &SegDecoder, features: &Tensor) -> Result<Tensor> {
    let (features, _) = nn::batched(features)?;
    let (b, l, _) = features.dims3()?;
    if l != dec.grid * dec.grid {
        return Err(SamoraError::dim(format!(
            "decoder expects {} tokens, got {l}",
            dec.grid * dec.grid
        )));
    }
    let x = dec.norm.forward(&features)?;
    let mut x = x.reshape((b, dec.grid, dec.grid, x.dims()[2]))?;
    for up in &dec.ups {
        x = nn::upsample2x(&x, up)?.gelu_erf()?;
    }
    let logits = dec.head.forward(&x)?.permute((0, 3, 1, 2))?.contiguous()?;
    let (_, _, h, w) = logits.dims4()?;
    if h != dec.resolution || w != dec.resolution {
        return Err(SamoraError::dim(format!(
            "decoder produced {h}x{w}, expected {}",
            dec.resolution
        )));
    }
    Ok(logits)
}
