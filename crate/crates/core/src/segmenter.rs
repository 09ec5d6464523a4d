//! Stage-2 assembly: frozen encoder, frozen level experts, trainable fusion
//! and segmentation decoder. Also the stage-1 student encoder.

use candle_core::Tensor;

use crate::error::{Result, SamoraError};
use crate::fusion::{
    block_output, gated_mixture_fuse, hl_attn_single_with_weights, hl_attn_trace, lac_fuse, lac_fuse_tensor,
    weight_compose, FusionStrategy, Gate, HlAttnBlock, SingleFusion,
};
use crate::model::{
    forward_expert_block, forward_expert_block_with_attention, forward_frozen_block, EncoderConfig, FrozenEncoder,
    LoraExpertSet, Level, SegDecoder, forward_decoder,
};
use crate::params::ParamStore;

pub const DECODER_PREFIX: &str = "decoder";
pub const LAC_WEIGHTS: &str = "fusion.lac.weights";

/// Everything needed to rebuild a stage-2 model from a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AssemblySpec {
    pub encoder: EncoderConfig,
    /// Retained experts, ordered image, patch, pixel.
    pub levels: Vec<Level>,
    pub strategy: FusionStrategy,
    pub num_classes: usize,
    pub layer_norm: bool,
    pub lac_trainable: bool,
    /// Rank of each level expert.
    pub rank: usize,
}

impl AssemblySpec {
    pub fn new(encoder: EncoderConfig, strategy: FusionStrategy, num_classes: usize) -> Self {
        Self {
            encoder,
            levels: Level::ALL.to_vec(),
            strategy,
            num_classes,
            layer_norm: true,
            lac_trainable: false,
            rank: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes == 0 {
            return Err(SamoraError::config("num_classes must be positive"));
        }
        if self.levels.is_empty() {
            return Err(SamoraError::config("at least one expert level is required"));
        }
        let mut sorted = self.levels.clone();
        sorted.sort_by(|a, b| b.cmp(a));
        sorted.dedup();
        if sorted != self.levels {
            return Err(SamoraError::config("levels must be distinct and ordered image, patch, pixel"));
        }
        if self.levels.len() == 2 {
            return Err(SamoraError::config("fusion needs one or all three expert levels"));
        }
        if let FusionStrategy::Lac(w) | FusionStrategy::WeightCompose(w) = &self.strategy {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(SamoraError::config("fusion weights must be finite"));
            }
        }
        Ok(())
    }

    fn single(&self) -> bool {
        self.levels.len() == 1
    }
}

/// Initialise fusion and decoder parameters (encoder and experts are loaded
/// from earlier stages).
pub fn init_stage2_params(store: &mut ParamStore, spec: &AssemblySpec, seed: u64) -> Result<()> {
    spec.validate()?;
    let d = spec.encoder.dim;
    for i in 0..spec.encoder.depth {
        if spec.single() {
            if matches!(spec.strategy, FusionStrategy::HlAttn(_)) {
                SingleFusion::init_params(store, i, d, seed)?;
            }
            continue;
        }
        match &spec.strategy {
            FusionStrategy::HlAttn(_) => HlAttnBlock::init_params(store, i, d, seed)?,
            FusionStrategy::GatedMixture => Gate::init_params(store, i, d, spec.levels.len(), seed)?,
            FusionStrategy::Lac(_) | FusionStrategy::WeightCompose(_) => {}
        }
    }
    if let (FusionStrategy::Lac(w), true) = (&spec.strategy, spec.lac_trainable) {
        store.insert_values(LAC_WEIGHTS, w, &[3])?;
    }
    SegDecoder::init_params(store, DECODER_PREFIX, &spec.encoder, spec.num_classes + 1, seed)
}

#[derive(Debug, Clone)]
enum BlockFusion {
    HlAttn(HlAttnBlock),
    Single(SingleFusion),
    /// A single expert used directly (non-attention strategies with one level).
    Direct,
    Lac,
    Gated(Gate),
    Compose,
}

/// Per-level attention maps of the final block plus the fused map, used for
/// heatmap export.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Tensor,
    /// `(level, [B, heads, L, L])` self-attention weights of each expert.
    pub expert_attention: Vec<(Level, Tensor)>,
    /// `[B, heads, L, L]` attention of the last fusion step.
    pub fused_attention: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct SamoraModel {
    pub spec: AssemblySpec,
    pub encoder: FrozenEncoder,
    pub experts: Vec<LoraExpertSet>,
    composite: Option<LoraExpertSet>,
    fusion: Vec<BlockFusion>,
    lac_weights: Option<Tensor>,
    pub decoder: SegDecoder,
}

impl SamoraModel {
    /// Build from a store holding `encoder.*`, `lora.{level}.*` for each
    /// retained level, `fusion.*` and `decoder.*`.
    pub fn load(store: &ParamStore, spec: &AssemblySpec) -> Result<Self> {
        spec.validate()?;
        let encoder = FrozenEncoder::load(store, &spec.encoder)?;
        let experts = spec
            .levels
            .iter()
            .map(|&l| LoraExpertSet::load(store, l, spec.encoder.depth))
            .collect::<Result<Vec<_>>>()?;
        if let Some(e) = experts.iter().find(|e| e.rank != spec.rank) {
            return Err(SamoraError::config(format!(
                "{:?} expert has rank {}, assembly expects {}",
                e.level, e.rank, spec.rank
            )));
        }
        let heads = spec.encoder.heads;
        let mut fusion = Vec::with_capacity(spec.encoder.depth);
        for i in 0..spec.encoder.depth {
            fusion.push(match (&spec.strategy, spec.single()) {
                (FusionStrategy::HlAttn(_), true) => BlockFusion::Single(SingleFusion::load(store, i, heads, spec.layer_norm)?),
                (_, true) => BlockFusion::Direct,
                (FusionStrategy::HlAttn(order), false) => {
                    BlockFusion::HlAttn(HlAttnBlock::load(store, i, heads, *order, spec.layer_norm)?)
                }
                (FusionStrategy::Lac(_), false) => BlockFusion::Lac,
                (FusionStrategy::GatedMixture, false) => BlockFusion::Gated(Gate::load(store, i)?),
                (FusionStrategy::WeightCompose(_), false) => BlockFusion::Compose,
            });
        }
        let composite = match (&spec.strategy, spec.single()) {
            (FusionStrategy::WeightCompose(c), false) => {
                let refs: Vec<&LoraExpertSet> = experts.iter().collect();
                Some(weight_compose(c, &refs)?)
            }
            _ => None,
        };
        let lac_weights = match (&spec.strategy, spec.lac_trainable) {
            (FusionStrategy::Lac(_), true) => Some(store.get(LAC_WEIGHTS)?),
            _ => None,
        };
        let decoder = SegDecoder::load(store, DECODER_PREFIX, &spec.encoder, spec.num_classes)?;
        Ok(Self {
            spec: spec.clone(),
            encoder,
            experts,
            composite,
            fusion,
            lac_weights,
            decoder,
        })
    }

    pub fn expert(&self, level: Level) -> Option<&LoraExpertSet> {
        self.experts.iter().find(|e| e.level == Some(level))
    }

    fn fuse_block(&self, i: usize, x: &Tensor, want_weights: bool) -> Result<(Tensor, Option<Tensor>)> {
        let path = self.spec.encoder.expert_path;
        let block = &self.encoder.blocks[i];
        let f = forward_frozen_block(block, x)?;
        let outputs = || -> Result<Vec<Tensor>> {
            self.experts
                .iter()
                .map(|e| forward_expert_block(block, e, i, x, path))
                .collect()
        };
        // The non-attention strategies combine expert deltas E_i(x) - x, so
        // that, like HL-Attn, they reduce to the frozen block when the
        // experts are zero.
        let deltas = || -> Result<Vec<Tensor>> { outputs()?.into_iter().map(|e| Ok((e - x)?)).collect() };
        let (e_omega, w) = match &self.fusion[i] {
            BlockFusion::HlAttn(h) => {
                let outs = outputs()?;
                let t = hl_attn_trace(h, &outs[0], &outs[1], &outs[2])?;
                (t.output, want_weights.then_some(t.stage2_weights))
            }
            BlockFusion::Single(h) => {
                let e = forward_expert_block(block, &self.experts[0], i, x, path)?;
                let (o, w) = hl_attn_single_with_weights(h, &e)?;
                (o, want_weights.then_some(w))
            }
            BlockFusion::Direct => ((forward_expert_block(block, &self.experts[0], i, x, path)? - x)?, None),
            BlockFusion::Lac => {
                let ds = deltas()?;
                let refs: Vec<&Tensor> = ds.iter().collect();
                let o = match (&self.lac_weights, &self.spec.strategy) {
                    (Some(w), _) => lac_fuse_tensor(w, &refs)?,
                    (None, FusionStrategy::Lac(w)) => lac_fuse(w, &refs)?,
                    _ => unreachable!("LAC block without LAC strategy"),
                };
                (o, None)
            }
            BlockFusion::Gated(g) => {
                let ds = deltas()?;
                let refs: Vec<&Tensor> = ds.iter().collect();
                (gated_mixture_fuse(g, &refs, x)?, None)
            }
            BlockFusion::Compose => {
                let c = self.composite.as_ref().expect("composite expert built at load");
                ((forward_expert_block(block, c, i, x, path)? - x)?, None)
            }
        };
        Ok((block_output(&f, &e_omega)?, w))
    }

    /// Final-block token features `[B, L, d]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.encoder.embed(images)?;
        for i in 0..self.encoder.blocks.len() {
            x = self.fuse_block(i, &x, false)?.0;
        }
        Ok(x)
    }

    /// `[B, 1, H, W]` images to `[B, C+1, H, W]` logits.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        forward_decoder(&self.decoder, &self.features(images)?)
    }

    /// Frozen encoder followed by this model's decoder.
    pub fn forward_frozen_baseline(&self, images: &Tensor) -> Result<Tensor> {
        forward_decoder(&self.decoder, &self.encoder.forward(images)?)
    }

    pub fn trace(&self, images: &Tensor) -> Result<ForwardTrace> {
        let path = self.spec.encoder.expert_path;
        let mut x = self.encoder.embed(images)?;
        let last = self.encoder.blocks.len() - 1;
        let mut expert_attention = Vec::new();
        let mut fused_attention = None;
        for i in 0..=last {
            if i == last {
                for e in &self.experts {
                    let (_, w) = forward_expert_block_with_attention(&self.encoder.blocks[i], e, i, &x, path)?;
                    expert_attention.push((e.level.expect("stage-2 experts carry a level"), w));
                }
            }
            let (y, w) = self.fuse_block(i, &x, i == last)?;
            if i == last {
                fused_attention = w;
            }
            x = y;
        }
        Ok(ForwardTrace {
            logits: forward_decoder(&self.decoder, &x)?,
            expert_attention,
            fused_attention,
        })
    }
}

/// Stage-1 student: each block is `F_θ(x) + (E_k(x) - x)`, so a zero-init
/// expert reproduces the frozen encoder exactly.
pub fn student_block(encoder: &FrozenEncoder, expert: &LoraExpertSet, i: usize, x: &Tensor) -> Result<Tensor> {
    let block = &encoder.blocks[i];
    let f = forward_frozen_block(block, x)?;
    let e = forward_expert_block(block, expert, i, x, encoder.cfg.expert_path)?;
    Ok(((f + e)? - x)?)
}

/// Token features of every block of the student, `[B, L, d]` each.
pub fn student_forward_all(encoder: &FrozenEncoder, expert: &LoraExpertSet, images: &Tensor) -> Result<Vec<Tensor>> {
    let mut x = encoder.embed(images)?;
    let mut outs = Vec::with_capacity(encoder.blocks.len());
    for i in 0..encoder.blocks.len() {
        x = student_block(encoder, expert, i, &x)?;
        outs.push(x.clone());
    }
    Ok(outs)
}

pub fn student_forward(encoder: &FrozenEncoder, expert: &LoraExpertSet, images: &Tensor) -> Result<Tensor> {
    Ok(student_forward_all(encoder, expert, images)?.pop().expect("depth >= 1"))
}
