//! HL-Attn hierarchical cross-attention fusion and the three baseline
//! multi-LoRA fusion strategies (linear combination, gated mixture and
//! delta-space weight composition).

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SamoraError};
use crate::model::{BlockAdapters, LoraAdapter, LoraExpertSet, Level};
use crate::nn::{self, check_same_shape, multi_head_attention, softmax_last, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::rng;

/// Stage (1 or 2) assigned to each level. Digits are written in
/// image-patch-pixel order, e.g. `211` fuses patch and pixel first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FusionOrder {
    pub image: u8,
    pub patch: u8,
    pub pixel: u8,
}

impl FusionOrder {
    pub const O211: FusionOrder = FusionOrder { image: 2, patch: 1, pixel: 1 };
    pub const O112: FusionOrder = FusionOrder { image: 1, patch: 1, pixel: 2 };
    pub const O121: FusionOrder = FusionOrder { image: 1, patch: 2, pixel: 1 };
    pub const ALL: [FusionOrder; 3] = [Self::O211, Self::O112, Self::O121];

    pub fn new(image: u8, patch: u8, pixel: u8) -> Result<Self> {
        let o = Self { image, patch, pixel };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        if Self::ALL.contains(self) {
            Ok(())
        } else {
            Err(SamoraError::config(format!(
                "invalid fusion order {}{}{}: exactly one level must be at stage 2",
                self.image, self.patch, self.pixel
            )))
        }
    }

    pub fn stage_of(&self, level: Level) -> u8 {
        match level {
            Level::Image => self.image,
            Level::Patch => self.patch,
            Level::Pixel => self.pixel,
        }
    }

    pub fn code(&self) -> String {
        format!("{}{}{}", self.image, self.patch, self.pixel)
    }
}

impl Default for FusionOrder {
    fn default() -> Self {
        Self::O211
    }
}

impl fmt::Display for FusionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for FusionOrder {
    type Err = SamoraError;
    fn from_str(s: &str) -> Result<Self> {
        let digits: Vec<u8> = s
            .trim()
            .chars()
            .filter(|c| *c != '-')
            .map(|c| c.to_digit(10).map(|d| d as u8))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| SamoraError::config(format!("bad fusion order `{s}`")))?;
        if digits.len() != 3 {
            return Err(SamoraError::config(format!("bad fusion order `{s}`")));
        }
        FusionOrder::new(digits[0], digits[1], digits[2])
    }
}

impl Serialize for FusionOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for FusionOrder {
    fn deserialize<De: serde::Deserializer<'de>>(d: De) -> std::result::Result<Self, De::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which input plays query / key-value in one fusion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Expert(Level),
    Intermediate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pairing {
    pub stage1_query: Level,
    pub stage1_kv: Level,
    pub stage2_query: Operand,
    pub stage2_kv: Operand,
}

/// Query/key-value roles for an order: the hierarchically higher input is
/// the query; the stage-1 intermediate carries the level of its query.
pub fn pairing(order: FusionOrder) -> Result<Pairing> {
    order.validate()?;
    let mut first: Vec<Level> = Level::ALL.iter().copied().filter(|l| order.stage_of(*l) == 1).collect();
    first.sort_by(|a, b| b.cmp(a));
    let second = Level::ALL
        .iter()
        .copied()
        .find(|l| order.stage_of(*l) == 2)
        .expect("validated order has a stage-2 level");
    let (hi, lo) = (first[0], first[1]);
    let (q2, kv2) = if second > hi {
        (Operand::Expert(second), Operand::Intermediate)
    } else {
        (Operand::Intermediate, Operand::Expert(second))
    };
    Ok(Pairing {
        stage1_query: hi,
        stage1_kv: lo,
        stage2_query: q2,
        stage2_kv: kv2,
    })
}

/// Projections of one cross-attention unit.
#[derive(Debug, Clone)]
pub struct CrossAttnParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm: Option<LayerNorm>,
    pub heads: usize,
}

impl CrossAttnParams {
    pub fn init_params(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut rng::StreamRng) -> Result<()> {
        for name in ["q", "k", "v"] {
            store.init_linear(&format!("{prefix}.{name}"), dim, dim, 0.02, rng)?;
        }
        store.init_const(&format!("{prefix}.out.weight"), &[dim, dim], 0.0)?;
        store.init_const(&format!("{prefix}.out.bias"), &[dim], 0.0)?;
        store.init_layer_norm(&format!("{prefix}.norm"), dim)
    }

    pub fn load(store: &ParamStore, prefix: &str, heads: usize, layer_norm: bool) -> Result<Self> {
        Ok(Self {
            q: Linear::load(store, &format!("{prefix}.q"))?,
            k: Linear::load(store, &format!("{prefix}.k"))?,
            v: Linear::load(store, &format!("{prefix}.v"))?,
            out: Linear::load(store, &format!("{prefix}.out"))?,
            norm: if layer_norm {
                Some(LayerNorm::load(store, &format!("{prefix}.norm"))?)
            } else {
                None
            },
            heads,
        })
    }
}

/// `LN(q_feat + out(softmax(Q K^T / sqrt(d_k)) V))` with `Q` from `q_feat`
/// and `K, V` from `kv_feat`.
pub fn cross_attend(p: &CrossAttnParams, q_feat: &Tensor, kv_feat: &Tensor) -> Result<Tensor> {
    Ok(cross_attend_with_weights(p, q_feat, kv_feat)?.0)
}

pub fn cross_attend_with_weights(p: &CrossAttnParams, q_feat: &Tensor, kv_feat: &Tensor) -> Result<(Tensor, Tensor)> {
    let (qf, squeeze) = nn::batched(q_feat)?;
    let (kvf, _) = nn::batched(kv_feat)?;
    check_same_shape(&qf, &kvf, "cross-attention inputs")?;
    let q = p.q.forward(&qf)?;
    let k = p.k.forward(&kvf)?;
    let v = p.v.forward(&kvf)?;
    let (attn, weights) = multi_head_attention(&q, &k, &v, p.heads)?;
    let y = (qf + p.out.forward(&attn)?)?;
    let y = match &p.norm {
        Some(ln) => ln.forward(&y)?,
        None => y,
    };
    Ok((nn::unbatch(y, squeeze)?, weights))
}

/// Per-block HL-Attn unit.
#[derive(Debug, Clone)]
pub struct HlAttnBlock {
    pub stage1: CrossAttnParams,
    pub stage2: CrossAttnParams,
    pub self_attn: CrossAttnParams,
    pub output: Linear,
    pub order: FusionOrder,
}

pub fn fusion_block_prefix(index: usize) -> String {
    format!("fusion.blocks.{index}")
}

impl HlAttnBlock {
    /// Stage-1/stage-2/self-attention units plus the zero-initialised output
    /// projection that maps the fused features to `E_Ω`.
    pub fn init_params(store: &mut ParamStore, index: usize, dim: usize, seed: u64) -> Result<()> {
        let prefix = fusion_block_prefix(index);
        let mut r = rng::stream(seed, "hl-attn-init", index as u64);
        for unit in ["stage1", "stage2", "self"] {
            CrossAttnParams::init_params(store, &format!("{prefix}.{unit}"), dim, &mut r)?;
        }
        store.init_const(&format!("{prefix}.output.weight"), &[dim, dim], 0.0)?;
        store.init_const(&format!("{prefix}.output.bias"), &[dim], 0.0)
    }

    pub fn load(store: &ParamStore, index: usize, heads: usize, order: FusionOrder, layer_norm: bool) -> Result<Self> {
        let prefix = fusion_block_prefix(index);
        Ok(Self {
            stage1: CrossAttnParams::load(store, &format!("{prefix}.stage1"), heads, layer_norm)?,
            stage2: CrossAttnParams::load(store, &format!("{prefix}.stage2"), heads, layer_norm)?,
            self_attn: CrossAttnParams::load(store, &format!("{prefix}.self"), heads, layer_norm)?,
            output: Linear::load(store, &format!("{prefix}.output"))?,
            order,
        })
    }
}

/// Intermediate tensors of one HL-Attn pass.
#[derive(Debug, Clone)]
pub struct HlAttnTrace {
    pub output: Tensor,
    pub fused: Tensor,
    pub stage1_weights: Tensor,
    pub stage2_weights: Tensor,
    pub self_weights: Tensor,
}

/// `E_Ω(x) = f_HL-Attn(E_im, E_pa, E_pi)`.
pub fn hl_attn_fuse(h: &HlAttnBlock, e_im: &Tensor, e_pa: &Tensor, e_pi: &Tensor) -> Result<Tensor> {
    Ok(hl_attn_trace(h, e_im, e_pa, e_pi)?.output)
}

pub fn hl_attn_trace(h: &HlAttnBlock, e_im: &Tensor, e_pa: &Tensor, e_pi: &Tensor) -> Result<HlAttnTrace> {
    check_same_shape(e_im, e_pa, "HL-Attn inputs")?;
    check_same_shape(e_im, e_pi, "HL-Attn inputs")?;
    let pr = pairing(h.order)?;
    let pick = |l: Level| match l {
        Level::Image => e_im,
        Level::Patch => e_pa,
        Level::Pixel => e_pi,
    };
    let (inter, w1) = cross_attend_with_weights(&h.stage1, pick(pr.stage1_query), pick(pr.stage1_kv))?;
    let operand = |o: Operand| match o {
        Operand::Expert(l) => pick(l).clone(),
        Operand::Intermediate => inter.clone(),
    };
    let (fused, w2) = cross_attend_with_weights(&h.stage2, &operand(pr.stage2_query), &operand(pr.stage2_kv))?;
    let (fused, w3) = cross_attend_with_weights(&h.self_attn, &fused, &fused)?;
    let output = h.output.forward(&fused)?;
    Ok(HlAttnTrace {
        output,
        fused,
        stage1_weights: w1,
        stage2_weights: w2,
        self_weights: w3,
    })
}

/// Fusion for a model that retains a single expert: the self-attention unit
/// followed by the zero-initialised output projection.
#[derive(Debug, Clone)]
pub struct SingleFusion {
    pub self_attn: CrossAttnParams,
    pub output: Linear,
}

impl SingleFusion {
    pub fn init_params(store: &mut ParamStore, index: usize, dim: usize, seed: u64) -> Result<()> {
        let prefix = fusion_block_prefix(index);
        let mut r = rng::stream(seed, "single-fusion-init", index as u64);
        CrossAttnParams::init_params(store, &format!("{prefix}.self"), dim, &mut r)?;
        store.init_const(&format!("{prefix}.output.weight"), &[dim, dim], 0.0)?;
        store.init_const(&format!("{prefix}.output.bias"), &[dim], 0.0)
    }

    pub fn load(store: &ParamStore, index: usize, heads: usize, layer_norm: bool) -> Result<Self> {
        let prefix = fusion_block_prefix(index);
        Ok(Self {
            self_attn: CrossAttnParams::load(store, &format!("{prefix}.self"), heads, layer_norm)?,
            output: Linear::load(store, &format!("{prefix}.output"))?,
        })
    }
}

pub fn hl_attn_single(h: &SingleFusion, e: &Tensor) -> Result<Tensor> {
    Ok(hl_attn_single_with_weights(h, e)?.0)
}

pub fn hl_attn_single_with_weights(h: &SingleFusion, e: &Tensor) -> Result<(Tensor, Tensor)> {
    let (fused, w) = cross_attend_with_weights(&h.self_attn, e, e)?;
    Ok((h.output.forward(&fused)?, w))
}

/// `O(x) = F_θ(x) + E_Ω(x)`.
pub fn block_output(f_theta: &Tensor, e_omega: &Tensor) -> Result<Tensor> {
    check_same_shape(f_theta, e_omega, "block output")?;
    Ok((f_theta + e_omega)?)
}

/// `Σ w_i e_i`.
pub fn lac_fuse(weights: &[f64], outputs: &[&Tensor]) -> Result<Tensor> {
    if weights.len() != outputs.len() || outputs.is_empty() {
        return Err(SamoraError::dim(format!(
            "{} weights for {} outputs",
            weights.len(),
            outputs.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(SamoraError::config("LAC weights must be finite"));
    }
    let mut acc = (outputs[0] * weights[0])?;
    for (w, e) in weights.iter().zip(outputs).skip(1) {
        check_same_shape(&acc, e, "LAC inputs")?;
        acc = (acc + (*e * *w)?)?;
    }
    Ok(acc)
}

/// Same as [`lac_fuse`] with a (possibly trainable) weight tensor `[n]`.
pub fn lac_fuse_tensor(weights: &Tensor, outputs: &[&Tensor]) -> Result<Tensor> {
    let n = weights.dims1()?;
    if n != outputs.len() {
        return Err(SamoraError::dim(format!("{n} weights for {} outputs", outputs.len())));
    }
    let mut acc: Option<Tensor> = None;
    for (i, e) in outputs.iter().enumerate() {
        let term = e.broadcast_mul(&weights.narrow(0, i, 1)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    acc.ok_or_else(|| SamoraError::dim("no outputs"))
}

/// Linear gate from the mean-pooled block input to one logit per expert.
#[derive(Debug, Clone)]
pub struct Gate {
    pub linear: Linear,
}

impl Gate {
    pub fn init_params(store: &mut ParamStore, index: usize, dim: usize, experts: usize, seed: u64) -> Result<()> {
        let mut r = rng::stream(seed, "gate-init", index as u64);
        store.init_linear(&format!("{}.gate", fusion_block_prefix(index)), dim, experts, 0.02, &mut r)
    }

    pub fn load(store: &ParamStore, index: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::load(store, &format!("{}.gate", fusion_block_prefix(index)))?,
        })
    }

    /// Softmax gate weights `[B, n]`.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let (x, _) = nn::batched(x)?;
        let pooled = x.mean(1)?;
        softmax_last(&self.linear.forward(&pooled)?)
    }
}

pub fn gated_mixture_fuse(gate: &Gate, outputs: &[&Tensor], x: &Tensor) -> Result<Tensor> {
    let (xb, squeeze) = nn::batched(x)?;
    let w = gate.weights(&xb)?; // [B, n]
    if w.dims()[1] != outputs.len() {
        return Err(SamoraError::dim(format!(
            "gate has {} outputs for {} experts",
            w.dims()[1],
            outputs.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (i, e) in outputs.iter().enumerate() {
        let (eb, _) = nn::batched(e)?;
        check_same_shape(&eb, &xb, "gated mixture inputs")?;
        let wi = w.narrow(1, i, 1)?.unsqueeze(D::Minus1)?; // [B, 1, 1]
        let term = eb.broadcast_mul(&wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    nn::unbatch(acc.ok_or_else(|| SamoraError::dim("no outputs"))?, squeeze)
}

fn compose_adapter(coeffs: &[f64], parts: &[&LoraAdapter]) -> Result<LoraAdapter> {
    let a = Tensor::cat(&parts.iter().map(|p| p.a.clone()).collect::<Vec<_>>(), 0)?;
    let bs = parts
        .iter()
        .zip(coeffs)
        .map(|(p, c)| Ok((&p.b * *c)?))
        .collect::<Result<Vec<_>>>()?;
    let b = Tensor::cat(&bs, 1)?;
    Ok(LoraAdapter { a, b })
}

/// Composite expert with `ΔW = Σ c_i B_i A_i` per projection, stored
/// exactly as stacked factors of rank `Σ r_i`.
pub fn weight_compose(coeffs: &[f64], experts: &[&LoraExpertSet]) -> Result<LoraExpertSet> {
    if coeffs.len() != experts.len() || experts.is_empty() {
        return Err(SamoraError::config(format!(
            "{} coefficients for {} experts",
            coeffs.len(),
            experts.len()
        )));
    }
    let rank = experts[0].rank;
    let depth = experts[0].blocks.len();
    if let Some(e) = experts.iter().find(|e| e.rank != rank || e.blocks.len() != depth) {
        return Err(SamoraError::config(format!(
            "cannot compose experts of rank {rank} and {} ({:?})",
            e.rank, e.level
        )));
    }
    let mut blocks = Vec::with_capacity(depth);
    for i in 0..depth {
        let get = |f: fn(&BlockAdapters) -> &LoraAdapter| experts.iter().map(|e| f(&e.blocks[i])).collect::<Vec<_>>();
        blocks.push(BlockAdapters {
            q: compose_adapter(coeffs, &get(|b| &b.q))?,
            v: compose_adapter(coeffs, &get(|b| &b.v))?,
            fc1: compose_adapter(coeffs, &get(|b| &b.fc1))?,
            fc2: compose_adapter(coeffs, &get(|b| &b.fc2))?,
        });
    }
    Ok(LoraExpertSet {
        level: None,
        rank: rank * experts.len(),
        blocks,
    })
}

/// Selected via `fusion.strategy` in the experiment config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    HlAttn,
    Lac,
    Gated,
    Compose,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::HlAttn => "hl_attn",
            StrategyKind::Lac => "lac",
            StrategyKind::Gated => "gated",
            StrategyKind::Compose => "compose",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = SamoraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hl_attn" | "hl-attn" => Ok(StrategyKind::HlAttn),
            "lac" => Ok(StrategyKind::Lac),
            "gated" | "mole" => Ok(StrategyKind::Gated),
            "compose" | "lorahub" => Ok(StrategyKind::Compose),
            other => Err(SamoraError::config(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A fully specified fusion strategy.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionStrategy {
    HlAttn(FusionOrder),
    Lac([f64; 3]),
    GatedMixture,
    WeightCompose([f64; 3]),
}

impl FusionStrategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            FusionStrategy::HlAttn(_) => StrategyKind::HlAttn,
            FusionStrategy::Lac(_) => StrategyKind::Lac,
            FusionStrategy::GatedMixture => StrategyKind::Gated,
            FusionStrategy::WeightCompose(_) => StrategyKind::Compose,
        }
    }
}
