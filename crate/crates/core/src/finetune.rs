//! Stage-2 supervised fine-tuning: freezing policy, combined CE + Dice loss,
//! warmup/linear-decay schedule and the training loop.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentConfig};
use crate::data::{batches, epoch_order, stack_images, stack_masks, Raster, SegSample};
use crate::error::{Result, SamoraError};
use crate::model::{inject_lora, lora_prefix, projector_prefix, Level};
use crate::nn::{log_softmax, scalar_f64, softmax_dim};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParamStore;
use crate::segmenter::{AssemblySpec, SamoraModel, DECODER_PREFIX};
use crate::ssl::DENOISE_PREFIX;

/// Training stage whose parameters are unfrozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Stage1(Level),
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Stage1(l) => write!(f, "stage1-{l}"),
            Stage::Stage2 => f.write_str("stage2"),
        }
    }
}

impl FromStr for Stage {
    type Err = SamoraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage2" => Ok(Stage::Stage2),
            _ => match s.strip_prefix("stage1-") {
                Some(l) => Ok(Stage::Stage1(l.parse()?)),
                None => Err(SamoraError::config(format!("unknown stage `{s}`"))),
            },
        }
    }
}

/// Names of the parameters a stage may update.
///
/// Stage 2: every fusion and decoder tensor. Stage 1 at level `k`: the
/// level-`k` adapters plus the projector (image, patch) or the denoising
/// decoder (pixel).
pub fn trainable_parameters(store: &ParamStore, stage: Stage) -> Result<BTreeSet<String>> {
    let prefixes: Vec<String> = match stage {
        Stage::Stage2 => vec!["fusion.".into(), format!("{DECODER_PREFIX}.")],
        Stage::Stage1(Level::Pixel) => vec![format!("{}.", lora_prefix(Level::Pixel)), format!("{DENOISE_PREFIX}.")],
        Stage::Stage1(l) => vec![format!("{}.", lora_prefix(l)), format!("{}.", projector_prefix(l))],
    };
    let set: BTreeSet<String> = store
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())))
        .map(str::to_string)
        .collect();
    if set.is_empty() {
        return Err(SamoraError::config(format!("no parameters to train for {stage}")));
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub fewshot_fraction: f64,
    pub allow_scratch_adapters: bool,
    pub dice_eps: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 0.2,
            lambda_dice: 0.8,
            base_lr: 0.005,
            warmup_steps: 250,
            max_iterations: 18_600,
            batch_size: 8,
            epochs: 20,
            weight_decay: 0.1,
            betas: (0.9, 0.999),
            fewshot_fraction: 0.1,
            allow_scratch_adapters: false,
            dice_eps: 1e-5,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(SamoraError::config("max_iterations must be positive"));
        }
        if self.batch_size == 0 || !(self.base_lr >= 0.0) {
            return Err(SamoraError::config("batch_size > 0 and base_lr >= 0 required"));
        }
        if !(self.lambda_ce >= 0.0 && self.lambda_dice >= 0.0) {
            return Err(SamoraError::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Warmup then linear decay:
/// `T * I / WP` for `T <= WP`, `I * (1 - (T - WP) / MI)` afterwards, floored
/// at zero. `WP = 0` starts directly in the decay branch.
pub fn lr_at(cfg: &FinetuneConfig, t: usize) -> f64 {
    let (i, wp, mi) = (cfg.base_lr, cfg.warmup_steps, cfg.max_iterations as f64);
    if wp > 0 && t <= wp {
        i * (t as f64 / wp as f64)
    } else {
        (i * (1.0 - (t - wp) as f64 / mi)).max(0.0)
    }
}

fn batched_logits(logits: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor)> {
    match (logits.rank(), target.rank()) {
        (3, 2) => Ok((logits.unsqueeze(0)?, target.unsqueeze(0)?)),
        (4, 3) => Ok((logits.clone(), target.clone())),
        _ => Err(SamoraError::dim(format!(
            "logits {:?} incompatible with mask {:?}",
            logits.dims(),
            target.dims()
        ))),
    }
}

fn check_labels(logits: &Tensor, target: &Tensor) -> Result<()> {
    let (b, c, h, w) = logits.dims4()?;
    if target.dims() != [b, h, w] {
        return Err(SamoraError::dim(format!("mask {:?} vs logits {:?}", target.dims(), logits.dims())));
    }
    let max = target.to_dtype(DType::U32)?.flatten_all()?.max(0)?.to_scalar::<u32>()?;
    if max as usize >= c {
        return Err(SamoraError::Data(format!("label {max} out of range for {} classes", c - 1)));
    }
    Ok(())
}

fn one_hot(target: &Tensor, classes: usize, dtype: DType) -> Result<Tensor> {
    let (b, h, w) = target.dims3()?;
    let labels = target.to_dtype(DType::U32)?.flatten_all()?.to_vec1::<u32>()?;
    let mut v = vec![0f64; b * classes * h * w];
    for (k, &l) in labels.iter().enumerate() {
        let (bi, p) = (k / (h * w), k % (h * w));
        v[(bi * classes + l as usize) * h * w + p] = 1.0;
    }
    Ok(Tensor::from_vec(v, (b, classes, h, w), target.device())?.to_dtype(dtype)?)
}

/// Mean pixelwise cross-entropy. `logits: [B, C+1, H, W]`, `target: [B, H, W]`.
pub fn cross_entropy_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (logits, target) = batched_logits(logits, target)?;
    check_labels(&logits, &target)?;
    let logp = log_softmax(&logits, 1)?;
    let idx = target.to_dtype(DType::U32)?.unsqueeze(1)?;
    Ok((logp.gather(&idx, 1)?.mean_all()? * -1.0)?)
}

/// `1 - mean_c (2 Σ p q + ε) / (Σ p + Σ q + ε)` over foreground classes,
/// sums taken over the whole batch.
pub fn soft_dice_loss(logits: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    let (logits, target) = batched_logits(logits, target)?;
    check_labels(&logits, &target)?;
    let c = logits.dims()[1];
    if c < 2 {
        return Err(SamoraError::dim("soft Dice needs at least one foreground class"));
    }
    let p = softmax_dim(&logits, 1)?.narrow(1, 1, c - 1)?;
    let q = one_hot(&target, c, logits.dtype())?.narrow(1, 1, c - 1)?;
    let sum = |t: &Tensor| -> Result<Tensor> { Ok(t.sum(D::Minus1)?.sum(D::Minus1)?.sum(0)?) };
    let inter = sum(&(&p * &q)?)?;
    let denom = ((sum(&p)? + sum(&q)?)? + eps)?;
    let dice = ((inter * 2.0)? + eps)?.div(&denom)?;
    Ok((1.0 - dice.mean_all()?.to_dtype(logits.dtype())?)?.to_dtype(logits.dtype())?)
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub ce: Tensor,
    pub dice: Tensor,
}

/// `λ_ce · CE + λ_dice · Dice`.
pub fn combined_loss(logits: &Tensor, target: &Tensor, cfg: &FinetuneConfig) -> Result<Tensor> {
    Ok(combined_loss_parts(logits, target, cfg)?.total)
}

pub fn combined_loss_parts(logits: &Tensor, target: &Tensor, cfg: &FinetuneConfig) -> Result<LossParts> {
    let ce = cross_entropy_loss(logits, target)?;
    let dice = soft_dice_loss(logits, target, cfg.dice_eps)?;
    let total = ((&ce * cfg.lambda_ce)? + (&dice * cfg.lambda_dice)?)?;
    Ok(LossParts { total, ce, dice })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_dice: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneReport {
    pub steps: Vec<StepRecord>,
    /// Mean total loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl FinetuneReport {
    /// One `key=value` line per optimizer step.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| SamoraError::io(path, e))?;
        let mut text = format!("seed={} config_hash={}\n", self.seed, self.config_hash);
        for s in &self.steps {
            text.push_str(&format!(
                "step={} lr={:.8e} loss_ce={:.6} loss_dice={:.6} loss_total={:.6}\n",
                s.step, s.lr, s.loss_ce, s.loss_dice, s.loss_total
            ));
        }
        f.write_all(text.as_bytes()).map_err(|e| SamoraError::io(path, e))
    }

    pub fn total_losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss_total).collect()
    }
}

/// Ensure every retained level has an expert in `store`. Missing experts are
/// an error unless scratch adapters are allowed, in which case fresh
/// zero-delta adapters are injected.
pub fn ensure_experts(store: &mut ParamStore, spec: &AssemblySpec, allow_scratch: bool, seed: u64) -> Result<()> {
    for &level in &spec.levels {
        let prefix = format!("{}.", lora_prefix(level));
        if store.names().any(|n| n.starts_with(&prefix)) {
            continue;
        }
        if !allow_scratch {
            return Err(SamoraError::Refused(format!(
                "no {level} adapter checkpoint loaded; pass --allow-scratch-adapters to fine-tune with fresh adapters"
            )));
        }
        inject_lora(store, &spec.encoder, level, spec.rank, seed)?;
    }
    Ok(())
}

/// Train fusion + decoder on labeled, preprocessed slices. Encoder and
/// experts stay frozen.
pub fn finetune(
    store: &mut ParamStore,
    spec: &AssemblySpec,
    data: &[SegSample],
    cfg: &FinetuneConfig,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(SamoraError::Data("empty fine-tuning set".into()));
    }
    ensure_experts(store, spec, cfg.allow_scratch_adapters, seed)?;
    let names = trainable_parameters(store, Stage::Stage2)?;
    store.set_trainable(|n| names.contains(n))?;
    let (dtype, device) = (store.dtype(), store.device().clone());
    let mut opt = Optimizer::new(
        store.trainable_vars(),
        &OptimizerConfig::adamw(lr_at(cfg, 1), cfg.betas, cfg.weight_decay),
    )?;
    let mut report = FinetuneReport {
        seed,
        ..Default::default()
    };
    let last_step = cfg.warmup_steps + cfg.max_iterations;
    let mut t = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), seed, "finetune", epoch);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0;
        for idx in batches(&order, cfg.batch_size, 1) {
            if t >= last_step {
                break 'epochs;
            }
            t += 1;
            let lr = lr_at(cfg, t);
            opt.set_learning_rate(lr);
            let picked: Vec<SegSample> = idx.iter().map(|&i| data[i].clone()).collect();
            let batch = augment_batch(&picked, aug, seed, (t as u64) << 20);
            let images: Vec<&Raster<f32>> = batch.iter().map(|s| &s.image).collect();
            let masks: Vec<&Raster<u8>> = batch.iter().map(|s| &s.mask).collect();
            let x = stack_images(&images, dtype, &device)?;
            let y = stack_masks(&masks, &device)?;
            let model = SamoraModel::load(store, spec)?;
            let parts = combined_loss_parts(&model.forward(&x)?, &y, cfg)?;
            let rec = StepRecord {
                step: t,
                lr,
                loss_ce: scalar_f64(&parts.ce)?,
                loss_dice: scalar_f64(&parts.dice)?,
                loss_total: scalar_f64(&parts.total)?,
            };
            if !rec.loss_total.is_finite() {
                return Err(SamoraError::Protocol(format!("non-finite loss at step {t}")));
            }
            epoch_sum += rec.loss_total;
            epoch_n += 1;
            report.steps.push(rec);
            opt.backward_step(&parts.total)?;
        }
        if epoch_n > 0 {
            report.epoch_losses.push(epoch_sum / epoch_n as f64);
        }
    }
    store.freeze_all()?;
    Ok(report)
}

/// Arg-max label maps for preprocessed slices.
pub fn predict_masks(model: &SamoraModel, samples: &[SegSample], batch: usize) -> Result<Vec<Raster<u8>>> {
    let dtype = model.encoder.pos_embed.dtype();
    let device = model.encoder.pos_embed.device().clone();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&Raster<f32>> = chunk.iter().map(|s| &s.image).collect();
        let logits = model.forward(&stack_images(&images, dtype, &device)?)?;
        let (b, _, h, w) = logits.dims4()?;
        let labels = logits.argmax(1)?.to_dtype(DType::U32)?.flatten_all()?.to_vec1::<u32>()?;
        for k in 0..b {
            let data = labels[k * h * w..(k + 1) * h * w].iter().map(|&v| v as u8).collect();
            out.push(Raster::from_vec(h, w, data)?);
        }
    }
    Ok(out)
}
