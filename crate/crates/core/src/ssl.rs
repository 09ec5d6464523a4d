//! Stage-1 pretext tasks: teacher continual pretraining, teacher→student
//! distillation into image/patch experts, and pixel-level denoising.

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_image, AugmentConfig};
use crate::data::{batches, epoch_order, stack_images, zscore, Raster};
use crate::error::{Result, SamoraError};
use crate::finetune::{trainable_parameters, Stage};
use crate::model::{
    forward_decoder, forward_frozen_block, project_features, EncoderBlock, EncoderConfig, FrozenEncoder,
    LoraExpertSet, Level, Projector, SegDecoder,
};
use crate::nn::{self, log_softmax, normalize_last, patchify, scalar_f64, Linear, LayerNorm, LN_EPS};
use crate::optim::{warmup_cosine, Optimizer, OptimizerConfig, OptimizerKind};
use crate::params::ParamStore;
use crate::rng;
use crate::segmenter::student_forward_all;

/// `mean((f - g)^2)` over every element.
pub fn recon_loss(f_out: &Tensor, g_out: &Tensor) -> Result<Tensor> {
    nn::check_same_shape(f_out, g_out, "recon_loss")?;
    Ok((f_out - g_out)?.sqr()?.mean_all()?)
}

/// Normalised-temperature cross entropy over the `2B` embeddings of two
/// views; row `i` of `z_a` and `z_b` are positives.
pub fn nt_xent_loss(z_a: &Tensor, z_b: &Tensor, tau: f64) -> Result<Tensor> {
    nn::check_same_shape(z_a, z_b, "nt_xent_loss")?;
    let (b, _) = z_a.dims2()?;
    if b < 2 {
        return Err(SamoraError::dim("NT-Xent needs a batch of at least 2"));
    }
    if !(tau > 0.0) {
        return Err(SamoraError::config("temperature must be positive"));
    }
    let z = Tensor::cat(&[z_a, z_b], 0)?;
    let norm = z.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-12, f64::INFINITY)?;
    let z = z.broadcast_div(&norm)?;
    let n = 2 * b;
    let sim = (z.matmul(&z.t()?)? / tau)?;
    // mask the diagonal out of the softmax
    let eye: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { -1e9 } else { 0.0 }).collect();
    let eye = nn::from_f64(&eye, &[n, n], sim.dtype(), sim.device())?;
    let logp = log_softmax(&(sim + eye)?, 1)?;
    let pos: Vec<u32> = (0..n).map(|i| ((i + b) % n) as u32).collect();
    let pos = Tensor::from_vec(pos, (n, 1), z.device())?;
    Ok((logp.gather(&pos, 1)?.mean_all()? * -1.0)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskIndices {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

/// `floor(ratio * L)` tokens masked uniformly at random.
pub fn mae_mask(num_tokens: usize, ratio: f64, seed: u64) -> Result<MaskIndices> {
    mae_mask_indexed(num_tokens, ratio, seed, 0)
}

pub fn mae_mask_indexed(num_tokens: usize, ratio: f64, seed: u64, index: u64) -> Result<MaskIndices> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(SamoraError::config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n_mask = (ratio * num_tokens as f64 + 1e-9).floor() as usize;
    let mut idx: Vec<usize> = (0..num_tokens).collect();
    idx.shuffle(&mut rng::stream(seed, "mae-mask", index));
    let mut masked = idx[..n_mask].to_vec();
    let mut visible = idx[n_mask..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskIndices { visible, masked })
}

/// Zero-mean Gaussian samples keyed by `(seed, index)`.
pub fn gaussian_noise_field(n: usize, sigma: f64, seed: u64, index: u64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    rng::normal(&mut rng::stream(seed, "noise", index), sigma, n)
}

/// Additive Gaussian noise, clipped to the [0, 1] intensity range.
pub fn add_noise(image: &Raster<f32>, sigma: f64, seed: u64) -> Result<Raster<f32>> {
    add_noise_indexed(image, sigma, seed, 0)
}

pub fn add_noise_indexed(image: &Raster<f32>, sigma: f64, seed: u64, index: u64) -> Result<Raster<f32>> {
    if !(sigma >= 0.0) {
        return Err(SamoraError::config("noise sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let noise = gaussian_noise_field(image.len(), sigma, seed, index);
    let data = image
        .data
        .iter()
        .zip(&noise)
        .map(|(&v, &e)| (v as f64 + e).clamp(0.0, 1.0) as f32)
        .collect();
    Raster::from_vec(image.height, image.width, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrScaling {
    None,
    /// `base * batch / 256`
    Linear,
    /// `base * sqrt(batch)`
    Sqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextConfig {
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub lr_scaling: LrScaling,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub warmup_epochs: usize,
    /// Teacher CPT epochs (image, patch) or denoising epochs (pixel).
    pub epochs: usize,
    pub distill_epochs: usize,
    pub distill_lr: f64,
    pub temperature: f64,
    pub mask_ratio: f64,
    pub noise_sigma: f64,
    pub lars_eta: f64,
}

impl PretextConfig {
    pub fn image() -> Self {
        Self {
            optimizer: OptimizerKind::Lars,
            base_lr: 0.075,
            lr_scaling: LrScaling::Sqrt,
            batch_size: 16,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            warmup_epochs: 3,
            epochs: 8,
            distill_epochs: 8,
            distill_lr: 1e-3,
            temperature: 0.1,
            mask_ratio: 0.75,
            noise_sigma: 0.1,
            lars_eta: 0.001,
        }
    }

    pub fn patch() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            base_lr: 1.5e-4,
            lr_scaling: LrScaling::Linear,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            warmup_epochs: 3,
            epochs: 6,
            distill_epochs: 6,
            ..Self::image()
        }
    }

    pub fn pixel() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            base_lr: 1e-4,
            lr_scaling: LrScaling::Linear,
            weight_decay: 0.05,
            betas: (0.9, 0.99),
            warmup_epochs: 1,
            epochs: 3,
            distill_epochs: 0,
            ..Self::image()
        }
    }

    pub fn for_level(level: Level) -> Self {
        match level {
            Level::Image => Self::image(),
            Level::Patch => Self::patch(),
            Level::Pixel => Self::pixel(),
        }
    }

    pub fn effective_lr(&self) -> f64 {
        let b = self.batch_size as f64;
        match self.lr_scaling {
            LrScaling::None => self.base_lr,
            LrScaling::Linear => self.base_lr * b / 256.0,
            LrScaling::Sqrt => self.base_lr * b.sqrt(),
        }
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.effective_lr(),
            betas: self.betas,
            weight_decay: self.weight_decay,
            momentum: 0.9,
            eta: self.lars_eta,
        }
    }

    fn distill_optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig::adamw(self.distill_lr, (0.9, 0.999), 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.base_lr >= 0.0) || !(self.temperature > 0.0) {
            return Err(SamoraError::config("pretext batch_size, base_lr and temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) || !(self.noise_sigma >= 0.0) {
            return Err(SamoraError::config("mask_ratio in [0, 1) and noise_sigma >= 0 required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    /// Channels of the first conv block; doubled twice, then kept.
    pub conv_width: usize,
    pub proj_dim: usize,
    pub vit_depth: usize,
    pub vit_dim: usize,
    pub vit_heads: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            conv_width: 16,
            proj_dim: 32,
            vit_depth: 4,
            vit_dim: 128,
            vit_heads: 4,
        }
    }
}

impl TeacherConfig {
    fn conv_channels(&self) -> [usize; 5] {
        let w = self.conv_width;
        [1, w, 2 * w, 4 * w, 4 * w]
    }
}

const CONV_PREFIX: &str = "teacher.image";
const VIT_PREFIX: &str = "teacher.patch";

/// Teacher network for the image level (conv encoder + MLP head, trained
/// contrastively) or the patch level (small ViT with a masked-pixel head).
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub level: Level,
    pub cfg: TeacherConfig,
    pub store: ParamStore,
    pub patch_size: usize,
    pub image_size: usize,
    pub frozen: bool,
    pub loss_curve: Vec<f64>,
}

fn init_vit_block(store: &mut ParamStore, prefix: &str, d: usize, mlp: usize, r: &mut rng::StreamRng) -> Result<()> {
    store.init_layer_norm(&format!("{prefix}.norm1"), d)?;
    store.init_layer_norm(&format!("{prefix}.norm2"), d)?;
    for (name, i, o) in [
        ("attn.q", d, d),
        ("attn.k", d, d),
        ("attn.v", d, d),
        ("attn.out", d, d),
        ("mlp.fc1", d, mlp),
        ("mlp.fc2", mlp, d),
    ] {
        store.init_trunc_normal(&format!("{prefix}.{name}.weight"), &[o, i], 0.02, r)?;
        store.init_const(&format!("{prefix}.{name}.bias"), &[o], 0.0)?;
    }
    Ok(())
}

impl TeacherModel {
    pub fn init(level: Level, cfg: &TeacherConfig, enc: &EncoderConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device);
        let mut r = rng::stream(seed, &format!("teacher-{level}"), 0);
        match level {
            Level::Image => {
                let ch = cfg.conv_channels();
                for i in 0..4 {
                    let fan_in = ch[i] * 9;
                    store.init_normal(
                        &format!("{CONV_PREFIX}.conv{i}.weight"),
                        &[ch[i + 1], ch[i], 3, 3],
                        (2.0 / fan_in as f64).sqrt(),
                        &mut r,
                    )?;
                    store.init_const(&format!("{CONV_PREFIX}.conv{i}.bias"), &[ch[i + 1]], 0.0)?;
                }
                store.init_linear(&format!("{CONV_PREFIX}.head1"), ch[4], ch[4], 1.0 / (ch[4] as f64).sqrt(), &mut r)?;
                store.init_linear(&format!("{CONV_PREFIX}.head2"), ch[4], cfg.proj_dim, 1.0 / (ch[4] as f64).sqrt(), &mut r)?;
            }
            Level::Patch => {
                let (d, pp) = (cfg.vit_dim, enc.patch_size * enc.patch_size);
                if cfg.vit_heads == 0 || d % cfg.vit_heads != 0 {
                    return Err(SamoraError::config("teacher vit_dim must be divisible by vit_heads"));
                }
                store.init_trunc_normal(&format!("{VIT_PREFIX}.embed.weight"), &[d, pp], 0.02, &mut r)?;
                store.init_const(&format!("{VIT_PREFIX}.embed.bias"), &[d], 0.0)?;
                store.init_trunc_normal(&format!("{VIT_PREFIX}.pos"), &[enc.seq_len(), d], 0.02, &mut r)?;
                for i in 0..cfg.vit_depth {
                    init_vit_block(&mut store, &format!("{VIT_PREFIX}.blocks.{i}"), d, 4 * d, &mut r)?;
                }
                store.init_layer_norm(&format!("{VIT_PREFIX}.norm"), d)?;
                store.init_trunc_normal(&format!("{VIT_PREFIX}.recon.weight"), &[pp, d], 0.02, &mut r)?;
                store.init_const(&format!("{VIT_PREFIX}.recon.bias"), &[pp], 0.0)?;
            }
            Level::Pixel => {
                return Err(SamoraError::config("the pixel level has no teacher"));
            }
        }
        store.freeze_all()?;
        Ok(Self {
            level,
            cfg: cfg.clone(),
            store,
            patch_size: enc.patch_size,
            image_size: enc.image_size,
            frozen: true,
            loss_curve: Vec::new(),
        })
    }

    /// Width of the features handed to the projector.
    pub fn feature_dim(&self) -> usize {
        match self.level {
            Level::Image => self.cfg.conv_channels()[4],
            _ => self.cfg.vit_dim,
        }
    }

    pub fn freeze(&mut self) -> Result<()> {
        self.store.freeze_all()?;
        self.frozen = true;
        Ok(())
    }

    fn conv_pooled(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for i in 0..4 {
            let w = self.store.get(&format!("{CONV_PREFIX}.conv{i}.weight"))?;
            let b = self.store.get(&format!("{CONV_PREFIX}.conv{i}.bias"))?;
            x = x.conv2d(&w, 1, 2, 1, 1)?;
            x = x.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?.gelu_erf()?;
        }
        Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    fn vit_tokens(&self, images: &Tensor) -> Result<Tensor> {
        let patches = patchify(images, self.patch_size)?;
        let embed = Linear::load(&self.store, &format!("{VIT_PREFIX}.embed"))?;
        let mut x = embed.forward(&patches)?.broadcast_add(&self.store.get(&format!("{VIT_PREFIX}.pos"))?)?;
        for i in 0..self.cfg.vit_depth {
            let blk = EncoderBlock::load(&self.store, &format!("{VIT_PREFIX}.blocks.{i}"), self.cfg.vit_heads)?;
            x = forward_frozen_block(&blk, &x)?;
        }
        LayerNorm::load(&self.store, &format!("{VIT_PREFIX}.norm"))?.forward(&x)
    }

    /// Image level: pooled conv features `[B, C]`. Patch level: token
    /// features `[B, L, d_t]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        match self.level {
            Level::Image => self.conv_pooled(images),
            _ => self.vit_tokens(images),
        }
    }

    /// Contrastive embedding of the image-level teacher.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let h = self.conv_pooled(images)?;
        let h = Linear::load(&self.store, &format!("{CONV_PREFIX}.head1"))?.forward(&h)?.gelu_erf()?;
        Linear::load(&self.store, &format!("{CONV_PREFIX}.head2"))?.forward(&h)
    }

    /// Per-token pixel predictions `[B, L, p*p]` of the patch-level teacher.
    pub fn reconstruct(&self, images: &Tensor) -> Result<Tensor> {
        let t = self.vit_tokens(images)?;
        Linear::load(&self.store, &format!("{VIT_PREFIX}.recon"))?.forward(&t)
    }
}

fn tensor_batch(images: &[Raster<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let refs: Vec<&Raster<f32>> = images.iter().collect();
    stack_images(&refs, dtype, device)
}

/// Per-sample keep mask `[B, 1, H, W]` (1 on visible patches) and masked-token
/// indicator `[B, L, 1]`.
fn token_masks(b: usize, enc_grid: usize, patch: usize, ratio: f64, seed: u64, first: u64, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let l = enc_grid * enc_grid;
    let side = enc_grid * patch;
    let mut keep = vec![1.0f64; b * side * side];
    let mut tok = vec![0.0f64; b * l];
    for s in 0..b {
        let m = mae_mask_indexed(l, ratio, seed, first + s as u64)?;
        for &t in &m.masked {
            tok[s * l + t] = 1.0;
            let (gy, gx) = (t / enc_grid, t % enc_grid);
            for y in 0..patch {
                for x in 0..patch {
                    keep[s * side * side + (gy * patch + y) * side + gx * patch + x] = 0.0;
                }
            }
        }
    }
    Ok((
        nn::from_f64(&keep, &[b, 1, side, side], dtype, device)?,
        nn::from_f64(&tok, &[b, l, 1], dtype, device)?,
    ))
}

fn check_corpus(corpus: &[Raster<f32>], size: usize) -> Result<()> {
    if corpus.is_empty() {
        return Err(SamoraError::Data("empty unlabeled corpus".into()));
    }
    if let Some(r) = corpus.iter().find(|r| r.height != size || r.width != size) {
        return Err(SamoraError::dim(format!(
            "corpus raster {}x{} does not match model size {size}",
            r.height, r.width
        )));
    }
    Ok(())
}

fn schedule_steps(n: usize, batch: usize, min_last: usize) -> usize {
    batches(&(0..n).collect::<Vec<_>>(), batch, min_last).len()
}

/// Continual pretraining of a teacher on the unlabeled corpus with its own
/// pretext objective (NT-Xent for image, masked reconstruction for patch).
/// Returns the teacher frozen, with its loss curve.
pub fn cpt_teacher(mut teacher: TeacherModel, corpus: &[Raster<f32>], cfg: &PretextConfig, seed: u64) -> Result<TeacherModel> {
    cfg.validate()?;
    check_corpus(corpus, teacher.image_size)?;
    let (dtype, device) = (teacher.store.dtype(), teacher.store.device().clone());
    teacher.store.set_trainable(|n| n.starts_with("teacher."))?;
    teacher.frozen = false;
    let mut opt = Optimizer::new(teacher.store.trainable_vars(), &cfg.optimizer_config())?;
    let min_last = if teacher.level == Level::Image { 2 } else { 1 };
    let per_epoch = schedule_steps(corpus.len(), cfg.batch_size, min_last);
    let total = per_epoch * cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs.min(cfg.epochs);
    let aug = AugmentConfig::default();
    let tag = format!("cpt-{}", teacher.level);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(corpus.len(), seed, &tag, epoch);
        for idx in batches(&order, cfg.batch_size, min_last) {
            opt.set_learning_rate(warmup_cosine(step, warmup, total, cfg.effective_lr()));
            let loss = match teacher.level {
                Level::Image => {
                    let view = |k: u64| -> Result<Tensor> {
                        let imgs: Vec<Raster<f32>> = idx
                            .iter()
                            .map(|&i| zscore(&augment_image(&corpus[i], &aug, seed, (step as u64 * 2 + k) * 1_000_003 + i as u64)))
                            .collect();
                        tensor_batch(&imgs, dtype, &device)
                    };
                    let (a, b) = (view(0)?, view(1)?);
                    nt_xent_loss(&teacher.embed(&a)?, &teacher.embed(&b)?, cfg.temperature)?
                }
                _ => {
                    let imgs: Vec<Raster<f32>> = idx.iter().map(|&i| zscore(&corpus[i])).collect();
                    let x = tensor_batch(&imgs, dtype, &device)?;
                    let grid = teacher.image_size / teacher.patch_size;
                    let (keep, tok) = token_masks(idx.len(), grid, teacher.patch_size, cfg.mask_ratio, seed, (step * cfg.batch_size) as u64, dtype, &device)?;
                    let pred = teacher.reconstruct(&(&x * &keep)?)?;
                    let target = patchify(&x, teacher.patch_size)?;
                    let err = (pred - target)?.sqr()?.broadcast_mul(&tok)?;
                    let denom = (scalar_f64(&tok.sum_all()?)? * (teacher.patch_size * teacher.patch_size) as f64).max(1.0);
                    (err.sum_all()? / denom)?
                }
            };
            teacher.loss_curve.push(scalar_f64(&loss)?);
            opt.backward_step(&loss)?;
            step += 1;
        }
    }
    teacher.freeze()?;
    Ok(teacher)
}

/// Result of one stage-1 run.
#[derive(Debug, Clone, Default)]
pub struct PretextOutcome {
    pub losses: Vec<f64>,
    pub steps: usize,
    pub psnr_before: Option<f64>,
    pub psnr_after: Option<f64>,
}

fn set_stage1_trainables(store: &mut ParamStore, level: Level) -> Result<()> {
    let names = trainable_parameters(store, Stage::Stage1(level))?;
    store.set_trainable(|n| names.contains(n))
}

/// Distil a frozen teacher into the level-`level` LoRA expert of the student
/// through the projector. `student` must hold `encoder.*`, `lora.{level}.*`
/// and `projector.{level}.*`; only the latter two are updated.
pub fn distill_level(
    level: Level,
    teacher: &TeacherModel,
    student: &mut ParamStore,
    enc: &EncoderConfig,
    corpus: &[Raster<f32>],
    cfg: &PretextConfig,
    seed: u64,
) -> Result<PretextOutcome> {
    if level == Level::Pixel || teacher.level != level {
        return Err(SamoraError::config(format!("cannot distil a {} teacher into the {level} expert", teacher.level)));
    }
    if !teacher.frozen || !teacher.store.trainable_names().is_empty() {
        return Err(SamoraError::Refused("teacher must be frozen before distillation".into()));
    }
    cfg.validate()?;
    check_corpus(corpus, enc.image_size)?;
    set_stage1_trainables(student, level)?;
    let (dtype, device) = (student.dtype(), student.device().clone());
    let mut opt = Optimizer::new(student.trainable_vars(), &cfg.distill_optimizer_config())?;
    let per_epoch = schedule_steps(corpus.len(), cfg.batch_size, 1);
    let total = per_epoch * cfg.distill_epochs;
    let warmup = per_epoch * cfg.warmup_epochs.min(cfg.distill_epochs);
    let aug = AugmentConfig::default();
    let tag = format!("distill-{level}");
    let mut out = PretextOutcome::default();
    for epoch in 0..cfg.distill_epochs {
        let order = epoch_order(corpus.len(), seed, &tag, epoch);
        for idx in batches(&order, cfg.batch_size, 1) {
            opt.set_learning_rate(warmup_cosine(out.steps, warmup, total, cfg.distill_lr));
            let loss = distill_loss(level, teacher, student, enc, corpus, &idx, &aug, cfg, seed, out.steps, dtype, &device)?;
            out.losses.push(scalar_f64(&loss)?);
            opt.backward_step(&loss)?;
            out.steps += 1;
        }
    }
    student.freeze_all()?;
    Ok(out)
}

/// Distillation loss of one batch, exposed for zero-loss fixpoint checks.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss(
    level: Level,
    teacher: &TeacherModel,
    student: &ParamStore,
    enc: &EncoderConfig,
    corpus: &[Raster<f32>],
    idx: &[usize],
    aug: &AugmentConfig,
    cfg: &PretextConfig,
    seed: u64,
    step: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let encoder = FrozenEncoder::load(student, enc)?;
    let expert = LoraExpertSet::load(student, level, enc.depth)?;
    let projector = Projector::load(student, level)?;
    match level {
        Level::Image => {
            let imgs: Vec<Raster<f32>> = idx
                .iter()
                .map(|&i| zscore(&augment_image(&corpus[i], aug, seed, step as u64 * 1_000_003 + i as u64)))
                .collect();
            let x = tensor_batch(&imgs, dtype, device)?;
            let t = normalize_last(&teacher.features(&x)?.detach(), LN_EPS)?;
            let target = project_features(&projector, &t)?;
            let s = student_forward_all(&encoder, &expert, &x)?.pop().expect("depth >= 1").mean(1)?;
            recon_loss(&normalize_last(&s, LN_EPS)?, &target)
        }
        _ => {
            let imgs: Vec<Raster<f32>> = idx.iter().map(|&i| zscore(&corpus[i])).collect();
            let x = tensor_batch(&imgs, dtype, device)?;
            let (keep, _) = token_masks(idx.len(), enc.grid(), enc.patch_size, cfg.mask_ratio, seed, (step * cfg.batch_size) as u64, dtype, device)?;
            let xm = (&x * &keep)?;
            let t = normalize_last(&teacher.features(&xm)?.detach(), LN_EPS)?;
            let target = project_features(&projector, &t)?;
            let s = student_forward_all(&encoder, &expert, &xm)?.pop().expect("depth >= 1");
            recon_loss(&normalize_last(&s, LN_EPS)?, &target)
        }
    }
}

pub const DENOISE_PREFIX: &str = "denoise";

/// Student encoder with the pixel expert plus a U-Net-style decoder that
/// concatenates the final and middle block tokens before upsampling.
pub struct DenoiseModel {
    pub encoder: FrozenEncoder,
    pub expert: LoraExpertSet,
    pub skip: Linear,
    pub decoder: SegDecoder,
}

impl DenoiseModel {
    pub fn init_params(store: &mut ParamStore, enc: &EncoderConfig, seed: u64) -> Result<()> {
        let mut r = rng::stream(seed, "denoise-init", 0);
        store.init_linear(&format!("{DENOISE_PREFIX}.skip"), 2 * enc.dim, enc.dim, 0.02, &mut r)?;
        SegDecoder::init_params(store, &format!("{DENOISE_PREFIX}.decoder"), enc, 1, seed)
    }

    pub fn load(store: &ParamStore, enc: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            encoder: FrozenEncoder::load(store, enc)?,
            expert: LoraExpertSet::load(store, Level::Pixel, enc.depth)?,
            skip: Linear::load(store, &format!("{DENOISE_PREFIX}.skip"))?,
            decoder: SegDecoder::load(store, &format!("{DENOISE_PREFIX}.decoder"), enc, 0)?,
        })
    }

    /// `[B, 1, H, W]` reconstruction of the input.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let outs = student_forward_all(&self.encoder, &self.expert, images)?;
        let mid = &outs[(outs.len() / 2).saturating_sub(1)];
        let last = outs.last().expect("depth >= 1");
        let cat = Tensor::cat(&[last, mid], D::Minus1)?;
        forward_decoder(&self.decoder, &self.skip.forward(&cat)?)
    }
}

/// Clean target and noisy input, both normalised with the clean slice's
/// statistics.
fn denoise_pair(clean: &Raster<f32>, sigma: f64, seed: u64, index: u64) -> Result<(Raster<f32>, Raster<f32>)> {
    let noisy = add_noise_indexed(clean, sigma, seed, index)?;
    let n = clean.len() as f64;
    let mean = clean.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (clean.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(crate::data::ZSCORE_STD_FLOOR);
    let norm = |r: &Raster<f32>| Raster {
        height: r.height,
        width: r.width,
        data: r.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect(),
    };
    Ok((norm(clean), norm(&noisy)))
}

/// Mean PSNR (peak = per-slice target range) of the denoiser on `images`.
pub fn denoise_psnr(model: &DenoiseModel, images: &[Raster<f32>], sigma: f64, seed: u64, dtype: DType, device: &Device) -> Result<f64> {
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let (clean, noisy) = denoise_pair(img, sigma, seed, 9_000_000 + i as u64)?;
        let y = model.forward(&tensor_batch(std::slice::from_ref(&noisy), dtype, device)?)?;
        let mse = scalar_f64(&recon_loss(&tensor_batch(std::slice::from_ref(&clean), dtype, device)?, &y)?)?;
        let lo = clean.data.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = clean.data.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let peak = (hi - lo).max(1e-12);
        total += 10.0 * (peak * peak / mse.max(1e-20)).log10();
    }
    Ok(total / images.len().max(1) as f64)
}

/// Pixel-level denoising: `recon_loss(x, G(noisy x))` with the identity as
/// target transform. `student` must hold `encoder.*`, `lora.pixel.*` and
/// `denoise.*`. The last tenth of the corpus is held out for PSNR.
pub fn pretrain_pixel(student: &mut ParamStore, enc: &EncoderConfig, corpus: &[Raster<f32>], cfg: &PretextConfig, seed: u64) -> Result<PretextOutcome> {
    cfg.validate()?;
    check_corpus(corpus, enc.image_size)?;
    if cfg.noise_sigma == 0.0 {
        log::warn!("noise_sigma = 0: the denoising target equals its input");
    }
    let held = (corpus.len() / 10).clamp(1, 16).min(corpus.len().saturating_sub(1));
    let (train, holdout) = if held == 0 { (corpus, corpus) } else { corpus.split_at(corpus.len() - held) };
    set_stage1_trainables(student, Level::Pixel)?;
    let (dtype, device) = (student.dtype(), student.device().clone());
    let mut out = PretextOutcome {
        psnr_before: Some(denoise_psnr(&DenoiseModel::load(student, enc)?, holdout, cfg.noise_sigma, seed, dtype, &device)?),
        ..Default::default()
    };
    let mut opt = Optimizer::new(student.trainable_vars(), &cfg.optimizer_config())?;
    let per_epoch = schedule_steps(train.len(), cfg.batch_size, 1);
    let total = per_epoch * cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs.min(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), seed, "denoise", epoch);
        for idx in batches(&order, cfg.batch_size, 1) {
            opt.set_learning_rate(warmup_cosine(out.steps, warmup, total, cfg.effective_lr()));
            let model = DenoiseModel::load(student, enc)?;
            let mut clean = Vec::with_capacity(idx.len());
            let mut noisy = Vec::with_capacity(idx.len());
            for &i in &idx {
                let (c, n) = denoise_pair(&train[i], cfg.noise_sigma, seed, (out.steps * cfg.batch_size) as u64 * 1_000_003 + i as u64)?;
                clean.push(c);
                noisy.push(n);
            }
            let y = model.forward(&tensor_batch(&noisy, dtype, &device)?)?;
            let loss = recon_loss(&tensor_batch(&clean, dtype, &device)?, &y)?;
            out.losses.push(scalar_f64(&loss)?);
            opt.backward_step(&loss)?;
            out.steps += 1;
        }
    }
    out.psnr_after = Some(denoise_psnr(&DenoiseModel::load(student, enc)?, holdout, cfg.noise_sigma, seed, dtype, &device)?);
    student.freeze_all()?;
    Ok(out)
}
