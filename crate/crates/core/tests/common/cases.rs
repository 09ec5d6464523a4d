//! Seeded oracle instances shared by the oracle tests and the acceptance
//! target. Each returns `(library, reference)` values.

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;
use samora_core::finetune::{combined_loss, combined_loss_parts, lr_at, FinetuneConfig};
use samora_core::fusion::{cross_attend, CrossAttnParams};
use samora_core::metrics::{dice, hausdorff, BinaryMask, HdMode};
use samora_core::model::{forward_expert_block, BlockAdapters, ExpertPath, LoraAdapter, LoraExpertSet};
use samora_core::nn::Linear;
use samora_core::ssl::recon_loss;

pub const INSTANCES: u64 = 100;

pub fn tolerance(dtype: DType) -> f64 {
    if dtype == DType::F64 {
        1e-9
    } else {
        1e-5
    }
}

/// Max abs error over `max(1, |want|)`; compare against [`tolerance`].
pub fn scaled_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    max_abs_diff(got, want) / scale
}

pub fn recon(dtype: DType, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let shape = [r.random_range(1..4), r.random_range(1..6), r.random_range(1..9)];
    let n: usize = shape.iter().product();
    let (a, b) = (uniform(&mut r, n, 2.0), uniform(&mut r, n, 2.0));
    // round-trip through the dtype so both sides see the same inputs
    let (ta, tb) = (tensor(&a, &shape, dtype), tensor(&b, &shape, dtype));
    (values(&recon_loss(&ta, &tb).unwrap()), vec![mse_ref(&values(&ta), &values(&tb))])
}

pub fn cross_attention(dtype: DType, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(2000 + seed);
    let heads = [1, 2][r.random_range(0..2)];
    let d = heads * r.random_range(2..4);
    let l = r.random_range(1..5);
    let p = RefCrossAttn::random(&mut r, d, heads, seed % 3 != 0);
    let q = uniform(&mut r, l * d, 1.0);
    let kv = uniform(&mut r, l * d, 1.0);
    let got = cross_attend(&p.to_params(dtype), &tensor(&q, &[l, d], dtype), &tensor(&kv, &[l, d], dtype)).unwrap();
    (values(&got), p.apply(&rows(&q, l, d), &rows(&kv, l, d)).concat())
}

pub fn random_logits(r: &mut ChaCha8Rng, b: usize, c: usize, p: usize, scale: f64) -> (Vec<Mat>, Vec<Vec<usize>>) {
    let logits: Vec<Mat> = (0..b).map(|_| rows(&uniform(r, c * p, scale), c, p)).collect();
    let labels: Vec<Vec<usize>> = (0..b).map(|_| (0..p).map(|_| r.random_range(0..c)).collect()).collect();
    (logits, labels)
}

pub fn loss_tensors(logits: &[Mat], labels: &[Vec<usize>], h: usize, w: usize, dtype: DType) -> (Tensor, Tensor) {
    let (b, c) = (logits.len(), logits[0].len());
    let flat: Vec<f64> = logits.iter().flat_map(|m| m.concat()).collect();
    let lab: Vec<u8> = labels.iter().flatten().map(|&v| v as u8).collect();
    (
        tensor(&flat, &[b, c, h, w], dtype),
        Tensor::from_vec(lab, (b, h, w), &candle_core::Device::Cpu).unwrap(),
    )
}

/// `[ce, dice, total]` for random logits, labels and weights.
pub fn combined(dtype: DType, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(5000 + seed);
    let (b, c, h, w) = (r.random_range(1..4), r.random_range(2..5), r.random_range(1..5), r.random_range(1..5));
    let (logits, labels) = random_logits(&mut r, b, c, h * w, 3.0);
    let (lt, yt) = loss_tensors(&logits, &labels, h, w, dtype);
    // oracle sees the same rounded logits
    let logits: Vec<Mat> = values(&lt).chunks(c * h * w).map(|m| rows(m, c, h * w)).collect();
    let lambda_ce = r.random_range(0.0..1.0);
    let cfg = FinetuneConfig { lambda_ce, lambda_dice: 1.0 - lambda_ce, ..FinetuneConfig::default() };
    let (ce, dl) = ce_dice_ref(&logits, &labels, cfg.dice_eps);
    let parts = combined_loss_parts(&lt, &yt, &cfg).unwrap();
    let got = [&parts.ce, &parts.dice, &parts.total].iter().map(|t| values(t)[0]).collect();
    (got, vec![ce, dl, cfg.lambda_ce * ce + cfg.lambda_dice * dl])
}

/// One schedule evaluation against the piecewise formula.
pub fn schedule(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(6000 + seed);
    let cfg = FinetuneConfig {
        base_lr: r.random_range(1e-4..1e-1),
        warmup_steps: r.random_range(1..500),
        max_iterations: r.random_range(1..5000),
        ..FinetuneConfig::default()
    };
    let t = r.random_range(0..cfg.warmup_steps + cfg.max_iterations + 100);
    let (i, wp, mi) = (cfg.base_lr, cfg.warmup_steps as f64, cfg.max_iterations as f64);
    let want = if (t as f64) <= wp { t as f64 * i / wp } else { (i * (1.0 - (t as f64 - wp) / mi)).max(0.0) };
    (vec![lr_at(&cfg, t)], vec![want])
}

/// Exact boundary values of the default schedule: `(t, lr_at, expected)`.
pub fn schedule_boundaries() -> Vec<(usize, f64, f64)> {
    let cfg = FinetuneConfig::default();
    [(0, 0.0), (125, 0.0025), (250, 0.005), (250 + 18_600, 0.0), (100_000, 0.0)]
        .into_iter()
        .map(|(t, want)| (t, lr_at(&cfg, t), want))
        .collect()
}

pub fn to_mask(v: &Vol) -> BinaryMask {
    BinaryMask::new(v.shape, v.data.clone()).unwrap()
}

/// `[dice, hausdorff]` of two random volumes.
pub fn overlap(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(7000 + seed);
    let shape = [r.random_range(1..4), r.random_range(1..7), r.random_range(1..7)];
    let p = r.random_range(0.0..0.7);
    let a = Vol::random(&mut r, shape, p);
    let b = Vol::random(&mut r, shape, p);
    let (ma, mb) = (to_mask(&a), to_mask(&b));
    (
        vec![dice(&ma, &mb).unwrap(), hausdorff(&ma, &mb, HdMode::Max).unwrap()],
        vec![dice_ref(&a, &b), hausdorff_ref(&a, &b)],
    )
}

// --- gradients -------------------------------------------------------------

pub const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-5;

pub struct Param {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Worst relative error between autodiff and central differences of `loss`
/// over `samples` random entries of every parameter.
pub fn grad_check<F>(params: &[Param], samples: usize, seed: u64, loss: F) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let vars: Vec<Var> = params.iter().map(|p| Var::from_tensor(&tensor(&p.values, &p.shape, DType::F64)).unwrap()).collect();
    let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = loss(&ts).backward().unwrap();
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let g = values(grads.get(vars[pi].as_tensor()).expect("parameter reached by the loss"));
        for _ in 0..samples {
            let i = r.random_range(0..p.values.len());
            let numeric = central_diff(
                |x| {
                    let ts: Vec<Tensor> = params
                        .iter()
                        .enumerate()
                        .map(|(k, q)| tensor(if k == pi { x } else { &q.values }, &q.shape, DType::F64))
                        .collect();
                    values(&loss(&ts))[0]
                },
                &p.values,
                i,
                GRAD_STEP,
            );
            worst = worst.max(rel_err(g[i], numeric));
        }
    }
    worst
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output entry matters.
fn weighted_sum(out: &Tensor, w: &Tensor) -> Tensor {
    (out * w).unwrap().sum_all().unwrap()
}

/// LoRA `A`/`B` gradients through one expert block on `path`.
pub fn lora_gradients(seed: u64, path: ExpertPath) -> f64 {
    let mut r = rng(100 + seed);
    let (d, m, rank, l) = (4, 6, 2, 3);
    let block = RefBlock::random(&mut r, d, m, 2).to_block(DType::F64);
    let x = tensor(&uniform(&mut r, l * d, 1.0), &[1, l, d], DType::F64);
    let w = tensor(&uniform(&mut r, l * d, 1.0), &[1, l, d], DType::F64);
    let mut params = Vec::new();
    for (i, o) in [(d, d), (d, d), (d, m), (m, d)] {
        params.push(Param { values: uniform(&mut r, rank * i, 0.7), shape: vec![rank, i] });
        params.push(Param { values: uniform(&mut r, o * rank, 0.7), shape: vec![o, rank] });
    }
    grad_check(&params, 6, seed, |t| {
        let ad = |k: usize| LoraAdapter { a: t[2 * k].clone(), b: t[2 * k + 1].clone() };
        let expert = LoraExpertSet {
            level: None,
            rank,
            blocks: vec![BlockAdapters { q: ad(0), v: ad(1), fc1: ad(2), fc2: ad(3) }],
        };
        weighted_sum(&forward_expert_block(&block, &expert, 0, &x, path).unwrap(), &w)
    })
}

/// Query, key, value and output projection gradients of cross-attention
/// with layer norm.
pub fn cross_attention_gradients(seed: u64) -> f64 {
    let mut r = rng(200 + seed);
    let (d, l, heads) = (4, 3, 2);
    let reference = RefCrossAttn::random(&mut r, d, heads, true);
    let base = reference.to_params(DType::F64);
    let q = tensor(&uniform(&mut r, l * d, 1.0), &[l, d], DType::F64);
    let kv = tensor(&uniform(&mut r, l * d, 1.0), &[l, d], DType::F64);
    let w = tensor(&uniform(&mut r, l * d, 1.0), &[l, d], DType::F64);
    let params: Vec<Param> = [&reference.q, &reference.k, &reference.v, &reference.out]
        .iter()
        .map(|lin| Param { values: lin.w.concat(), shape: vec![d, d] })
        .collect();
    grad_check(&params, 8, seed, |t| {
        let p = CrossAttnParams {
            q: Linear::new(t[0].clone(), base.q.bias.clone()),
            k: Linear::new(t[1].clone(), base.k.bias.clone()),
            v: Linear::new(t[2].clone(), base.v.bias.clone()),
            out: Linear::new(t[3].clone(), base.out.bias.clone()),
            norm: base.norm.clone(),
            heads,
        };
        weighted_sum(&cross_attend(&p, &q, &kv).unwrap(), &w)
    })
}

/// Gradient of the combined loss with respect to the logits.
pub fn combined_loss_gradients(seed: u64) -> f64 {
    let mut r = rng(300 + seed);
    let (b, c, h, w) = (2, 3, 3, 4);
    let labels: Vec<u8> = (0..b * h * w).map(|_| r.random_range(0..c as u8)).collect();
    let target = Tensor::from_vec(labels, (b, h, w), &candle_core::Device::Cpu).unwrap();
    let params = [Param { values: uniform(&mut r, b * c * h * w, 2.0), shape: vec![b, c, h, w] }];
    let cfg = FinetuneConfig::default();
    grad_check(&params, 20, seed, |t| combined_loss(&t[0], &target, &cfg).unwrap())
}
