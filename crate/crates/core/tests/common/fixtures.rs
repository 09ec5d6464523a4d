//! Parameter stores and data on the smoke preset.

use candle_core::{DType, Device, Tensor};

use super::{rng, uniform};
use samora_core::data::stack_images;
use samora_core::experiments::{prepare_data, train_teacher};
use samora_core::finetune::{ensure_experts, finetune};
use samora_core::model::{inject_lora, FrozenEncoder, Projector};
use samora_core::segmenter::init_stage2_params;
use samora_core::ssl::{distill_level, pretrain_pixel, DenoiseModel};
use samora_core::{AssemblySpec, ExperimentConfig, FusionOrder, FusionStrategy, Level, ParamStore, SamoraModel};

pub fn base_store(cfg: &ExperimentConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new(DType::F32, &Device::Cpu);
    FrozenEncoder::init_params(&mut s, &cfg.encoder, seed).unwrap();
    s
}

/// Encoder plus all three experts; `nonzero` fills every `B` with noise so
/// that both adapter factors receive gradient.
pub fn store_with_experts(cfg: &ExperimentConfig, seed: u64, nonzero: bool) -> ParamStore {
    let mut s = base_store(cfg, seed);
    for level in Level::ALL {
        inject_lora(&mut s, &cfg.encoder, level, cfg.lora.rank, seed).unwrap();
    }
    if nonzero {
        let mut r = rng(seed + 99);
        let names: Vec<String> = s.names().filter(|n| n.starts_with("lora.") && n.ends_with(".b")).map(str::to_string).collect();
        for n in names {
            let len = s.values(&n).unwrap().len();
            s.set_values(&n, &uniform(&mut r, len, 0.05)).unwrap();
        }
    }
    s
}

pub fn prefix(p: &str) -> impl Fn(&str) -> bool + '_ {
    move |n: &str| n.starts_with(p)
}

pub fn test_images(cfg: &ExperimentConfig, n: usize) -> Tensor {
    let data = prepare_data(cfg, 0).unwrap();
    let refs: Vec<_> = data.test.iter().take(n).map(|s| &s.image).collect();
    stack_images(&refs, DType::F32, &Device::Cpu).unwrap()
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap() as f64
}

pub const STAGE1_GROUPS: [&str; 6] = ["encoder.", "lora.image.", "lora.patch.", "lora.pixel.", "projector.", "denoise."];

/// Fingerprint of each stage-1 parameter group.
pub fn stage1_groups(store: &ParamStore) -> Vec<String> {
    STAGE1_GROUPS.iter().map(|p| store.fingerprint(prefix(p)).unwrap()).collect()
}

/// Groups whose fingerprint differs between `before` and `after`.
pub fn changed_groups(before: &[String], after: &[String]) -> Vec<&'static str> {
    STAGE1_GROUPS.iter().zip(before.iter().zip(after)).filter(|(_, (b, a))| a != b).map(|(p, _)| *p).collect()
}

/// Every fusion strategy over three zero-init experts, plus single-expert
/// HL-Attn at each level.
pub fn transparency_specs(cfg: &ExperimentConfig) -> Vec<(String, AssemblySpec)> {
    let strategies = [
        FusionStrategy::HlAttn(FusionOrder::O211),
        FusionStrategy::HlAttn(FusionOrder::O112),
        FusionStrategy::HlAttn(FusionOrder::O121),
        FusionStrategy::Lac([1.0 / 3.0; 3]),
        FusionStrategy::GatedMixture,
        FusionStrategy::WeightCompose([0.5, -0.25, 1.0]),
    ];
    let mut out = Vec::new();
    for s in strategies {
        let mut spec = AssemblySpec::new(cfg.encoder.clone(), s.clone(), 3);
        spec.rank = cfg.lora.rank;
        out.push((format!("{s:?}"), spec));
    }
    for level in Level::ALL {
        let mut spec = AssemblySpec::new(cfg.encoder.clone(), FusionStrategy::HlAttn(FusionOrder::O211), 3);
        spec.rank = cfg.lora.rank;
        spec.levels = vec![level];
        out.push((format!("single {level}"), spec));
    }
    out
}

/// Max abs difference between a freshly assembled model and frozen encoder
/// plus decoder on a few test slices.
pub fn transparency_gap(cfg: &ExperimentConfig, spec: &AssemblySpec, seed: u64) -> f64 {
    let x = test_images(cfg, 4);
    let mut store = base_store(cfg, seed);
    ensure_experts(&mut store, spec, true, seed).unwrap();
    init_stage2_params(&mut store, spec, seed).unwrap();
    let model = SamoraModel::load(&store, spec).unwrap();
    max_diff(&model.forward(&x).unwrap(), &model.forward_frozen_baseline(&x).unwrap())
}

pub struct Stage2Change {
    pub frozen_same: bool,
    pub fusion_changed: bool,
    pub decoder_changed: bool,
}

/// One fine-tuning epoch on a store with nonzero experts.
pub fn stage2_change(cfg: &ExperimentConfig, seed: u64) -> Stage2Change {
    let data = prepare_data(cfg, 0).unwrap();
    let spec = cfg.assembly_spec();
    let mut store = store_with_experts(cfg, seed, true);
    init_stage2_params(&mut store, &spec, seed).unwrap();
    let frozen = |n: &str| n.starts_with("encoder.") || n.starts_with("lora.");
    let before = (
        store.fingerprint(frozen).unwrap(),
        store.fingerprint(prefix("fusion.")).unwrap(),
        store.fingerprint(prefix("decoder.")).unwrap(),
    );
    let mut ft = cfg.finetune.clone();
    ft.epochs = 1;
    finetune(&mut store, &spec, &data.fewshot, &ft, &cfg.data.augment, seed).unwrap();
    Stage2Change {
        frozen_same: store.fingerprint(frozen).unwrap() == before.0,
        fusion_changed: store.fingerprint(prefix("fusion.")).unwrap() != before.1,
        decoder_changed: store.fingerprint(prefix("decoder.")).unwrap() != before.2,
    }
}

/// Parameter groups changed by stage-1 training of `level` on a store that
/// holds all three (nonzero) experts.
pub fn stage1_change(cfg: &ExperimentConfig, level: Level, seed: u64) -> Vec<&'static str> {
    let data = prepare_data(cfg, 0).unwrap();
    let mut store = store_with_experts(cfg, seed, true);
    let pcfg = cfg.pretext.get(level);
    match level {
        Level::Pixel => {
            DenoiseModel::init_params(&mut store, &cfg.encoder, seed).unwrap();
            let before = stage1_groups(&store);
            pretrain_pixel(&mut store, &cfg.encoder, &data.corpus, pcfg, seed).unwrap();
            changed_groups(&before, &stage1_groups(&store))
        }
        _ => {
            let teacher = train_teacher(cfg, level, false, &data.corpus, seed).unwrap();
            Projector::init_params(&mut store, level, teacher.feature_dim(), cfg.encoder.dim, seed).unwrap();
            let before = stage1_groups(&store);
            distill_level(level, &teacher, &mut store, &cfg.encoder, &data.corpus, pcfg, seed).unwrap();
            changed_groups(&before, &stage1_groups(&store))
        }
    }
}

/// Groups stage 1 at `level` may change.
pub fn stage1_allowed(level: Level) -> [&'static str; 2] {
    match level {
        Level::Image => ["lora.image.", "projector."],
        Level::Patch => ["lora.patch.", "projector."],
        Level::Pixel => ["lora.pixel.", "denoise."],
    }
}
