//! End-to-end pipeline with a hash-keyed artifact cache, ablation harness and
//! attention heatmap export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, load_into, read_meta, save_checkpoint, CheckpointMeta};
use crate::config::{section_hash, ExperimentConfig, PretrainMode};
use crate::data::{
    generate_synthetic, load_corpus, DatasetSplits, load_dataset, preprocess, preprocess_sample, resize_bilinear, split_by_case,
    split_fewshot, stack_images, Raster, SegSample,
};
use crate::error::{Result, SamoraError};
use crate::finetune::{ensure_experts, finetune, predict_masks, FinetuneConfig, FinetuneReport};
use crate::fusion::{FusionOrder, FusionStrategy, StrategyKind};
use crate::metrics::{evaluate_groups, group_volumes, pooled_mean_dice, MetricsReport};
use crate::model::{inject_lora, lora_prefix, FrozenEncoder, Level, Projector};
use crate::params::ParamStore;
use crate::segmenter::{init_stage2_params, AssemblySpec, SamoraModel};
use crate::ssl::{cpt_teacher, distill_level, pretrain_pixel, DenoiseModel, PretextOutcome, TeacherModel};

pub const CACHE_ENV: &str = "SAMORA_CACHE_DIR";

/// `SAMORA_CACHE_DIR` if set, otherwise `<output_dir>/cache`.
pub fn cache_root(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(&cfg.output_dir).join("cache"))
}

fn key_of(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn stage_dir(root: &Path, stage: &str, key: &str) -> PathBuf {
    root.join(format!("{stage}-{}", &key[..16]))
}

/// One executed or cached pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRun {
    pub stage: String,
    pub key: String,
    pub dir: Option<PathBuf>,
    pub cache_hit: bool,
    /// Optimizer steps taken (0 on a cache hit).
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub seed: u64,
    pub runs: Vec<StageRun>,
    pub report: MetricsReport,
    pub stage2_dir: PathBuf,
    pub compose_coeffs: Option<[f64; 3]>,
}

impl PipelineOutput {
    pub fn training_steps(&self) -> usize {
        self.runs.iter().map(|r| r.steps).sum()
    }

    pub fn run(&self, stage: &str) -> Option<&StageRun> {
        self.runs.iter().find(|r| r.stage == stage)
    }
}

/// Preprocessed labeled splits and the raw unlabeled corpus.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub fewshot: Vec<SegSample>,
    pub train: Vec<SegSample>,
    pub test: Vec<SegSample>,
    pub corpus: Vec<Raster<f32>>,
    pub key: String,
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let size = cfg.encoder.image_size;
    let key = key_of(&[
        "data",
        &section_hash(&cfg.data)?,
        &size.to_string(),
        &cfg.finetune.fewshot_fraction.to_string(),
        &seed.to_string(),
    ]);
    let (train_raw, test_raw, corpus_raw) = match &cfg.data.dataset_dir {
        Some(dir) => {
            let mut ds = load_dataset(Path::new(dir))?;
            let train = ds.splits.remove("train").unwrap_or_default();
            let test = ds.splits.remove("test").unwrap_or_default();
            let corpus = if ds.unlabeled.is_empty() {
                let m = Path::new(dir).join("unlabeled").join("manifest.txt");
                if m.exists() { load_corpus(&m)? } else { Vec::new() }
            } else {
                ds.unlabeled
            };
            (train, test, corpus)
        }
        None => {
            let syn = generate_synthetic(&cfg.data.synthetic, seed)?;
            let (train, test) = split_by_case(&syn.labeled, cfg.data.train_cases);
            (train, test, syn.unlabeled)
        }
    };
    if train_raw.is_empty() || test_raw.is_empty() {
        return Err(SamoraError::Data("both train and test splits must be non-empty".into()));
    }
    let pre = |v: &[SegSample]| v.iter().map(|s| preprocess_sample(s, size)).collect::<Result<Vec<_>>>();
    let train = pre(&train_raw)?;
    let test = pre(&test_raw)?;
    let (fewshot, _) = split_fewshot(&train, cfg.finetune.fewshot_fraction, seed)?;
    let corpus = corpus_raw
        .into_iter()
        .map(|r| if r.height == size && r.width == size { r } else { resize_bilinear(&r, size, size) })
        .collect();
    Ok(PreparedData { fewshot, train, test, corpus, key })
}

/// Synthetic dataset split by case into `train` / `test`, with the unlabeled
/// corpus, in the on-disk layout of [`save_dataset`](crate::data::save_dataset).
pub fn synthetic_splits(cfg: &ExperimentConfig, seed: u64) -> Result<DatasetSplits> {
    let syn = generate_synthetic(&cfg.data.synthetic, seed)?;
    let (train, test) = split_by_case(&syn.labeled, cfg.data.train_cases);
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), train);
    splits.insert("test".to_string(), test);
    Ok(DatasetSplits { splits, unlabeled: syn.unlabeled })
}

fn dtype_device() -> (DType, Device) {
    (DType::F32, Device::Cpu)
}

fn encoder_store(cfg: &ExperimentConfig, seed: u64) -> Result<ParamStore> {
    let (dtype, device) = dtype_device();
    let mut store = ParamStore::new(dtype, &device);
    FrozenEncoder::init_params(&mut store, &cfg.encoder, seed)?;
    Ok(store)
}

/// A cached checkpoint is usable when its manifest parses and records the
/// expected key; anything else is rebuilt with a warning.
fn cached(dir: &Path, key: &str) -> bool {
    if !dir.join(crate::checkpoint::MANIFEST).exists() {
        return false;
    }
    match read_meta(dir) {
        Ok(m) if m.config_hash == key => true,
        Ok(m) => {
            log::warn!("{}: stale cache (hash {} != {}), re-running", dir.display(), m.config_hash, key);
            false
        }
        Err(e) => {
            log::warn!("{}: unreadable cache ({e}), re-running", dir.display());
            false
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SamoraError::io(path, e))
}

fn write_losses(dir: &Path, losses: &[f64]) -> Result<()> {
    let text: String = losses.iter().enumerate().map(|(i, l)| format!("step={} loss={l:.6}\n", i + 1)).collect();
    write_text(&dir.join("losses.txt"), &text)
}

fn teacher_key(cfg: &ExperimentConfig, level: Level, cpt: bool, data_key: &str, seed: u64) -> Result<String> {
    Ok(key_of(&[
        "teacher",
        level.name(),
        &section_hash(&cfg.encoder)?,
        &section_hash(&cfg.teacher)?,
        &section_hash(cfg.pretext.get(level))?,
        &cpt.to_string(),
        data_key,
        &seed.to_string(),
    ]))
}

/// Randomly initialised teacher, continually pretrained on `corpus` when
/// `cpt` is set. Returned frozen.
pub fn train_teacher(cfg: &ExperimentConfig, level: Level, cpt: bool, corpus: &[Raster<f32>], seed: u64) -> Result<TeacherModel> {
    let (dtype, device) = dtype_device();
    let mut teacher = TeacherModel::init(level, &cfg.teacher, &cfg.encoder, dtype, &device, seed)?;
    if cpt {
        let clock = std::time::Instant::now();
        teacher = cpt_teacher(teacher, corpus, cfg.pretext.get(level), seed)?;
        log::info!("teacher-{level}: {} steps in {:.1}s", teacher.loss_curve.len(), clock.elapsed().as_secs_f64());
    } else {
        teacher.freeze()?;
    }
    Ok(teacher)
}

pub fn save_teacher(dir: &Path, teacher: &TeacherModel, key: &str, seed: u64) -> Result<()> {
    save_checkpoint(dir, &teacher.store, &CheckpointMeta::new(format!("teacher-{}", teacher.level), key, seed), |_| true)?;
    write_losses(dir, &teacher.loss_curve)
}

/// Teacher architecture from `cfg` with weights from a saved directory.
pub fn load_teacher(cfg: &ExperimentConfig, level: Level, dir: &Path) -> Result<TeacherModel> {
    let (dtype, device) = dtype_device();
    let mut teacher = TeacherModel::init(level, &cfg.teacher, &cfg.encoder, dtype, &device, 0)?;
    let (store, _) = load_checkpoint(dir, dtype, &device)?;
    for name in teacher.store.names() {
        if !store.contains(&name) {
            return Err(SamoraError::Checkpoint { tensor: name.to_string(), reason: format!("missing from {}", dir.display()) });
        }
    }
    teacher.store = store;
    teacher.freeze()?;
    Ok(teacher)
}

fn obtain_teacher(cfg: &ExperimentConfig, level: Level, cpt: bool, data: &PreparedData, seed: u64, root: &Path, runs: &mut Vec<StageRun>) -> Result<(TeacherModel, String)> {
    let key = teacher_key(cfg, level, cpt, &data.key, seed)?;
    let stage = format!("teacher-{level}{}", if cpt { "-cpt" } else { "" });
    if !cpt {
        runs.push(StageRun { stage, key: key.clone(), dir: None, cache_hit: false, steps: 0 });
        return Ok((train_teacher(cfg, level, false, &data.corpus, seed)?, key));
    }
    let dir = stage_dir(root, &stage, &key);
    if cached(&dir, &key) {
        runs.push(StageRun { stage, key: key.clone(), dir: Some(dir.clone()), cache_hit: true, steps: 0 });
        return Ok((load_teacher(cfg, level, &dir)?, key));
    }
    let t = train_teacher(cfg, level, true, &data.corpus, seed)?;
    save_teacher(&dir, &t, &key, seed)?;
    runs.push(StageRun { stage, key: key.clone(), dir: Some(dir), cache_hit: false, steps: t.loss_curve.len() });
    Ok((t, key))
}

/// Stage-1 training of the level-`level` adapters: distillation from
/// `teacher` for image/patch, denoising for pixel (no teacher).
pub fn train_adapters(cfg: &ExperimentConfig, level: Level, teacher: Option<&TeacherModel>, corpus: &[Raster<f32>], seed: u64) -> Result<(ParamStore, PretextOutcome)> {
    let clock = std::time::Instant::now();
    let mut store = encoder_store(cfg, seed)?;
    inject_lora(&mut store, &cfg.encoder, level, cfg.lora.rank, seed)?;
    let pcfg = cfg.pretext.get(level);
    let outcome = match (level, teacher) {
        (Level::Pixel, _) => {
            DenoiseModel::init_params(&mut store, &cfg.encoder, seed)?;
            pretrain_pixel(&mut store, &cfg.encoder, corpus, pcfg, seed)?
        }
        (_, Some(teacher)) => {
            Projector::init_params(&mut store, level, teacher.feature_dim(), cfg.encoder.dim, seed)?;
            distill_level(level, teacher, &mut store, &cfg.encoder, corpus, pcfg, seed)?
        }
        (_, None) => return Err(SamoraError::config(format!("{level}-level adapters need a teacher"))),
    };
    log::info!("stage1-{level}: {} steps in {:.1}s", outcome.steps, clock.elapsed().as_secs_f64());
    Ok((store, outcome))
}

/// Saves only the level's adapters; projector and denoise decoder are
/// stage-1 scaffolding.
pub fn save_adapters(dir: &Path, store: &ParamStore, level: Level, outcome: &PretextOutcome, key: &str, seed: u64) -> Result<()> {
    let prefix = format!("{}.", lora_prefix(level));
    save_checkpoint(dir, store, &CheckpointMeta::new(format!("stage1-{level}"), key, seed), |n| n.starts_with(&prefix))?;
    write_losses(dir, &outcome.losses)?;
    if let (Some(a), Some(b)) = (outcome.psnr_before, outcome.psnr_after) {
        write_text(&dir.join("psnr.txt"), &format!("before={a:.4}\nafter={b:.4}\n"))?;
    }
    Ok(())
}

/// Stage-1 adapters for `level` under `mode`; `None` for scratch.
fn obtain_adapters(cfg: &ExperimentConfig, level: Level, mode: PretrainMode, data: &PreparedData, seed: u64, root: &Path, runs: &mut Vec<StageRun>) -> Result<Option<(PathBuf, String)>> {
    let stage = format!("stage1-{level}");
    if mode == PretrainMode::Scratch {
        let key = key_of(&["scratch", level.name(), &seed.to_string()]);
        runs.push(StageRun { stage, key, dir: None, cache_hit: false, steps: 0 });
        return Ok(None);
    }
    let cpt = mode == PretrainMode::TsCpt;
    let upstream = match level {
        Level::Pixel => "denoise".to_string(),
        _ => teacher_key(cfg, level, cpt, &data.key, seed)?,
    };
    let key = key_of(&[
        "stage1",
        level.name(),
        &section_hash(&cfg.encoder)?,
        &cfg.lora.rank.to_string(),
        &section_hash(cfg.pretext.get(level))?,
        &upstream,
        &data.key,
        &seed.to_string(),
    ]);
    let dir = stage_dir(root, &stage, &key);
    if cached(&dir, &key) {
        runs.push(StageRun { stage, key: key.clone(), dir: Some(dir.clone()), cache_hit: true, steps: 0 });
        return Ok(Some((dir, key)));
    }
    let teacher = match level {
        Level::Pixel => None,
        _ => Some(obtain_teacher(cfg, level, cpt, data, seed, root, runs)?.0),
    };
    let (store, outcome) = train_adapters(cfg, level, teacher.as_ref(), &data.corpus, seed)?;
    save_adapters(&dir, &store, level, &outcome, &key, seed)?;
    runs.push(StageRun { stage, key: key.clone(), dir: Some(dir.clone()), cache_hit: false, steps: outcome.steps });
    Ok(Some((dir, key)))
}

const ASSEMBLY_FILE: &str = "assembly.toml";

/// Everything needed to rebuild the trained model from its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssemblyRecord {
    config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    compose_coeffs: Option<[f64; 3]>,
}

fn read_assembly(dir: &Path) -> Result<AssemblyRecord> {
    let p = dir.join(ASSEMBLY_FILE);
    let text = fs::read_to_string(&p).map_err(|e| SamoraError::io(&p, e))?;
    toml::from_str(&text).map_err(|e| SamoraError::config(format!("{}: {e}", p.display())))
}

fn spec_with(cfg: &ExperimentConfig, coeffs: Option<[f64; 3]>) -> AssemblySpec {
    let mut spec = cfg.assembly_spec();
    if let (Some(c), FusionStrategy::WeightCompose(_)) = (coeffs, &spec.strategy) {
        spec.strategy = FusionStrategy::WeightCompose(c);
    }
    spec
}

/// Load a trained stage-2 model directory.
pub fn load_trained_model(dir: &Path) -> Result<(SamoraModel, ExperimentConfig)> {
    let rec = read_assembly(dir)?;
    let (dtype, device) = dtype_device();
    let (store, _) = load_checkpoint(dir, dtype, &device)?;
    let model = SamoraModel::load(&store, &spec_with(&rec.config, rec.compose_coeffs))?;
    Ok((model, rec.config))
}

/// Gradient-free coordinate descent over the composition coefficients,
/// scored by pooled Dice on the labeled few-shot slices. The decoder in
/// `store` stays fixed during the search.
pub fn search_compose_coeffs(store: &ParamStore, cfg: &ExperimentConfig, fewshot: &[SegSample], start: [f64; 3]) -> Result<[f64; 3]> {
    let num_classes = cfg.data.synthetic.num_classes;
    let gts: Vec<Raster<u8>> = fewshot.iter().map(|s| s.mask.clone()).collect();
    let score = |c: [f64; 3]| -> Result<f64> {
        let model = SamoraModel::load(store, &spec_with(cfg, Some(c)))?;
        let preds = predict_masks(&model, fewshot, cfg.eval.batch_size)?;
        pooled_mean_dice(&preds, &gts, num_classes)
    };
    let n = cfg.fusion.compose_grid;
    let r = cfg.fusion.compose_range;
    let grid: Vec<f64> = (0..n).map(|i| -r + 2.0 * r * i as f64 / (n - 1) as f64).collect();
    let mut coeffs = start;
    let mut best = score(coeffs)?;
    for _ in 0..cfg.fusion.compose_rounds {
        let mut improved = false;
        for i in 0..3 {
            for &v in &grid {
                let mut c = coeffs;
                c[i] = v;
                let s = score(c)?;
                if s > best + 1e-12 {
                    best = s;
                    coeffs = c;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(coeffs)
}

/// Result of a stage-2 run, before it is written to disk.
pub struct Stage2Outcome {
    pub store: ParamStore,
    pub config: ExperimentConfig,
    pub compose_coeffs: Option<[f64; 3]>,
    pub report: FinetuneReport,
}

/// Assemble the encoder with the stage-1 adapters in `adapter_dirs`, then
/// fine-tune fusion and decoder on the few-shot split. Levels without a
/// directory get zero-initialised adapters when the config allows it.
pub fn train_stage2(cfg: &ExperimentConfig, adapter_dirs: &[PathBuf], fewshot: &[SegSample], seed: u64) -> Result<Stage2Outcome> {
    let clock = std::time::Instant::now();
    let mut config = cfg.clone();
    config.finetune.allow_scratch_adapters |= cfg.lora.pretrain_mode == PretrainMode::Scratch;
    let mut store = encoder_store(cfg, seed)?;
    for d in adapter_dirs {
        load_into(&mut store, d)?;
    }
    let compose = cfg.fusion.strategy == StrategyKind::Compose && cfg.fusion.levels.len() == 3;
    let start = [1.0 / 3.0; 3];
    let spec = spec_with(&config, compose.then_some(start));
    ensure_experts(&mut store, &spec, config.finetune.allow_scratch_adapters, seed)?;
    init_stage2_params(&mut store, &spec, seed)?;
    let mut report = finetune(&mut store, &spec, fewshot, &config.finetune, &cfg.data.augment, seed)?;
    report.config_hash = config.hash()?;
    let compose_coeffs = if compose {
        Some(search_compose_coeffs(&store, &config, fewshot, start)?)
    } else {
        None
    };
    log::info!("stage2: {} steps in {:.1}s", report.steps.len(), clock.elapsed().as_secs_f64());
    Ok(Stage2Outcome { store, config, compose_coeffs, report })
}

pub fn save_stage2(dir: &Path, out: &Stage2Outcome, key: &str, seed: u64) -> Result<()> {
    save_checkpoint(dir, &out.store, &CheckpointMeta::new("stage2", key, seed), |_| true)?;
    let rec = AssemblyRecord { config: out.config.clone(), compose_coeffs: out.compose_coeffs };
    let text = toml::to_string(&rec).map_err(|e| SamoraError::config(e.to_string()))?;
    write_text(&dir.join(ASSEMBLY_FILE), &text)?;
    out.report.write(&dir.join("train_report.txt"))
}

fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| SamoraError::io(path, e))?;
    toml::from_str(&text).map_err(|e| SamoraError::config(e.to_string()))
}

/// Evaluate a trained model on the test volumes.
pub fn evaluate_model(model: &SamoraModel, test: &[SegSample], cfg: &ExperimentConfig, seed: u64) -> Result<MetricsReport> {
    let preds = predict_masks(model, test, cfg.eval.batch_size)?;
    let groups = group_volumes(test, &preds)?;
    let mut report = evaluate_groups(&groups, model.spec.num_classes, cfg.eval.hd_mode)?;
    report.seed = seed;
    report.config_hash = cfg.hash()?;
    Ok(report)
}

/// Writes `report.csv`, `report.toml` and `provenance.txt` into `dir` via a
/// temporary sibling directory and an atomic rename.
pub fn save_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| SamoraError::io(parent, e))?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("report");
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| SamoraError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| SamoraError::io(&tmp, e))?;
    report.write_csv(&tmp.join("report.csv"))?;
    let text = toml::to_string(report).map_err(|e| SamoraError::config(e.to_string()))?;
    write_text(&tmp.join("report.toml"), &text)?;
    write_text(
        &tmp.join("provenance.txt"),
        &format!(
            "config_hash = {}\nseed = {}\nversion = {}\n",
            report.config_hash,
            report.seed,
            crate::checkpoint::version_string()
        ),
    )?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| SamoraError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| SamoraError::io(dir, e))
}

/// Teacher CPT → stage-1 adapters → fine-tune → evaluate for one seed, each
/// stage cached under `root` by a hash of everything it depends on.
pub fn run_pipeline_seed(cfg: &ExperimentConfig, seed: u64, root: &Path) -> Result<PipelineOutput> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| SamoraError::io(root, e))?;
    let data = prepare_data(cfg, seed)?;
    let mut runs = Vec::new();
    let spec = cfg.assembly_spec();
    let mut upstream = Vec::new();
    let mut adapter_dirs = Vec::new();
    for &level in &spec.levels {
        match obtain_adapters(cfg, level, cfg.lora.pretrain_mode, &data, seed, root, &mut runs)? {
            Some((dir, key)) => {
                upstream.push(key);
                adapter_dirs.push(dir);
            }
            None => upstream.push(format!("scratch-{level}")),
        }
    }
    let key = key_of(&[
        "stage2",
        &upstream.join(","),
        &section_hash(&cfg.encoder)?,
        &section_hash(&cfg.fusion)?,
        &section_hash(&cfg.finetune)?,
        &section_hash(&cfg.data.augment)?,
        &cfg.lora.rank.to_string(),
        &data.key,
        &seed.to_string(),
    ]);
    let s2dir = stage_dir(root, "stage2", &key);
    let s2_hit = cached(&s2dir, &key);
    let compose_coeffs = if s2_hit {
        runs.push(StageRun { stage: "stage2".into(), key: key.clone(), dir: Some(s2dir.clone()), cache_hit: true, steps: 0 });
        read_assembly(&s2dir)?.compose_coeffs
    } else {
        let out = train_stage2(cfg, &adapter_dirs, &data.fewshot, seed)?;
        save_stage2(&s2dir, &out, &key, seed)?;
        let steps = out.report.steps.len();
        runs.push(StageRun { stage: "stage2".into(), key: key.clone(), dir: Some(s2dir.clone()), cache_hit: false, steps });
        out.compose_coeffs
    };
    let ekey = key_of(&["eval", &key, &section_hash(&cfg.eval)?]);
    let edir = stage_dir(root, "eval", &ekey);
    let report_file = edir.join("report.toml");
    let report = match (s2_hit && report_file.exists()).then(|| read_report(&report_file)) {
        Some(Ok(r)) => {
            runs.push(StageRun { stage: "eval".into(), key: ekey, dir: Some(edir), cache_hit: true, steps: 0 });
            r
        }
        other => {
            if let Some(Err(e)) = other {
                log::warn!("{}: unreadable report ({e}), re-evaluating", edir.display());
            }
            let (model, _) = load_trained_model(&s2dir)?;
            let report = evaluate_model(&model, &data.test, cfg, seed)?;
            save_report(&edir, &report)?;
            runs.push(StageRun { stage: "eval".into(), key: ekey, dir: Some(edir), cache_hit: false, steps: 0 });
            report
        }
    };
    Ok(PipelineOutput {
        seed,
        runs,
        report,
        stage2_dir: s2dir,
        compose_coeffs,
    })
}

/// Run the pipeline for every configured seed under the cache root.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<PipelineOutput>> {
    let root = cache_root(cfg);
    cfg.seeds.iter().map(|&s| run_pipeline_seed(cfg, s, &root)).collect()
}

// --- ablations -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationAxis {
    FusionStrategy,
    FusionOrder,
    Rank,
    PretrainMode,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::FusionStrategy => "fusion_strategy",
            AblationAxis::FusionOrder => "fusion_order",
            AblationAxis::Rank => "rank",
            AblationAxis::PretrainMode => "pretrain_mode",
        }
    }

    /// Values of the corresponding paper tables.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::FusionStrategy => &["hl_attn", "lac", "gated", "compose"],
            AblationAxis::FusionOrder => &["211", "112", "121"],
            AblationAxis::Rank => &["1", "4", "16"],
            AblationAxis::PretrainMode => &["scratch", "ts_no_cpt", "ts_cpt"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for AblationAxis {
    type Err = SamoraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion_strategy" | "strategy" => Ok(AblationAxis::FusionStrategy),
            "fusion_order" | "order" => Ok(AblationAxis::FusionOrder),
            "rank" => Ok(AblationAxis::Rank),
            "pretrain_mode" | "mode" => Ok(AblationAxis::PretrainMode),
            _ => Err(SamoraError::config(format!("unknown ablation axis `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationMatrix {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    /// Levels for the pretrain-mode axis; each is ablated as a single-expert
    /// model. Ignored by the other axes.
    pub levels: Vec<Level>,
}

impl AblationMatrix {
    pub fn new(axis: AblationAxis, seeds: Vec<u64>) -> Self {
        Self {
            axis,
            values: axis.default_values(),
            seeds,
            levels: Level::ALL.to_vec(),
        }
    }

    /// Configurations `(label, config)` of every cell, before seeds.
    pub fn cells(&self, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
        let mut out = Vec::new();
        for v in &self.values {
            match self.axis {
                AblationAxis::FusionStrategy => {
                    let mut c = base.clone();
                    c.fusion.strategy = v.parse()?;
                    c.fusion.levels = Level::ALL.to_vec();
                    out.push((v.clone(), c));
                }
                AblationAxis::FusionOrder => {
                    let mut c = base.clone();
                    c.fusion.strategy = StrategyKind::HlAttn;
                    c.fusion.order = FusionOrder::from_str(v)?;
                    c.fusion.levels = Level::ALL.to_vec();
                    out.push((v.clone(), c));
                }
                AblationAxis::Rank => {
                    let mut c = base.clone();
                    c.lora.rank = v.parse().map_err(|_| SamoraError::config(format!("bad rank `{v}`")))?;
                    out.push((v.clone(), c));
                }
                AblationAxis::PretrainMode => {
                    let mode: PretrainMode = v.parse()?;
                    for &l in &self.levels {
                        let mut c = base.clone();
                        c.lora.pretrain_mode = mode;
                        c.fusion.levels = vec![l];
                        out.push((format!("{l}:{mode}"), c));
                    }
                }
            }
        }
        for (_, c) in &out {
            c.validate()?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub mean_dice: f64,
    pub mean_hd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub axis: String,
    pub value: String,
    pub n: usize,
    pub mean_dice_mean: f64,
    pub mean_dice_std: f64,
    pub mean_hd_mean: f64,
    pub mean_hd_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    } else {
        0.0
    };
    (m, var.sqrt())
}

impl AblationTable {
    /// Per-value mean and sample standard deviation over seeds, in first-seen
    /// value order.
    pub fn summary(&self) -> Vec<AblationSummary> {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String), Vec<&AblationRow>> = BTreeMap::new();
        for r in &self.rows {
            let k = (r.axis.clone(), r.value.clone());
            if !groups.contains_key(&k) {
                order.push(k.clone());
            }
            groups.entry(k).or_default().push(r);
        }
        order
            .into_iter()
            .map(|k| {
                let rows = &groups[&k];
                let (dm, ds) = mean_std(&rows.iter().map(|r| r.mean_dice).collect::<Vec<_>>());
                let (hm, hs) = mean_std(&rows.iter().map(|r| r.mean_hd).collect::<Vec<_>>());
                AblationSummary {
                    axis: k.0,
                    value: k.1,
                    n: rows.len(),
                    mean_dice_mean: dm,
                    mean_dice_std: ds,
                    mean_hd_mean: hm,
                    mean_hd_std: hs,
                }
            })
            .collect()
    }

    pub fn mean_dice(&self, value: &str) -> Option<f64> {
        self.summary().into_iter().find(|s| s.value == value).map(|s| s.mean_dice_mean)
    }

    /// Header `axis,value,seed,mean_dice,mean_hd`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| SamoraError::io(path, e))
    }

    /// Header `axis,value,n,mean_dice_mean,mean_dice_std,mean_hd_mean,mean_hd_std`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.summary() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| SamoraError::io(path, e))
    }
}

/// One pipeline run per (cell, seed). Cells share cached upstream stages
/// but never in-memory state.
pub fn run_ablation(matrix: &AblationMatrix, base: &ExperimentConfig, root: &Path) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for (label, cfg) in matrix.cells(base)? {
        for &seed in &matrix.seeds {
            let out = run_pipeline_seed(&cfg, seed, root)?;
            log::info!("{} {label} seed {seed}: {}", matrix.axis.name(), out.report.summary());
            table.rows.push(AblationRow {
                axis: matrix.axis.name().into(),
                value: label.clone(),
                seed,
                mean_dice: out.report.mean_dice,
                mean_hd: out.report.mean_hd,
            });
        }
    }
    Ok(table)
}

// --- heatmaps ----------------------------------------------------------------

pub const HEATMAP_FILES: [&str; 5] = [
    "expert_image.png",
    "expert_patch.png",
    "expert_pixel.png",
    "hl_attn_fused.png",
    "segmentation.png",
];

#[derive(Debug, Clone)]
pub struct HeatmapSet {
    /// `(name, grid x grid attention mass)` summing to 1 per map.
    pub maps: Vec<(String, Vec<f64>)>,
    pub grid: usize,
    pub files: Vec<PathBuf>,
}

/// Attention mass per key token: weights `[1, h, Lq, Lk]` averaged over heads
/// and queries.
fn attention_mass(w: &candle_core::Tensor) -> Result<Vec<f64>> {
    let m = w.to_dtype(DType::F64)?.mean(1)?.mean(1)?.squeeze(0)?;
    Ok(m.to_vec1::<f64>()?)
}

/// Min-max normalisation to [0, 1]; constant maps become zeros.
pub fn normalize_unit(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Piecewise-linear blue-cyan-yellow-red colormap.
fn colormap(t: f64) -> [f64; 3] {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.3, 1.0]),
        (0.5, [0.0, 1.0, 1.0]),
        (0.75, [1.0, 1.0, 0.0]),
        (1.0, [1.0, 0.0, 0.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    for w in STOPS.windows(2) {
        let ((t0, c0), (t1, c1)) = (w[0], w[1]);
        if t <= t1 {
            let a = (t - t0) / (t1 - t0);
            return [0, 1, 2].map(|i| c0[i] + a * (c1[i] - c0[i]));
        }
    }
    STOPS[4].1
}

const CLASS_COLORS: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.10],
    [0.15, 0.35, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.35, 0.15],
];

fn save_rgb(path: &Path, w: usize, h: usize, pixels: &[[f64; 3]]) -> Result<()> {
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (i, p) in pixels.iter().enumerate() {
        let c = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        buf.put_pixel((i % w) as u32, (i / w) as u32, image::Rgb(c));
    }
    buf.save(path)?;
    Ok(())
}

/// Per-level expert attention, the fused attention map and the segmentation
/// overlaid on `sample` (a preprocessed slice), written as PNGs to `out`.
/// Strategies without a fused attention use the mean of the expert maps.
pub fn export_heatmap(model: &SamoraModel, sample: &SegSample, out: &Path) -> Result<HeatmapSet> {
    let size = model.spec.encoder.image_size;
    if sample.image.height != size || sample.image.width != size {
        return Err(SamoraError::dim(format!(
            "sample is {}x{}, model expects {size}x{size}",
            sample.image.height, sample.image.width
        )));
    }
    fs::create_dir_all(out).map_err(|e| SamoraError::io(out, e))?;
    let dtype = model.encoder.pos_embed.dtype();
    let device = model.encoder.pos_embed.device().clone();
    let x = stack_images(&[&sample.image], dtype, &device)?;
    let trace = model.trace(&x)?;
    let grid = model.spec.encoder.grid();
    let mut maps: Vec<(String, Vec<f64>)> = Vec::new();
    for (level, w) in &trace.expert_attention {
        maps.push((format!("expert_{level}"), attention_mass(w)?));
    }
    let fused = match &trace.fused_attention {
        Some(w) => attention_mass(w)?,
        None => {
            let n = maps.len() as f64;
            (0..grid * grid).map(|i| maps.iter().map(|m| m.1[i]).sum::<f64>() / n).collect()
        }
    };
    maps.push(("hl_attn_fused".into(), fused));

    let base = normalize_unit(&sample.image.data.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let patch = size / grid;
    let mut files = Vec::new();
    for (name, mass) in &maps {
        let norm = normalize_unit(mass);
        let px: Vec<[f64; 3]> = (0..size * size)
            .map(|i| {
                let (y, xx) = (i / size, i % size);
                let c = colormap(norm[(y / patch) * grid + xx / patch]);
                [0, 1, 2].map(|k| 0.5 * base[i] + 0.5 * c[k])
            })
            .collect();
        let path = out.join(format!("{name}.png"));
        save_rgb(&path, size, size, &px)?;
        files.push(path);
    }
    let labels = trace.logits.argmax(1)?.to_dtype(DType::U32)?.flatten_all()?.to_vec1::<u32>()?;
    let px: Vec<[f64; 3]> = (0..size * size)
        .map(|i| match labels[i] {
            0 => [base[i]; 3],
            c => {
                let col = CLASS_COLORS[(c as usize - 1) % CLASS_COLORS.len()];
                [0, 1, 2].map(|k| 0.45 * base[i] + 0.55 * col[k])
            }
        })
        .collect();
    let path = out.join("segmentation.png");
    save_rgb(&path, size, size, &px)?;
    files.push(path);
    Ok(HeatmapSet { maps, grid, files })
}

/// Preprocess a raw slice for a model of the given size.
pub fn prepare_slice(image: &Raster<f32>, size: usize) -> Result<SegSample> {
    preprocess(image, None, size, 0, 0)
}

/// Fine-tuning configuration used for a stage-2 directory, if recorded.
pub fn recorded_finetune(dir: &Path) -> Option<FinetuneConfig> {
    let text = fs::read_to_string(dir.join(ASSEMBLY_FILE)).ok()?;
    let rec: AssemblyRecord = toml::from_str(&text).ok()?;
    Some(rec.config.finetune)
}
