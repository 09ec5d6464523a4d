//! TOML experiment configuration. Unknown keys are rejected; the hash of the
//! canonical serialization identifies every artifact.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::data::SyntheticSpec;
use crate::error::{Result, SamoraError};
use crate::finetune::FinetuneConfig;
use crate::fusion::{FusionOrder, FusionStrategy, StrategyKind};
use crate::metrics::HdMode;
use crate::model::{EncoderConfig, Level};
use crate::segmenter::AssemblySpec;
use crate::ssl::{PretextConfig, TeacherConfig};

/// How a level's expert is obtained before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Fresh zero-delta adapters, no stage-1 training.
    Scratch,
    /// Distilled from a randomly initialised, frozen teacher (pixel level:
    /// denoising pretraining).
    TsNoCpt,
    /// Distilled from a continually pretrained teacher.
    #[default]
    TsCpt,
}

impl PretrainMode {
    pub const ALL: [PretrainMode; 3] = [PretrainMode::Scratch, PretrainMode::TsNoCpt, PretrainMode::TsCpt];

    pub fn name(self) -> &'static str {
        match self {
            PretrainMode::Scratch => "scratch",
            PretrainMode::TsNoCpt => "ts_no_cpt",
            PretrainMode::TsCpt => "ts_cpt",
        }
    }
}

impl fmt::Display for PretrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PretrainMode {
    type Err = SamoraError;

    fn from_str(s: &str) -> Result<Self> {
        PretrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SamoraError::config(format!("unknown pretrain mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub pretrain_mode: PretrainMode,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            pretrain_mode: PretrainMode::TsCpt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextSection {
    pub image: PretextConfig,
    pub patch: PretextConfig,
    pub pixel: PretextConfig,
}

impl Default for PretextSection {
    fn default() -> Self {
        Self {
            image: PretextConfig::image(),
            patch: PretextConfig::patch(),
            pixel: PretextConfig::pixel(),
        }
    }
}

impl PretextSection {
    pub fn get(&self, level: Level) -> &PretextConfig {
        match level {
            Level::Image => &self.image,
            Level::Patch => &self.patch,
            Level::Pixel => &self.pixel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: StrategyKind,
    pub order: FusionOrder,
    pub layer_norm: bool,
    /// Retained experts; one level or all three.
    pub levels: Vec<Level>,
    pub lac_weights: [f64; 3],
    pub lac_trainable: bool,
    pub compose_rounds: usize,
    pub compose_range: f64,
    /// Candidate values per coordinate and round.
    pub compose_grid: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::HlAttn,
            order: FusionOrder::O211,
            layer_norm: true,
            levels: Level::ALL.to_vec(),
            lac_weights: [1.0 / 3.0; 3],
            lac_trainable: false,
            compose_rounds: 20,
            compose_range: 1.5,
            compose_grid: 7,
        }
    }
}

impl FusionConfig {
    /// Strategy with initial coefficients (compose coefficients start at
    /// `1/3` and are refined by search).
    pub fn strategy(&self) -> FusionStrategy {
        match self.strategy {
            StrategyKind::HlAttn => FusionStrategy::HlAttn(self.order),
            StrategyKind::Lac => FusionStrategy::Lac(self.lac_weights),
            StrategyKind::Gated => FusionStrategy::GatedMixture,
            StrategyKind::Compose => FusionStrategy::WeightCompose([1.0 / 3.0; 3]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    /// Cases used for training; the remaining cases form the test set.
    pub train_cases: usize,
    /// On-disk dataset (`manifest.csv` layout) used instead of synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_dir: Option<String>,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            train_cases: 20,
            dataset_dir: None,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub hd_mode: HdMode,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            hd_mode: HdMode::Max,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub lora: LoraConfig,
    pub pretext: PretextSection,
    pub teacher: TeacherConfig,
    pub fusion: FusionConfig,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            lora: LoraConfig::default(),
            pretext: PretextSection::default(),
            teacher: TeacherConfig::default(),
            fusion: FusionConfig::default(),
            finetune: FinetuneConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0],
            output_dir: "samora-out".into(),
        }
    }
}

/// SHA-256 hex of a serializable section.
pub fn section_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = toml::to_string(value).map_err(|e| SamoraError::config(format!("serialize: {e}")))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

impl ExperimentConfig {
    /// Small preset sized for single-core runs of the full pipeline.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.encoder = EncoderConfig {
            depth: 4,
            dim: 64,
            heads: 4,
            patch_size: 8,
            image_size: 32,
            mlp_ratio: 2.0,
            ..EncoderConfig::default()
        };
        c.teacher.vit_dim = 64;
        c.teacher.vit_depth = 2;
        c.teacher.conv_width = 8;
        c.data.synthetic.image_size = 32;
        c.data.synthetic.unlabeled_images = 128;
        c.finetune.base_lr = 0.002;
        c.finetune.epochs = 200;
        c.finetune.warmup_steps = 20;
        c.finetune.max_iterations = 580;
        c.fusion.compose_rounds = 4;
        c
    }

    /// Seconds-scale preset used by smoke tests: two tiny blocks, a handful
    /// of synthetic cases and one epoch per pretext task.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.encoder = EncoderConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            patch_size: 4,
            image_size: 16,
            mlp_ratio: 2.0,
            ..EncoderConfig::default()
        };
        c.lora.rank = 2;
        c.teacher = TeacherConfig {
            conv_width: 4,
            proj_dim: 8,
            vit_depth: 1,
            vit_dim: 16,
            vit_heads: 2,
        };
        for p in [&mut c.pretext.image, &mut c.pretext.patch, &mut c.pretext.pixel] {
            p.batch_size = 8;
            p.epochs = 1;
            p.warmup_epochs = 0;
            p.distill_epochs = p.distill_epochs.min(1);
        }
        c.data.synthetic.image_size = 16;
        c.data.synthetic.num_cases = 6;
        c.data.synthetic.slices_per_case = 4;
        c.data.synthetic.unlabeled_images = 16;
        c.data.train_cases = 4;
        c.finetune.fewshot_fraction = 0.25;
        c.finetune.batch_size = 4;
        c.finetune.epochs = 2;
        c.finetune.warmup_steps = 1;
        c.finetune.max_iterations = 20;
        c.fusion.compose_rounds = 1;
        c.fusion.compose_grid = 3;
        c.eval.batch_size = 8;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SamoraError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SamoraError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SamoraError::config(format!("serialize: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| SamoraError::io(path, e))
    }

    pub fn hash(&self) -> Result<String> {
        section_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.data.synthetic.validate()?;
        self.finetune.validate()?;
        for l in Level::ALL {
            self.pretext.get(l).validate()?;
        }
        if self.lora.rank == 0 || self.lora.rank > self.encoder.dim {
            return Err(SamoraError::config(format!(
                "LoRA rank {} outside 1..={}",
                self.lora.rank, self.encoder.dim
            )));
        }
        if self.seeds.is_empty() {
            return Err(SamoraError::config("at least one seed is required"));
        }
        if self.data.synthetic.image_size != self.encoder.image_size && self.data.dataset_dir.is_none() {
            return Err(SamoraError::config(format!(
                "synthetic image_size {} differs from encoder image_size {}",
                self.data.synthetic.image_size, self.encoder.image_size
            )));
        }
        if self.fusion.compose_grid < 2 || !(self.fusion.compose_range > 0.0) {
            return Err(SamoraError::config("compose_grid >= 2 and compose_range > 0 required"));
        }
        self.fusion.order.validate()?;
        self.assembly_spec().validate()
    }

    pub fn assembly_spec(&self) -> AssemblySpec {
        let mut levels = self.fusion.levels.clone();
        levels.sort_by(|a, b| b.cmp(a));
        AssemblySpec {
            encoder: self.encoder.clone(),
            levels,
            strategy: self.fusion.strategy(),
            num_classes: self.data.synthetic.num_classes,
            layer_norm: self.fusion.layer_norm,
            lac_trainable: self.fusion.lac_trainable,
            rank: self.lora.rank,
        }
    }
}
