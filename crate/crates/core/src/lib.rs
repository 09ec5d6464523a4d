//! Hierarchical self-supervised LoRA experts on a frozen ViT encoder, fused for
//! few-shot medical image segmentation.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod finetune;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod segmenter;
pub mod ssl;

pub use config::{ExperimentConfig, PretrainMode};
pub use data::{Raster, SegSample};
pub use error::{Result, SamoraError};
pub use finetune::{FinetuneConfig, Stage};
pub use fusion::{FusionOrder, FusionStrategy, StrategyKind};
pub use metrics::{HdMode, MetricsReport};
pub use model::{EncoderConfig, Level};
pub use params::ParamStore;
pub use segmenter::{AssemblySpec, SamoraModel};
