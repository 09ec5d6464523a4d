use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use samora_core::checkpoint::read_meta;
use samora_core::data::{read_raster_any, save_dataset};
use samora_core::experiments::{
    cache_root, evaluate_model, export_heatmap, load_teacher, load_trained_model, prepare_data, prepare_slice,
    run_ablation, run_pipeline, save_adapters, save_report, save_stage2, save_teacher, synthetic_splits,
    train_adapters, train_stage2, train_teacher, AblationAxis, AblationMatrix, HEATMAP_FILES,
};
use samora_core::metrics::{paired_t_test, read_volume_scores};
use samora_core::{ExperimentConfig, Level};

#[derive(Parser)]
#[command(name = "samora", version, about = "Hierarchical LoRA experts for few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Small model sized for single-core runs.
    Desk,
    /// Full default sizes.
    Default,
    /// Tiny model and data for smoke runs (seconds).
    Smoke,
}

impl Preset {
    fn config(self) -> ExperimentConfig {
        match self {
            Preset::Desk => ExperimentConfig::desk(),
            Preset::Default => ExperimentConfig::default(),
            Preset::Smoke => ExperimentConfig::smoke(),
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Dataset directory written by `make-data` (default: synthetic data from the config).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => self.preset.config(),
        };
        if let Some(d) = &self.data {
            cfg.data.dataset_dir = Some(d.display().to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset configuration as TOML.
    PrintConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Write the synthetic dataset (train/test split and unlabeled corpus) to disk.
    MakeData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continually pretrain a teacher (image: contrastive, patch: masked reconstruction).
    PretrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        level: Level,
        /// Keep the random initialisation (no continual pretraining).
        #[arg(long)]
        no_cpt: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one level's LoRA expert (distillation or denoising).
    PretrainLora {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        level: Level,
        /// Teacher directory from `pretrain-teacher`; trained on the fly when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse pretrained experts and fine-tune fusion + decoder on the few-shot split.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Adapter directories from `pretrain-lora`, one per level.
        #[arg(long, num_args = 1..)]
        adapters: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Volume-level Dice / Hausdorff on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole cached pipeline for every configured seed.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Sweep one axis (fusion_strategy, fusion_order, rank, pretrain_mode).
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated values (default: the axis' standard values).
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention heatmaps and segmentation overlay for one slice.
    ExportHeatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Raw slice (.img, .pgm or .png) used instead of a test slice.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired t-test on per-volume mean Dice of two evaluation reports.
    Stats {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::PrintConfig { preset } => {
            print!("{}", preset.config().to_toml()?);
        }
        Command::MakeData { cfg, seed, out } => {
            let cfg = cfg.load()?;
            let splits = synthetic_splits(&cfg, seed)?;
            save_dataset(&out, &splits)?;
            let counts: Vec<String> = splits.splits.iter().map(|(k, v)| format!("{k}={}", v.len())).collect();
            println!("{}: {} unlabeled={}", out.display(), counts.join(" "), splits.unlabeled.len());
        }
        Command::PretrainTeacher { cfg, level, no_cpt, seed, out } => {
            let cfg = cfg.load()?;
            if level == Level::Pixel {
                bail!("the pixel level has no teacher");
            }
            let data = prepare_data(&cfg, seed)?;
            let teacher = train_teacher(&cfg, level, !no_cpt, &data.corpus, seed)?;
            save_teacher(&out, &teacher, &cfg.hash()?, seed)?;
            println!("{}: {level} teacher, {} steps", out.display(), teacher.loss_curve.len());
        }
        Command::PretrainLora { cfg, level, teacher, seed, out } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg, seed)?;
            let teacher = match (level, teacher) {
                (Level::Pixel, _) => None,
                (_, Some(dir)) => Some(load_teacher(&cfg, level, &dir)?),
                (_, None) => Some(train_teacher(&cfg, level, true, &data.corpus, seed)?),
            };
            let (store, outcome) = train_adapters(&cfg, level, teacher.as_ref(), &data.corpus, seed)?;
            save_adapters(&out, &store, level, &outcome, &cfg.hash()?, seed)?;
            println!("{}: {level} adapters, {} steps", out.display(), outcome.steps);
        }
        Command::Finetune { cfg, adapters, seed, out } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg, seed)?;
            let result = train_stage2(&cfg, &adapters, &data.fewshot, seed)?;
            save_stage2(&out, &result, &cfg.hash()?, seed)?;
            println!("{}: {} steps on {} slices", out.display(), result.report.steps.len(), data.fewshot.len());
        }
        Command::Evaluate { checkpoint, data, out } => {
            let (model, mut cfg) = load_trained_model(&checkpoint)?;
            if let Some(d) = data {
                cfg.data.dataset_dir = Some(d.display().to_string());
            }
            let seed = read_meta(&checkpoint)?.seed;
            let prepared = prepare_data(&cfg, seed)?;
            let report = evaluate_model(&model, &prepared.test, &cfg, seed)?;
            save_report(&out, &report)?;
            println!("{}", report.summary());
        }
        Command::Run { cfg, seeds } => {
            let mut cfg = cfg.load()?;
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            let outputs = run_pipeline(&cfg)?;
            let dir = Path::new(&cfg.output_dir);
            fs::create_dir_all(dir)?;
            let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
            w.write_record(["seed", "mean_dice", "mean_hd", "stage2_dir"])?;
            for o in &outputs {
                println!("seed {}: {}", o.seed, o.report.summary());
                w.write_record([
                    o.seed.to_string(),
                    o.report.mean_dice.to_string(),
                    o.report.mean_hd.to_string(),
                    o.stage2_dir.display().to_string(),
                ])?;
            }
            w.flush()?;
        }
        Command::Ablate { cfg, axis, values, seeds, out } => {
            let cfg = cfg.load()?;
            let mut matrix = AblationMatrix::new(axis, if seeds.is_empty() { cfg.seeds.clone() } else { seeds });
            if !values.is_empty() {
                matrix.values = values;
            }
            let table = run_ablation(&matrix, &cfg, &cache_root(&cfg))?;
            fs::create_dir_all(&out)?;
            table.write_csv(&out.join("ablation.csv"))?;
            table.write_summary_csv(&out.join("ablation_summary.csv"))?;
            for s in table.summary() {
                println!(
                    "{:<16} n={}  Dice {:.2} ± {:.2}  HD {:.2} ± {:.2}",
                    s.value, s.n, s.mean_dice_mean, s.mean_dice_std, s.mean_hd_mean, s.mean_hd_std
                );
            }
        }
        Command::ExportHeatmap { checkpoint, index, image, data, out } => {
            let (model, mut cfg) = load_trained_model(&checkpoint)?;
            let size = cfg.encoder.image_size;
            let sample = match image {
                Some(p) => prepare_slice(&read_raster_any(&p)?, size)?,
                None => {
                    if let Some(d) = data {
                        cfg.data.dataset_dir = Some(d.display().to_string());
                    }
                    let seed = read_meta(&checkpoint)?.seed;
                    let test = prepare_data(&cfg, seed)?.test;
                    let n = test.len();
                    test.into_iter()
                        .nth(index)
                        .with_context(|| format!("index {index} out of range ({n} test slices)"))?
                }
            };
            let set = export_heatmap(&model, &sample, &out)?;
            debug_assert_eq!(set.files.len(), HEATMAP_FILES.len());
            for f in &set.files {
                println!("{}", f.display());
            }
        }
        Command::Stats { a, b } => {
            let sa = read_volume_scores(&a)?;
            let sb = read_volume_scores(&b)?;
            let keys_a: Vec<&u32> = sa.keys().collect();
            let keys_b: Vec<&u32> = sb.keys().collect();
            if keys_a != keys_b {
                bail!("reports cover different volumes: {keys_a:?} vs {keys_b:?}");
            }
            let paired: BTreeMap<u32, (f64, f64)> = sa.iter().map(|(k, v)| (*k, (*v, sb[k]))).collect();
            let (xa, xb): (Vec<f64>, Vec<f64>) = paired.values().copied().unzip();
            let r = paired_t_test(&xa, &xb)?;
            println!("n,mean_diff,t,p,ci_low,ci_high,degenerate");
            println!("{},{},{},{},{},{},{}", r.n, r.mean_diff, r.t, r.p, r.ci_low, r.ci_high, r.degenerate);
        }
    }
    Ok(())
}
