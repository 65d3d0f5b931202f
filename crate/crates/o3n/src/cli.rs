//! Command-line entry points: data generation, pretraining, fine-tuning,
//! evaluation, encoder dumps, and filter visualization.
//!
//! Artifacts land under `<out>/<config-hash>-s<seed>/`, so reruns of the
//! same configuration are idempotent and different configurations never
//! collide.

use crate::checkpoint::Checkpoint;
use crate::clipenc::{encode_clip, EncoderKind};
use crate::config::{FtInit, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::write_metrics_csv;
use crate::model::pretrain;
use crate::sampling::clip_at;
use crate::synth::{synth_corpus, synth_corpus_split};
use crate::transfer::{evaluate, finetune, label_budget_subset, ClassifierModel, InitKind};
use crate::video::{load_corpus_split, save_corpus_dir, Split, Video};
use crate::viz;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "o3n", version, about = "Odd-one-out video representation learning")]
pub struct Cli {
    /// Plain-text config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Single-threaded, bitwise-reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Output root for run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic labeled video corpus.
    GenData,
    /// Self-supervised odd-one-out pretraining.
    Pretrain,
    /// Supervised fine-tuning (random or checkpoint initialization).
    Finetune,
    /// Evaluate a fine-tuned model on the test split.
    Eval,
    /// Dump a clip encoding as portable pixmap images.
    Encode {
        /// Video container file.
        video: PathBuf,
        #[arg(long)]
        encoder: Option<String>,
        #[arg(long)]
        clip_len: Option<usize>,
        /// 1-based first frame of the encoded clip.
        #[arg(long, default_value_t = 1)]
        start: usize,
    },
    /// Tile first-layer conv kernels of a checkpoint into a grid image.
    InspectFilters { checkpoint: PathBuf },
}

/// Resolve the configuration with flag > file > default precedence.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn prepare_run_dir(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let dir = cfg.run_dir(out);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config_resolved.txt"), cfg.canonical_lines().join("\n") + "\n")?;
    Ok(dir)
}

fn corpus_dir(cfg: &RunConfig, run_dir: &Path) -> PathBuf {
    cfg.corpus_dir.clone().unwrap_or_else(|| run_dir.join("corpus"))
}

fn checkpoint_path(cfg: &RunConfig, run_dir: &Path) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| run_dir.join("checkpoint.o3nc"))
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let run_dir = prepare_run_dir(&cfg, &cli.out)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, &run_dir),
        Command::Pretrain => cmd_pretrain(&cfg, &run_dir),
        Command::Finetune => cmd_finetune(&cfg, &run_dir),
        Command::Eval => cmd_eval(&cfg, &run_dir),
        Command::Encode { video, encoder, clip_len, start } => {
            let encoder = match encoder {
                Some(name) => EncoderKind::parse(name)?,
                None => cfg.encoder,
            };
            cmd_encode(video, encoder, clip_len.unwrap_or(cfg.clip_len), *start, &run_dir)
        }
        Command::InspectFilters { checkpoint } => cmd_inspect_filters(checkpoint, &run_dir),
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let dir = corpus_dir(cfg, run_dir);
    let synth_cfg = cfg.synth();
    let train = synth_corpus(&synth_cfg)?;
    let mut corpora = vec![&train];
    let test;
    if cfg.test_videos_per_class > 0 {
        test = synth_corpus_split(&synth_cfg, Split::Test, cfg.test_videos_per_class)?;
        corpora.push(&test);
    }
    save_corpus_dir(&dir, &corpora)?;
    let total: usize = corpora.iter().map(|c| c.len()).sum();
    println!("gen-data: wrote {total} videos to {}", dir.display());
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let dir = corpus_dir(cfg, run_dir);
    let corpus = load_corpus_split(&dir, Split::Train)?;
    let output = pretrain(&corpus.videos, &cfg.o3n())?;
    let ckpt_path = checkpoint_path(cfg, run_dir);
    output.checkpoint.save(&ckpt_path)?;
    write_metrics_csv(&run_dir.join("pretrain_metrics.csv"), &output.metrics)?;
    match output.final_val_accuracy {
        Some(acc) => println!(
            "pretrain: checkpoint {} (val odd-one-out accuracy {:.3})",
            ckpt_path.display(),
            acc
        ),
        None => println!("pretrain: checkpoint {}", ckpt_path.display()),
    }
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let dir = corpus_dir(cfg, run_dir);
    let corpus = label_budget_subset(&load_corpus_split(&dir, Split::Train)?, cfg.ft_videos_per_class)?;
    let init = match cfg.ft_init {
        FtInit::Random => InitKind::Random,
        FtInit::O3n => {
            let path = checkpoint_path(cfg, run_dir);
            if !path.exists() {
                return Err(Error::ConfigError(format!(
                    "ft_init = o3n but checkpoint {} does not exist",
                    path.display()
                )));
            }
            InitKind::O3nCheckpoint(path)
        }
    };
    let (model, metrics) = finetune(&corpus, &cfg.finetune(init), None)?;
    let model_path = run_dir.join("model.o3nc");
    model
        .to_checkpoint(vec![
            ("encoder".to_string(), cfg.encoder.to_string()),
            ("clip_len".to_string(), cfg.clip_len.to_string()),
            ("seed".to_string(), cfg.seed.to_string()),
        ])
        .save(&model_path)?;
    write_metrics_csv(&run_dir.join("finetune_metrics.csv"), &metrics)?;
    let last = metrics.last().expect("at least one epoch");
    println!(
        "finetune: model {} (final train accuracy {:.3})",
        model_path.display(),
        last.accuracy
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let dir = corpus_dir(cfg, run_dir);
    let corpus = load_corpus_split(&dir, Split::Test)?;
    let model_path = run_dir.join("model.o3nc");
    if !model_path.exists() {
        return Err(Error::ConfigError(format!(
            "no fine-tuned model at {}",
            model_path.display()
        )));
    }
    let ckpt = Checkpoint::load(&model_path)?;
    let model = ClassifierModel::from_checkpoint(&ckpt)?;
    let report = evaluate(&model, &corpus, cfg.clip_len, cfg.encoder)?;
    std::fs::write(run_dir.join("report_confusion.csv"), report.confusion_csv())?;
    std::fs::write(run_dir.join("summary.txt"), report.summary_text())?;
    println!(
        "eval: accuracy {:.3} over {} test videos ({})",
        report.overall_accuracy,
        report.total,
        run_dir.join("summary.txt").display()
    );
    Ok(())
}

pub fn cmd_encode(
    video_path: &Path,
    encoder: EncoderKind,
    clip_len: usize,
    start: usize,
    run_dir: &Path,
) -> Result<()> {
    let video = Video::load(video_path)?;
    let clip = clip_at(&video, start, clip_len)?;
    let encoded = encode_clip(encoder, &clip)?;
    let stem = video_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".to_string());
    let images = viz::encoded_clip_images(&encoded);
    for (block, image) in images.iter().enumerate() {
        let path = run_dir.join(format!("{stem}_{encoder}_b{block}.ppm"));
        image.write_ppm(&path)?;
        println!("encode: {}", path.display());
    }
    Ok(())
}

pub fn cmd_inspect_filters(checkpoint: &Path, run_dir: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let kernels = ckpt.tensors.get("trunk.conv0.w").ok_or_else(|| {
        Error::MalformedContainer("checkpoint has no trunk.conv0.w tensor".into())
    })?;
    let grid = viz::filter_grid(kernels, 8)?;
    let path = run_dir.join("filters.ppm");
    grid.write_ppm(&path)?;
    println!("inspect-filters: {}", path.display());
    Ok(())
}
