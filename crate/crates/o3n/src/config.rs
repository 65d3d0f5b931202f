//! Run configuration: flat `key = value` text files, CLI overrides, and a
//! stable hash that names run directories.
//!
//! Precedence is CLI flag > config file > built-in default. Unknown keys
//! are rejected by name.

use crate::clipenc::EncoderKind;
use crate::error::{Error, Result};
use crate::model::{ConvSpec, FusionKind, O3NConfig, TrunkConfig};
use crate::sampling::Strategy;
use crate::synth::SynthConfig;
use crate::transfer::{FinetuneConfig, InitKind};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtInit {
    Random,
    O3n,
}

impl FtInit {
    fn as_str(self) -> &'static str {
        match self {
            FtInit::Random => "random",
            FtInit::O3n => "o3n",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(FtInit::Random),
            "o3n" => Ok(FtInit::O3n),
            other => Err(Error::ConfigError(format!(
                "ft_init must be random or o3n, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrPreset {
    Custom,
    Desk,
    Paper,
}

impl LrPreset {
    fn as_str(self) -> &'static str {
        match self {
            LrPreset::Custom => "custom",
            LrPreset::Desk => "desk",
            LrPreset::Paper => "paper",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "custom" => Ok(LrPreset::Custom),
            "desk" => Ok(LrPreset::Desk),
            "paper" => Ok(LrPreset::Paper),
            other => Err(Error::ConfigError(format!(
                "ft_lr_preset must be custom, desk, or paper, got {other:?}"
            ))),
        }
    }
}

/// Every tunable of the pipeline, with defaults baked in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // synthetic data
    pub classes: usize,
    pub videos_per_class: usize,
    pub test_videos_per_class: usize,
    pub frames_per_video: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub sprite_size: usize,
    pub noise_std: f32,
    // question sampling
    pub n_even: usize,
    pub clip_len: usize,
    pub strategy: Strategy,
    pub questions_per_video: usize,
    // network
    pub encoder: EncoderKind,
    pub fusion: FusionKind,
    pub conv_layers: Vec<ConvSpec>,
    pub fc_dim: usize,
    pub head_dim: usize,
    // pretraining
    pub epochs: usize,
    pub batch_questions: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub val_fraction: f64,
    // fine-tuning
    pub ft_epochs: usize,
    pub ft_batch: usize,
    pub ft_lr_preset: LrPreset,
    pub ft_lr_start: f64,
    pub ft_lr_end: f64,
    pub ft_fc_lr_mult: f64,
    pub ft_dropout: f32,
    pub ft_head_dims: Vec<usize>,
    pub ft_init: FtInit,
    pub ft_clips_per_video: usize,
    /// Labeled videos per class available to fine-tuning; 0 keeps all.
    pub ft_videos_per_class: usize,
    // paths
    pub corpus_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    // run control
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            videos_per_class: 40,
            test_videos_per_class: 0,
            frames_per_video: 24,
            frame_height: 32,
            frame_width: 32,
            sprite_size: 8,
            noise_std: 3.0,
            n_even: 5,
            clip_len: 6,
            strategy: Strategy::Random,
            questions_per_video: 1,
            encoder: EncoderKind::DynamicImage,
            fusion: FusionKind::SumOfDiff,
            conv_layers: TrunkConfig::desk_default(3).convs,
            fc_dim: 128,
            head_dim: 128,
            epochs: 200,
            batch_questions: 64,
            lr_start: 0.01,
            lr_end: 0.0001,
            momentum: 0.9,
            weight_decay: 5e-4,
            val_fraction: 0.1,
            ft_epochs: 30,
            ft_batch: 128,
            ft_lr_preset: LrPreset::Custom,
            ft_lr_start: 1e-3,
            ft_lr_end: 1e-5,
            ft_fc_lr_mult: 10.0,
            ft_dropout: 0.8,
            ft_head_dims: vec![256],
            ft_init: FtInit::Random,
            ft_clips_per_video: 1,
            ft_videos_per_class: 0,
            corpus_dir: None,
            checkpoint: None,
            seed: 7,
            deterministic: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::ConfigError(format!("bad value {value:?} for key {key:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::ConfigError(format!("bad boolean {other:?} for key {key:?}"))),
    }
}

impl RunConfig {
    /// Parse a config file and apply it over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines (with `#` comments) over this config.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::ConfigError(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "classes" => self.classes = parse_num(key, value)?,
            "videos_per_class" => self.videos_per_class = parse_num(key, value)?,
            "test_videos_per_class" => self.test_videos_per_class = parse_num(key, value)?,
            "frames_per_video" => self.frames_per_video = parse_num(key, value)?,
            "frame_height" => self.frame_height = parse_num(key, value)?,
            "frame_width" => self.frame_width = parse_num(key, value)?,
            "sprite_size" => self.sprite_size = parse_num(key, value)?,
            "noise_std" => self.noise_std = parse_num(key, value)?,
            "n_even" => self.n_even = parse_num(key, value)?,
            "clip_len" => self.clip_len = parse_num(key, value)?,
            "strategy" => self.strategy = Strategy::parse(value)?,
            "questions_per_video" => self.questions_per_video = parse_num(key, value)?,
            "encoder" => self.encoder = EncoderKind::parse(value)?,
            "fusion" => self.fusion = FusionKind::parse(value)?,
            "conv_layers" => {
                self.conv_layers = value
                    .split(',')
                    .map(|s| ConvSpec::parse_compact(s.trim()))
                    .collect::<Result<Vec<_>>>()?
            }
            "fc_dim" => self.fc_dim = parse_num(key, value)?,
            "head_dim" => self.head_dim = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_questions" => self.batch_questions = parse_num(key, value)?,
            "lr_start" => self.lr_start = parse_num(key, value)?,
            "lr_end" => self.lr_end = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "val_fraction" => self.val_fraction = parse_num(key, value)?,
            "ft_epochs" => self.ft_epochs = parse_num(key, value)?,
            "ft_batch" => self.ft_batch = parse_num(key, value)?,
            "ft_lr_preset" => self.ft_lr_preset = LrPreset::parse(value)?,
            "ft_lr_start" => self.ft_lr_start = parse_num(key, value)?,
            "ft_lr_end" => self.ft_lr_end = parse_num(key, value)?,
            "ft_fc_lr_mult" => self.ft_fc_lr_mult = parse_num(key, value)?,
            "ft_dropout" => self.ft_dropout = parse_num(key, value)?,
            "ft_head_dims" => {
                self.ft_head_dims = value
                    .split(',')
                    .map(|s| parse_num::<usize>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?
            }
            "ft_init" => self.ft_init = FtInit::parse(value)?,
            "ft_clips_per_video" => self.ft_clips_per_video = parse_num(key, value)?,
            "ft_videos_per_class" => self.ft_videos_per_class = parse_num(key, value)?,
            "corpus_dir" => self.corpus_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "seed" => self.seed = parse_num(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            other => {
                return Err(Error::ConfigError(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Fine-tune learning-rate range after applying the preset.
    pub fn ft_lr_range(&self) -> (f64, f64) {
        match self.ft_lr_preset {
            LrPreset::Custom => (self.ft_lr_start, self.ft_lr_end),
            LrPreset::Desk => (1e-3, 1e-5),
            LrPreset::Paper => (1e-2, 1e-4),
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_videos_per_class: self.videos_per_class,
            num_classes: self.classes,
            height: self.frame_height,
            width: self.frame_width,
            frames_per_video: self.frames_per_video,
            sprite_size: self.sprite_size,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }

    pub fn o3n(&self) -> O3NConfig {
        O3NConfig {
            n_even: self.n_even,
            clip_len: self.clip_len,
            strategy: self.strategy,
            encoder: self.encoder,
            fusion: self.fusion,
            convs: self.conv_layers.clone(),
            fc_dim: self.fc_dim,
            head_dim: self.head_dim,
            epochs: self.epochs,
            batch_questions: self.batch_questions,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            val_fraction: self.val_fraction,
            questions_per_video: self.questions_per_video,
            seed: self.seed,
        }
    }

    pub fn finetune(&self, init: InitKind) -> FinetuneConfig {
        let (lr_start, lr_end) = self.ft_lr_range();
        FinetuneConfig {
            head_dims: self.ft_head_dims.clone(),
            epochs: self.ft_epochs,
            batch_samples: self.ft_batch,
            lr_start,
            lr_end,
            fc_lr_multiplier: self.ft_fc_lr_mult,
            dropout: self.ft_dropout,
            clip_len: self.clip_len,
            encoder: self.encoder,
            convs: self.conv_layers.clone(),
            init,
            clips_per_video: self.ft_clips_per_video,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    /// Canonical `key = value` lines in a fixed order, covering every key.
    pub fn canonical_lines(&self) -> Vec<String> {
        let conv = self
            .conv_layers
            .iter()
            .map(ConvSpec::to_compact)
            .collect::<Vec<_>>()
            .join(",");
        let heads = self
            .ft_head_dims
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            format!("classes = {}", self.classes),
            format!("videos_per_class = {}", self.videos_per_class),
            format!("test_videos_per_class = {}", self.test_videos_per_class),
            format!("frames_per_video = {}", self.frames_per_video),
            format!("frame_height = {}", self.frame_height),
            format!("frame_width = {}", self.frame_width),
            format!("sprite_size = {}", self.sprite_size),
            format!("noise_std = {}", self.noise_std),
            format!("n_even = {}", self.n_even),
            format!("clip_len = {}", self.clip_len),
            format!("strategy = {}", self.strategy),
            format!("questions_per_video = {}", self.questions_per_video),
            format!("encoder = {}", self.encoder),
            format!("fusion = {}", self.fusion),
            format!("conv_layers = {conv}"),
            format!("fc_dim = {}", self.fc_dim),
            format!("head_dim = {}", self.head_dim),
            format!("epochs = {}", self.epochs),
            format!("batch_questions = {}", self.batch_questions),
            format!("lr_start = {}", self.lr_start),
            format!("lr_end = {}", self.lr_end),
            format!("momentum = {}", self.momentum),
            format!("weight_decay = {}", self.weight_decay),
            format!("val_fraction = {}", self.val_fraction),
            format!("ft_epochs = {}", self.ft_epochs),
            format!("ft_batch = {}", self.ft_batch),
            format!("ft_lr_preset = {}", self.ft_lr_preset.as_str()),
            format!("ft_lr_start = {}", self.ft_lr_start),
            format!("ft_lr_end = {}", self.ft_lr_end),
            format!("ft_fc_lr_mult = {}", self.ft_fc_lr_mult),
            format!("ft_dropout = {}", self.ft_dropout),
            format!("ft_head_dims = {heads}"),
            format!("ft_init = {}", self.ft_init.as_str()),
            format!("ft_clips_per_video = {}", self.ft_clips_per_video),
            format!("ft_videos_per_class = {}", self.ft_videos_per_class),
            format!("corpus_dir = {}", display_opt(&self.corpus_dir)),
            format!("checkpoint = {}", display_opt(&self.checkpoint)),
            format!("seed = {}", self.seed),
            format!("deterministic = {}", self.deterministic),
        ]
    }

    /// FNV-1a over the canonical lines, excluding the seed (run directories
    /// are named `<hash>-s<seed>`) and the deterministic flag (it cannot
    /// change outputs).
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for line in self.canonical_lines() {
            if line.starts_with("seed = ") || line.starts_with("deterministic = ") {
                continue;
            }
            for b in line.bytes().chain(std::iter::once(b'\n')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Directory that holds every artifact of this configuration.
    pub fn run_dir(&self, out: &Path) -> PathBuf {
        out.join(format!("{:016x}-s{}", self.hash(), self.seed))
    }
}

fn display_opt(path: &Option<PathBuf>) -> String {
    path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}
