//! Synthetic moving-sprite corpus.
//!
//! Each class is a motion program for a bright sprite on a dark background.
//! Static appearance is identical across classes (same sprite, same
//! background, positions spread over the whole frame), so single-frame
//! statistics carry no class signal; only the temporal order of frames
//! does. Sprites move on a torus (wrap-around) so every frame contains the
//! full sprite and per-frame pixel means stay constant.

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::video::{LabeledCorpus, Split, Video};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

pub const BACKGROUND: u8 = 20;

/// Configuration for the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_videos_per_class: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub frames_per_video: usize,
    pub sprite_size: usize,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos_per_class: 40,
            num_classes: 6,
            height: 32,
            width: 32,
            frames_per_video: 24,
            sprite_size: 8,
            noise_std: 3.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::ConfigError("num_classes must be >= 2".into()));
        }
        if self.num_videos_per_class == 0 {
            return Err(Error::ConfigError("num_videos_per_class must be >= 1".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::ConfigError("frames must be at least 8x8".into()));
        }
        if self.frames_per_video < 2 {
            return Err(Error::ConfigError("frames_per_video must be >= 2".into()));
        }
        if self.sprite_size == 0 || self.sprite_size >= self.height.min(self.width) {
            return Err(Error::ConfigError(format!(
                "sprite_size {} must be in [1, {})",
                self.sprite_size,
                self.height.min(self.width)
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::ConfigError("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// The six base motion programs. Classes above five reuse a program at a
/// higher speed, so extra classes still differ only in dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionProgram {
    Rightward,
    Leftward,
    Downward,
    Diagonal,
    Oscillating,
    Circular,
}

impl MotionProgram {
    pub fn of_class(class: usize) -> (Self, f32) {
        let programs = [
            MotionProgram::Rightward,
            MotionProgram::Leftward,
            MotionProgram::Downward,
            MotionProgram::Diagonal,
            MotionProgram::Oscillating,
            MotionProgram::Circular,
        ];
        let speed_scale = 1.0 + 0.5 * (class / programs.len()) as f32;
        (programs[class % programs.len()], speed_scale)
    }

    pub fn base_name(self) -> &'static str {
        match self {
            MotionProgram::Rightward => "rightward",
            MotionProgram::Leftward => "leftward",
            MotionProgram::Downward => "downward",
            MotionProgram::Diagonal => "diagonal",
            MotionProgram::Oscillating => "oscillating",
            MotionProgram::Circular => "circular",
        }
    }
}

pub fn class_name(class: usize) -> String {
    let (program, _) = MotionProgram::of_class(class);
    let variant = class / 6;
    if variant == 0 {
        program.base_name().to_string()
    } else {
        format!("{}{}", program.base_name(), variant + 1)
    }
}

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(class_name).collect()
}

/// Per-video randomized geometry: trajectory start, speed jitter, and the
/// sprite color. Class-independent, so frame marginals overlap across
/// classes and no single draw leaks the label.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams {
    pub x0: f32,
    pub y0: f32,
    pub phase: f32,
    pub speed: f32,
    pub color: [u8; 3],
}

impl MotionParams {
    pub fn sample(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            x0: rng.random_range(0.0..cfg.width as f32),
            y0: rng.random_range(0.0..cfg.height as f32),
            phase: rng.random_range(0.0..std::f32::consts::TAU),
            speed: 1.0,
            color: [
                rng.random_range(150..=255),
                rng.random_range(150..=255),
                rng.random_range(150..=255),
            ],
        }
    }
}

// One period per default-length video: slow direction reversals keep short
// ordered clips looking ordered.
const OSC_PERIOD: f32 = 24.0;
const CIRCLE_PERIOD: f32 = 24.0;

/// Sprite anchor position at frame `t` (continuous; wrapped when drawn).
pub fn sprite_position(
    program: MotionProgram,
    speed_scale: f32,
    params: &MotionParams,
    extent: (usize, usize),
    t: usize,
) -> (f32, f32) {
    let (h, w) = extent;
    let t = t as f32;
    let v = speed_scale * params.speed;
    match program {
        MotionProgram::Rightward => (params.x0 + v * t, params.y0),
        MotionProgram::Leftward => (params.x0 - v * t, params.y0),
        MotionProgram::Downward => (params.x0, params.y0 + v * t),
        MotionProgram::Diagonal => (params.x0 + v * t, params.y0 + v * t),
        MotionProgram::Oscillating => {
            let amp = w.min(h) as f32 / 6.0;
            let angle = std::f32::consts::TAU * v * t / OSC_PERIOD + params.phase;
            (params.x0 + amp * angle.sin(), params.y0)
        }
        MotionProgram::Circular => {
            let radius = w.min(h) as f32 / 5.0;
            let angle = std::f32::consts::TAU * v * t / CIRCLE_PERIOD + params.phase;
            (params.x0 + radius * angle.cos(), params.y0 + radius * angle.sin())
        }
    }
}

fn draw_sprite(frame: &mut [u8], h: usize, w: usize, x: f32, y: f32, size: usize, color: [u8; 3]) {
    let xi = x.round() as i64;
    let yi = y.round() as i64;
    for dy in 0..size as i64 {
        let py = (yi + dy).rem_euclid(h as i64) as usize;
        for dx in 0..size as i64 {
            let px = (xi + dx).rem_euclid(w as i64) as usize;
            let base = (py * w + px) * 3;
            frame[base..base + 3].copy_from_slice(&color);
        }
    }
}

/// Render one noise-free sprite video for a class with fixed geometry.
pub fn render_motion(cfg: &SynthConfig, class: usize, params: &MotionParams) -> Video {
    let (program, speed) = MotionProgram::of_class(class);
    let (h, w) = (cfg.height, cfg.width);
    let frame_len = h * w * 3;
    let mut data = vec![BACKGROUND; cfg.frames_per_video * frame_len];
    for t in 0..cfg.frames_per_video {
        let (x, y) = sprite_position(program, speed, params, (h, w), t);
        let frame = &mut data[t * frame_len..(t + 1) * frame_len];
        draw_sprite(frame, h, w, x, y, cfg.sprite_size, params.color);
    }
    Video::new(cfg.frames_per_video, h, w, 3, data).expect("validated config")
}

/// Add clamped zero-mean Gaussian pixel noise in place.
pub fn apply_noise(video: Video, noise_std: f32, rng: &mut ChaCha8Rng) -> Video {
    if noise_std == 0.0 {
        return video;
    }
    let (n, h, w, c) = (
        video.frame_count(),
        video.height(),
        video.width(),
        video.channels(),
    );
    let dist = Normal::new(0.0f32, noise_std).expect("validated noise_std");
    let data = video
        .bytes()
        .iter()
        .map(|&p| (p as f32 + dist.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    Video::new(n, h, w, c, data).expect("shape unchanged")
}

fn split_id(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Deterministic video for `(cfg.seed, split, class, index)`. Geometry and
/// noise come from one per-video stream, so corpora reproduce under
/// parallel generation.
pub fn synth_video(cfg: &SynthConfig, split: Split, class: usize, index: usize) -> Video {
    let mut rng = rng::stream(
        cfg.seed,
        &[tag::CORPUS_VIDEO, split_id(split), class as u64, index as u64],
    );
    let params = MotionParams::sample(cfg, &mut rng);
    apply_noise(render_motion(cfg, class, &params), cfg.noise_std, &mut rng)
}

/// Generate one split with `per_class` videos per class. Video identity is
/// `(seed, split, class, index)`, so splits never share videos.
pub fn synth_corpus_split(cfg: &SynthConfig, split: Split, per_class: usize) -> Result<LabeledCorpus> {
    cfg.validate()?;
    if per_class == 0 {
        return Err(Error::ConfigError("per_class must be >= 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.num_classes)
        .flat_map(|class| (0..per_class).map(move |i| (class, i)))
        .collect();
    let videos: Vec<Video> = jobs
        .par_iter()
        .map(|&(class, i)| synth_video(cfg, split, class, i))
        .collect();
    let labels = jobs.iter().map(|&(class, _)| class).collect();
    LabeledCorpus::new(videos, labels, default_class_names(cfg.num_classes), split)
}

/// The training corpus for a config: `num_videos_per_class` videos of each
/// class.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<LabeledCorpus> {
    synth_corpus_split(cfg, Split::Train, cfg.num_videos_per_class)
}
