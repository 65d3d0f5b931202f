//! Temporal clip encoders: compress a `(clip_len, h, w, 3)` frame stack
//! into a fixed-shape image tensor.
//!
//! Sum-of-differences and the dynamic image are weighted frame averages.
//! The weights realize the sum of all pairwise later-minus-earlier frame
//! differences, applied to raw frames (sum-of-diff) or to running-mean
//! smoothed frames (dynamic image). Stack-of-differences keeps consecutive
//! frame differences as separate channel blocks.
//!
//! Weight sign convention: expanding `sum_{j>i} (X_j - X_i)` gives frame
//! `t` the coefficient `2t - 1 - clip_len`, and both closed forms here
//! follow it. Encoded images are standardized per channel to zero mean and
//! unit variance because the raw weighted sums have a data-dependent
//! dynamic range that grows with the clip length.

use crate::error::{Error, Result};
use crate::sampling::Clip;
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    SumOfDiff,
    DynamicImage,
    StackOfDiff,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::SumOfDiff => "sum_of_diff",
            EncoderKind::DynamicImage => "dynamic_image",
            EncoderKind::StackOfDiff => "stack_of_diff",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum_of_diff" => Ok(EncoderKind::SumOfDiff),
            "dynamic_image" => Ok(EncoderKind::DynamicImage),
            "stack_of_diff" => Ok(EncoderKind::StackOfDiff),
            other => Err(Error::ConfigError(format!("unknown encoder {other:?}"))),
        }
    }

    /// Output channel count for clips of `clip_len` RGB frames.
    pub fn out_channels(self, clip_len: usize) -> usize {
        match self {
            EncoderKind::SumOfDiff | EncoderKind::DynamicImage => 3,
            EncoderKind::StackOfDiff => (clip_len - 1) * 3,
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An encoded clip: `(h, w, c_out)` float tensor plus the encoder tag.
#[derive(Debug, Clone)]
pub struct EncodedClip {
    pub data: Tensor,
    pub encoder: EncoderKind,
}

impl EncodedClip {
    pub fn out_channels(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Frame weights realizing `sum_{j>i} (X_j - X_i)` as a single weighted
/// frame sum: `w_t = 2t - 1 - clip_len` for `t = 1..=clip_len`.
pub fn sumdiff_weights(clip_len: usize) -> Vec<f64> {
    (1..=clip_len)
        .map(|t| (2 * t) as f64 - 1.0 - clip_len as f64)
        .collect()
}

/// Frame weights realizing the same pairwise-difference sum over
/// running-mean smoothed frames:
/// `w_t = 2(clip_len - t + 1) - (clip_len + 1) * (H_clip_len - H_{t-1})`
/// with `H_t` the t-th harmonic number.
pub fn dynimg_weights(clip_len: usize) -> Vec<f64> {
    let harmonic: Vec<f64> = std::iter::once(0.0)
        .chain((1..=clip_len).scan(0.0, |acc, t| {
            *acc += 1.0 / t as f64;
            Some(*acc)
        }))
        .collect();
    let h_last = harmonic[clip_len];
    (1..=clip_len)
        .map(|t| 2.0 * (clip_len - t + 1) as f64 - (clip_len + 1) as f64 * (h_last - harmonic[t - 1]))
        .collect()
}

fn check_clip_shape(frames: &Tensor) -> Result<(usize, usize, usize)> {
    let shape = frames.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::ShapeError(format!(
            "expected frames of shape (clip_len, h, w, 3), got {shape:?}"
        )));
    }
    if shape[0] < 2 {
        return Err(Error::ShapeError("encoders need at least 2 frames".into()));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Running means over the frame axis: `M_t = mean(X_1..=X_t)`.
pub fn smooth_means(frames: &Tensor) -> Result<Tensor> {
    let shape = frames.shape();
    if shape.is_empty() {
        return Err(Error::ShapeError("empty tensor".into()));
    }
    let clip_len = shape[0];
    let stride: usize = shape[1..].iter().product();
    let x = frames.data();
    let mut out = vec![0.0f32; x.len()];
    let mut running = vec![0.0f32; stride];
    for t in 0..clip_len {
        let frame = &x[t * stride..(t + 1) * stride];
        for (acc, &v) in running.iter_mut().zip(frame) {
            *acc += v;
        }
        let inv = 1.0 / (t + 1) as f32;
        for (o, &acc) in out[t * stride..(t + 1) * stride].iter_mut().zip(&running) {
            *o = acc * inv;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn weighted_frame_sum(frames: &Tensor, weights: &[f64]) -> Tensor {
    let shape = frames.shape();
    let stride: usize = shape[1..].iter().product();
    let x = frames.data();
    let mut out = vec![0.0f32; stride];
    for (t, &w) in weights.iter().enumerate() {
        let w = w as f32;
        let frame = &x[t * stride..(t + 1) * stride];
        for (o, &v) in out.iter_mut().zip(frame) {
            *o += w * v;
        }
    }
    Tensor::new(shape[1..].to_vec(), out).expect("stride matches shape")
}

/// Pre-standardization encoder output.
pub fn encode_raw(kind: EncoderKind, frames: &Tensor) -> Result<Tensor> {
    let (clip_len, h, w) = check_clip_shape(frames)?;
    match kind {
        EncoderKind::SumOfDiff => Ok(weighted_frame_sum(frames, &sumdiff_weights(clip_len))),
        EncoderKind::DynamicImage => Ok(weighted_frame_sum(frames, &dynimg_weights(clip_len))),
        EncoderKind::StackOfDiff => {
            let c_out = (clip_len - 1) * 3;
            let frame_len = h * w * 3;
            let x = frames.data();
            let mut out = vec![0.0f32; h * w * c_out];
            for k in 0..clip_len - 1 {
                let a = &x[k * frame_len..(k + 1) * frame_len];
                let b = &x[(k + 1) * frame_len..(k + 2) * frame_len];
                for pix in 0..h * w {
                    for ch in 0..3 {
                        out[pix * c_out + k * 3 + ch] = b[pix * 3 + ch] - a[pix * 3 + ch];
                    }
                }
            }
            Tensor::new(vec![h, w, c_out], out)
        }
    }
}

/// Zero mean, unit variance per channel; channels with variance below the
/// floor (constant inputs) map to zero.
pub fn standardize_channels(data: &mut Tensor) {
    let shape = data.shape().to_vec();
    let c = *shape.last().expect("channel-last tensor");
    let pixels = data.numel() / c;
    let buf = data.data_mut();
    for ch in 0..c {
        let mut mean = 0.0f64;
        for pix in 0..pixels {
            mean += buf[pix * c + ch] as f64;
        }
        mean /= pixels as f64;
        let mut var = 0.0f64;
        for pix in 0..pixels {
            let d = buf[pix * c + ch] as f64 - mean;
            var += d * d;
        }
        var /= pixels as f64;
        let inv = 1.0 / (var.max(VARIANCE_FLOOR as f64)).sqrt();
        for pix in 0..pixels {
            let v = &mut buf[pix * c + ch];
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

/// Encode a frame stack and standardize the result.
pub fn encode(kind: EncoderKind, frames: &Tensor) -> Result<EncodedClip> {
    let mut data = encode_raw(kind, frames)?;
    standardize_channels(&mut data);
    debug_assert!(data.all_finite());
    Ok(EncodedClip { data, encoder: kind })
}

pub fn encode_clip(kind: EncoderKind, clip: &Clip) -> Result<EncodedClip> {
    encode(kind, &clip.frames)
}
