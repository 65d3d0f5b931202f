//! Subsequence sampling strategies and odd-one-out question assembly.
//!
//! Even elements are clips whose frame indices respect the source video's
//! temporal order; the odd element's indices violate it. Frame indices are
//! 1-based throughout this module, matching the inclusive index ranges the
//! strategies are defined over.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::Video;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Consecutive,
    Random,
    ConstrainedConsecutive,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Consecutive => "consecutive",
            Strategy::Random => "random",
            Strategy::ConstrainedConsecutive => "constrained_consecutive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "consecutive" => Ok(Strategy::Consecutive),
            "random" => Ok(Strategy::Random),
            "constrained_consecutive" => Ok(Strategy::ConstrainedConsecutive),
            other => Err(Error::ConfigError(format!("unknown strategy {other:?}"))),
        }
    }

    /// Minimum video length this strategy can sample a question from.
    pub fn min_frames(self, clip_len: usize) -> usize {
        match self {
            Strategy::Consecutive | Strategy::Random => clip_len,
            Strategy::ConstrainedConsecutive => constrained_window_len(clip_len),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A clip: 1-based frame indices into the source video plus the extracted
/// frames as float pixels in [0,1], shape `(clip_len, h, w, 3)`.
#[derive(Debug, Clone)]
pub struct Clip {
    pub indices: Vec<usize>,
    pub frames: Tensor,
    pub is_odd: bool,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_strictly_ascending(&self) -> bool {
        self.indices.windows(2).all(|p| p[0] < p[1])
    }
}

/// One odd-one-out question: `n_even + 1` clips in presentation order with
/// exactly one odd clip at 1-based position `answer`.
#[derive(Debug, Clone)]
pub struct Question {
    pub elements: Vec<Clip>,
    pub answer: usize,
    pub strategy: Strategy,
    pub source_video_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    pub n_even: usize,
    pub clip_len: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_even: 5, clip_len: 6, strategy: Strategy::Random, seed: 7 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_even < 1 {
            return Err(Error::ConfigError("n_even must be >= 1".into()));
        }
        if self.clip_len < 2 {
            // clip_len 1 admits no invalid order, so no odd clip exists.
            return Err(Error::ConfigError("clip_len must be >= 2".into()));
        }
        Ok(())
    }
}

fn require_len(video: &Video, needed: usize) -> Result<()> {
    if video.frame_count() < needed {
        return Err(Error::VideoTooShort { needed, actual: video.frame_count() });
    }
    Ok(())
}

/// Pixels of the indexed frames as floats in [0,1].
fn extract_frames(video: &Video, indices: &[usize]) -> Tensor {
    let (h, w, c) = (video.height(), video.width(), video.channels());
    let mut data = Vec::with_capacity(indices.len() * h * w * c);
    for &idx in indices {
        data.extend(video.frame(idx - 1).iter().map(|&p| p as f32 / 255.0));
    }
    Tensor::new(vec![indices.len(), h, w, c], data).expect("frame dims are consistent")
}

fn clip_from_indices(video: &Video, indices: Vec<usize>, is_odd: bool) -> Clip {
    let frames = extract_frames(video, &indices);
    Clip { indices, frames, is_odd }
}

/// The consecutive clip starting at 1-based frame `start`.
pub fn clip_at(video: &Video, start: usize, clip_len: usize) -> Result<Clip> {
    require_len(video, clip_len)?;
    if start == 0 || start + clip_len - 1 > video.frame_count() {
        return Err(Error::VideoTooShort {
            needed: start + clip_len - 1,
            actual: video.frame_count(),
        });
    }
    let indices = (start..start + clip_len).collect();
    Ok(clip_from_indices(video, indices, false))
}

/// `clip_len` consecutive frames starting at a uniformly random position.
pub fn sample_consecutive(video: &Video, clip_len: usize, rng: &mut ChaCha8Rng) -> Result<Clip> {
    sample_consecutive_in(video, clip_len, 1..=video.frame_count(), rng)
}

/// Consecutive run of `clip_len` frames inside a 1-based inclusive range.
pub fn sample_consecutive_in(
    video: &Video,
    clip_len: usize,
    window: std::ops::RangeInclusive<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Clip> {
    require_len(video, clip_len)?;
    let (lo, hi) = (*window.start(), *window.end());
    if hi - lo + 1 < clip_len {
        return Err(Error::VideoTooShort { needed: clip_len, actual: hi - lo + 1 });
    }
    let start = rng.random_range(lo..=hi - clip_len + 1);
    let indices = (start..start + clip_len).collect();
    Ok(clip_from_indices(video, indices, false))
}

/// A uniformly random `clip_len`-subset of frames, sorted ascending.
pub fn sample_random_ordered(video: &Video, clip_len: usize, rng: &mut ChaCha8Rng) -> Result<Clip> {
    require_len(video, clip_len)?;
    let mut indices = sample_distinct(1..=video.frame_count(), clip_len, rng);
    indices.sort_unstable();
    Ok(clip_from_indices(video, indices, false))
}

/// Uniform `k`-subset of a 1-based inclusive range via partial Fisher-Yates.
fn sample_distinct(
    range: std::ops::RangeInclusive<usize>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut pool: Vec<usize> = range.collect();
    debug_assert!(k <= pool.len());
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Odd clip: `clip_len` distinct frames from `window` (whole video when
/// absent), in a uniformly random non-ascending order. Strictly ascending
/// permutations are rejected and redrawn, so the result always violates
/// the temporal order constraints.
pub fn make_odd_clip(
    video: &Video,
    clip_len: usize,
    window: Option<std::ops::RangeInclusive<usize>>,
    rng: &mut ChaCha8Rng,
) -> Result<Clip> {
    if clip_len < 2 {
        return Err(Error::ConfigError("odd clip needs clip_len >= 2".into()));
    }
    require_len(video, clip_len)?;
    let window = window.unwrap_or(1..=video.frame_count());
    if window.end() - window.start() + 1 < clip_len {
        return Err(Error::VideoTooShort {
            needed: clip_len,
            actual: window.end() - window.start() + 1,
        });
    }
    let mut indices = sample_distinct(window, clip_len, rng);
    indices.sort_unstable();
    loop {
        indices.shuffle(rng);
        if !indices.windows(2).all(|p| p[0] < p[1]) {
            break;
        }
    }
    Ok(clip_from_indices(video, indices, true))
}

pub fn constrained_window_len(clip_len: usize) -> usize {
    // 1.5x the clip length, rounded up.
    clip_len + clip_len.div_ceil(2)
}

/// Contiguous 1-based range of length `ceil(1.5 * clip_len)` at a uniformly
/// random start. All clips of a constrained-consecutive question are drawn
/// inside it, which forces any two even runs to overlap.
pub fn constrained_window(
    video: &Video,
    clip_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<std::ops::RangeInclusive<usize>> {
    let len = constrained_window_len(clip_len);
    require_len(video, len)?;
    let start = rng.random_range(1..=video.frame_count() - len + 1);
    Ok(start..=start + len - 1)
}

/// Assemble one question: `n_even` even clips per the strategy plus one odd
/// clip, odd position uniform over `1..=n_even+1`.
pub fn build_question(
    video: &Video,
    video_id: usize,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Question> {
    cfg.validate()?;
    require_len(video, cfg.strategy.min_frames(cfg.clip_len))?;
    let window = match cfg.strategy {
        Strategy::ConstrainedConsecutive => Some(constrained_window(video, cfg.clip_len, rng)?),
        _ => None,
    };
    let mut evens = Vec::with_capacity(cfg.n_even);
    for _ in 0..cfg.n_even {
        let clip = match cfg.strategy {
            Strategy::Consecutive => sample_consecutive(video, cfg.clip_len, rng)?,
            Strategy::Random => sample_random_ordered(video, cfg.clip_len, rng)?,
            Strategy::ConstrainedConsecutive => sample_consecutive_in(
                video,
                cfg.clip_len,
                window.clone().expect("window set for constrained strategy"),
                rng,
            )?,
        };
        evens.push(clip);
    }
    let odd = make_odd_clip(video, cfg.clip_len, window, rng)?;
    let answer = rng.random_range(1..=cfg.n_even + 1);
    let mut elements = evens;
    elements.insert(answer - 1, odd);
    Ok(Question { elements, answer, strategy: cfg.strategy, source_video_id: video_id })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn video(n: usize) -> Video {
        let (h, w, c) = (8, 8, 3);
        let data: Vec<u8> = (0..n * h * w * c).map(|i| (i / (h * w * c)) as u8).collect();
        Video::new(n, h, w, c, data).unwrap()
    }

    fn test_rng(salt: u64) -> ChaCha8Rng {
        rng::stream(42, &[0xfe, salt])
    }

    #[test]
    fn consecutive_forced_when_video_is_exactly_clip_len() {
        let v = video(6);
        let clip = sample_consecutive(&v, 6, &mut test_rng(0)).unwrap();
        assert_eq!(clip.indices, vec![1, 2, 3, 4, 5, 6]);
        assert!(!clip.is_odd);
    }

    #[test]
    fn consecutive_is_a_run() {
        let v = video(10);
        let mut rng = test_rng(1);
        for _ in 0..200 {
            let clip = sample_consecutive(&v, 3, &mut rng).unwrap();
            let s = clip.indices[0];
            assert!((1..=8).contains(&s));
            assert_eq!(clip.indices, vec![s, s + 1, s + 2]);
        }
    }

    #[test]
    fn random_ordered_is_strictly_ascending() {
        let v = video(12);
        let mut rng = test_rng(2);
        for _ in 0..200 {
            let clip = sample_random_ordered(&v, 5, &mut rng).unwrap();
            assert!(clip.is_strictly_ascending());
            assert!(clip.indices.iter().all(|&i| (1..=12).contains(&i)));
        }
    }

    #[test]
    fn random_ordered_forced_when_n_equals_clip_len() {
        let v = video(4);
        let clip = sample_random_ordered(&v, 4, &mut test_rng(3)).unwrap();
        assert_eq!(clip.indices, vec![1, 2, 3, 4]);
    }

    #[test]
    fn odd_clip_with_two_frames_is_the_swap() {
        // With exactly two drawn indices the only non-ascending order is the
        // descending one.
        let v = video(8);
        let mut rng = test_rng(4);
        for _ in 0..100 {
            let clip = make_odd_clip(&v, 2, None, &mut rng).unwrap();
            assert!(clip.indices[0] > clip.indices[1]);
        }
    }

    #[test]
    fn odd_clip_never_ascending() {
        let v = video(10);
        let mut rng = test_rng(5);
        for _ in 0..2000 {
            let clip = make_odd_clip(&v, 3, None, &mut rng).unwrap();
            assert!(!clip.is_strictly_ascending());
            assert!(clip.is_odd);
        }
    }

    #[test]
    fn odd_clip_respects_window() {
        let v = video(20);
        let mut rng = test_rng(6);
        for _ in 0..200 {
            let clip = make_odd_clip(&v, 4, Some(5..=10), &mut rng).unwrap();
            assert!(clip.indices.iter().all(|&i| (5..=10).contains(&i)));
        }
    }

    #[test]
    fn window_len_and_overlap_bounds() {
        assert_eq!(constrained_window_len(6), 9);
        assert_eq!(constrained_window_len(4), 6);
        // Enumerate all start pairs of runs of length w inside a window of
        // length L: overlap is at least w - (L - w).
        for (w, l, min_overlap) in [(6usize, 9usize, 3usize), (4, 6, 2)] {
            for a in 0..=(l - w) {
                for b in 0..=(l - w) {
                    let lo = a.max(b);
                    let hi = (a + w - 1).min(b + w - 1);
                    let overlap = hi + 1 - lo;
                    assert!(overlap >= min_overlap, "w={w} a={a} b={b} overlap={overlap}");
                }
            }
        }
    }

    #[test]
    fn window_forced_on_minimal_video() {
        let v = video(9);
        let window = constrained_window(&v, 6, &mut test_rng(7)).unwrap();
        assert_eq!(window, 1..=9);
    }

    #[test]
    fn question_shape_and_single_odd() {
        let v = video(24);
        let cfg = SamplerConfig { n_even: 5, clip_len: 6, strategy: Strategy::Random, seed: 0 };
        let q = build_question(&v, 3, &cfg, &mut test_rng(8)).unwrap();
        assert_eq!(q.elements.len(), 6);
        assert_eq!(q.elements.iter().filter(|c| c.is_odd).count(), 1);
        assert!(q.elements[q.answer - 1].is_odd);
        assert_eq!(q.source_video_id, 3);
        for (i, clip) in q.elements.iter().enumerate() {
            assert_eq!(clip.is_strictly_ascending(), i != q.answer - 1);
        }
    }

    #[test]
    fn question_deterministic_for_fixed_stream() {
        let v = video(24);
        let cfg = SamplerConfig::default();
        let a = build_question(&v, 0, &cfg, &mut test_rng(9)).unwrap();
        let b = build_question(&v, 0, &cfg, &mut test_rng(9)).unwrap();
        assert_eq!(a.answer, b.answer);
        for (ca, cb) in a.elements.iter().zip(&b.elements) {
            assert_eq!(ca.indices, cb.indices);
        }
    }

    #[test]
    fn constrained_question_on_short_video_errors() {
        let v = video(8);
        let cfg = SamplerConfig {
            n_even: 5,
            clip_len: 6,
            strategy: Strategy::ConstrainedConsecutive,
            seed: 0,
        };
        let err = build_question(&v, 0, &cfg, &mut test_rng(10)).unwrap_err();
        assert!(matches!(err, Error::VideoTooShort { needed: 9, actual: 8 }));
    }

    #[test]
    fn constrained_question_keeps_all_clips_in_window() {
        let v = video(24);
        let cfg = SamplerConfig {
            n_even: 5,
            clip_len: 6,
            strategy: Strategy::ConstrainedConsecutive,
            seed: 0,
        };
        let mut rng = test_rng(11);
        for _ in 0..50 {
            let q = build_question(&v, 0, &cfg, &mut rng).unwrap();
            let lo = q.elements.iter().flat_map(|c| c.indices.iter()).min().copied().unwrap();
            let hi = q.elements.iter().flat_map(|c| c.indices.iter()).max().copied().unwrap();
            assert!(hi - lo < constrained_window_len(6));
        }
    }

    #[test]
    fn frames_are_unit_scaled() {
        let v = video(10);
        let clip = sample_consecutive(&v, 3, &mut test_rng(12)).unwrap();
        assert_eq!(clip.frames.shape(), &[3, 8, 8, 3]);
        let max = clip.frames.iter().cloned().fold(f32::MIN, f32::max);
        assert!(max <= 1.0 && max > 0.0);
    }

    #[test]
    fn two_element_question_degenerates_to_order_verification() {
        let v = video(24);
        let cfg = SamplerConfig { n_even: 1, clip_len: 6, strategy: Strategy::Random, seed: 0 };
        let q = build_question(&v, 0, &cfg, &mut test_rng(13)).unwrap();
        assert_eq!(q.elements.len(), 2);
        let odd = &q.elements[q.answer - 1];
        let even = &q.elements[q.answer % 2];
        assert!(!odd.is_strictly_ascending());
        assert!(even.is_strictly_ascending());
    }
}
