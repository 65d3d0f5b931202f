//! Video container type, flat binary I/O, and labeled corpus layout.
//!
//! The on-disk container is a deliberately codec-free format so corpora are
//! bit-exact and dependency-free:
//!
//! ```text
//! magic "O3NV" | u32 version=1 | u32 n | u32 h | u32 w | u32 c | n*h*w*c bytes u8
//! ```
//!
//! All integers little-endian; pixel payload is frame-major, row-major.
//! A corpus is a directory of one-video files plus `index.tsv` with one
//! `<relative-path>\t<label-int>\t<split>` line per video.

use crate::error::{Error, Result};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const VIDEO_MAGIC: &[u8; 4] = b"O3NV";
pub const VIDEO_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.tsv";
pub const CLASSES_FILE: &str = "classes.txt";

/// A decoded frame sequence: `n` frames of `h x w` pixels with `c = 3`
/// channels, 8 bits per channel, frame-major row-major layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Video {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<u8>,
}

impl Video {
    pub fn new(n: usize, h: usize, w: usize, c: usize, data: Vec<u8>) -> Result<Self> {
        if n < 1 {
            return Err(Error::DimensionError("frame count must be >= 1".into()));
        }
        if h < 8 || w < 8 {
            return Err(Error::DimensionError(format!(
                "frames must be at least 8x8, got {h}x{w}"
            )));
        }
        if c != 3 {
            return Err(Error::DimensionError(format!("channel count must be 3, got {c}")));
        }
        if data.len() != n * h * w * c {
            return Err(Error::DimensionError(format!(
                "payload length {} does not match {}x{}x{}x{}",
                data.len(),
                n,
                h,
                w,
                c
            )));
        }
        Ok(Self { n, h, w, c, data })
    }

    pub fn frame_count(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Pixels of frame `t` (0-based), `h*w*c` bytes.
    pub fn frame(&self, t: usize) -> &[u8] {
        let len = self.h * self.w * self.c;
        &self.data[t * len..(t + 1) * len]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + self.data.len());
        buf.extend_from_slice(VIDEO_MAGIC);
        buf.extend_from_slice(&VIDEO_VERSION.to_le_bytes());
        for dim in [self.n, self.h, self.w, self.c] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.data);
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::MalformedContainer("header truncated".into()));
        }
        if &bytes[0..4] != VIDEO_MAGIC {
            return Err(Error::MalformedContainer(format!(
                "bad magic {:?}",
                &bytes[0..4]
            )));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VIDEO_VERSION {
            return Err(Error::MalformedContainer(format!(
                "unsupported version {version}"
            )));
        }
        let (n, h, w, c) = (
            u32_at(8) as usize,
            u32_at(12) as usize,
            u32_at(16) as usize,
            u32_at(20) as usize,
        );
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::DimensionError("zero dimension in header".into()));
        }
        let expected = n
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::MalformedContainer("dimension overflow".into()))?;
        let payload = &bytes[24..];
        if payload.len() != expected {
            return Err(Error::MalformedContainer(format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                expected
            )));
        }
        Self::new(n, h, w, c, payload.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::MalformedContainer(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One split of a labeled video dataset.
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub videos: Vec<Video>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl LabeledCorpus {
    pub fn new(
        videos: Vec<Video>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        if videos.len() != labels.len() {
            return Err(Error::DimensionError(format!(
                "{} videos but {} labels",
                videos.len(),
                labels.len()
            )));
        }
        let k = class_names.len();
        for &label in &labels {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
        }
        Ok(Self { videos, labels, class_names, split })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Write corpora (one per split) into `dir` with a shared index file.
pub fn save_corpus_dir(dir: &Path, corpora: &[&LabeledCorpus]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    let mut class_names: Option<&[String]> = None;
    for corpus in corpora {
        match class_names {
            None => class_names = Some(&corpus.class_names),
            Some(names) if names == corpus.class_names.as_slice() => {}
            Some(_) => {
                return Err(Error::ConfigError(
                    "corpora in one directory must share class names".into(),
                ))
            }
        }
        for (i, (video, label)) in corpus.videos.iter().zip(&corpus.labels).enumerate() {
            let rel = format!("{}_{i:04}.o3nv", corpus.split);
            video.save(&dir.join(&rel))?;
            index.push_str(&format!("{rel}\t{label}\t{}\n", corpus.split));
        }
    }
    fs::write(dir.join(INDEX_FILE), index)?;
    if let Some(names) = class_names {
        fs::write(dir.join(CLASSES_FILE), names.join("\n") + "\n")?;
    }
    Ok(())
}

/// Load one split of a corpus directory written by [`save_corpus_dir`].
pub fn load_corpus_split(dir: &Path, split: Split) -> Result<LabeledCorpus> {
    let index = fs::read_to_string(dir.join(INDEX_FILE))?;
    let mut videos = Vec::new();
    let mut labels = Vec::new();
    let mut max_label = 0usize;
    for (lineno, line) in index.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (rel, label, tag) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(r), Some(l), Some(t), None) => (r, l, t),
            _ => {
                return Err(Error::MalformedContainer(format!(
                    "index line {} is not <path>\\t<label>\\t<split>",
                    lineno + 1
                )))
            }
        };
        let label: usize = label.parse().map_err(|_| {
            Error::MalformedContainer(format!("bad label {label:?} on index line {}", lineno + 1))
        })?;
        max_label = max_label.max(label);
        if Split::parse(tag)? == split {
            videos.push(Video::load(&dir.join(rel))?);
            labels.push(label);
        }
    }
    let class_names = match fs::read_to_string(dir.join(CLASSES_FILE)) {
        Ok(text) => text.lines().map(str::to_owned).collect(),
        Err(_) => (0..=max_label).map(|k| format!("class_{k}")).collect(),
    };
    LabeledCorpus::new(videos, labels, class_names, split)
}

/// Paths of every video file referenced by a corpus index (any split).
pub fn corpus_video_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let index = fs::read_to_string(dir.join(INDEX_FILE))?;
    Ok(index
        .lines()
        .filter(|l| !l.is_empty())
        .filter_map(|l| l.split('\t').next())
        .map(|rel| dir.join(rel))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_video(n: usize) -> Video {
        let (h, w, c) = (8, 8, 3);
        let data: Vec<u8> = (0..n * h * w * c).map(|i| (i % 251) as u8).collect();
        Video::new(n, h, w, c, data).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempdir("video_roundtrip");
        let v = sample_video(2);
        let path = dir.join("v.o3nv");
        v.save(&path).unwrap();
        let loaded = Video::load(&path).unwrap();
        assert_eq!(v, loaded);
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tempdir("video_size");
        let v = sample_video(2);
        let path = dir.join("v.o3nv");
        v.save(&path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        // 20-byte dimension header plus 4-byte magic, then 2*8*8*3 = 384 bytes.
        assert_eq!(len, 24 + 384);
    }

    #[test]
    fn minimal_single_frame_video_reloads() {
        let dir = tempdir("video_minimal");
        let v = sample_video(1);
        let path = dir.join("v.o3nv");
        v.save(&path).unwrap();
        assert_eq!(Video::load(&path).unwrap(), v);
    }

    #[test]
    fn bad_magic_is_malformed() {
        let dir = tempdir("video_magic");
        let path = dir.join("v.o3nv");
        let v = sample_video(1);
        v.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Video::load(&path), Err(Error::MalformedContainer(_))));
    }

    #[test]
    fn truncated_payload_is_malformed() {
        // Header says n=10 but only 9 frames of bytes follow.
        let v = sample_video(10);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(VIDEO_MAGIC);
        bytes.extend_from_slice(&VIDEO_VERSION.to_le_bytes());
        for dim in [10u32, 8, 8, 3] {
            bytes.extend_from_slice(&dim.to_le_bytes());
        }
        bytes.extend_from_slice(&v.bytes()[..9 * 8 * 8 * 3]);
        assert!(matches!(
            Video::from_bytes(&bytes),
            Err(Error::MalformedContainer(_))
        ));
    }

    #[test]
    fn zero_dims_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(VIDEO_MAGIC);
        bytes.extend_from_slice(&VIDEO_VERSION.to_le_bytes());
        for dim in [0u32, 8, 8, 3] {
            bytes.extend_from_slice(&dim.to_le_bytes());
        }
        assert!(matches!(Video::from_bytes(&bytes), Err(Error::DimensionError(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let v = sample_video(1);
        let err = v.save(Path::new("/nonexistent-dir/v.o3nv")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn corpus_dir_round_trips_and_filters_split() {
        let dir = tempdir("corpus_rt");
        let names = vec!["a".to_string(), "b".to_string()];
        let train = LabeledCorpus::new(
            vec![sample_video(2), sample_video(3)],
            vec![0, 1],
            names.clone(),
            Split::Train,
        )
        .unwrap();
        let test =
            LabeledCorpus::new(vec![sample_video(4)], vec![1], names.clone(), Split::Test).unwrap();
        save_corpus_dir(&dir, &[&train, &test]).unwrap();

        let train_back = load_corpus_split(&dir, Split::Train).unwrap();
        assert_eq!(train_back.len(), 2);
        assert_eq!(train_back.labels, vec![0, 1]);
        assert_eq!(train_back.class_names, names);
        let test_back = load_corpus_split(&dir, Split::Test).unwrap();
        assert_eq!(test_back.len(), 1);
        assert_eq!(test_back.videos[0], sample_video(4));
        assert_eq!(corpus_video_paths(&dir).unwrap().len(), 3);
    }

    #[test]
    fn corpus_rejects_bad_labels() {
        let err = LabeledCorpus::new(
            vec![sample_video(1)],
            vec![2],
            vec!["a".into(), "b".into()],
            Split::Train,
        )
        .unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2 }));
    }

    pub(crate) fn tempdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("o3n_test_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
