//! Supervised fine-tuning of a classifier whose conv trunk is initialized
//! from an O3N checkpoint, plus video-level inference and evaluation.
//!
//! The classifier reuses the pretraining conv stack verbatim (copied by
//! tensor name) and replaces every fully-connected layer with a freshly
//! initialized head. Fully-connected layers train at a learning-rate
//! multiple of the conv layers and carry dropout at train time.

use crate::checkpoint::Checkpoint;
use crate::clipenc::{encode_clip, EncoderKind};
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::model::{
    accumulate, conv_stack_backward, conv_stack_forward, init_affine, init_classifier_affine,
    init_conv_params, lr_at, ConvSpec, ConvStackCache, TrunkConfig,
};
use crate::ops;
use crate::optim::SgdMomentum;
use crate::rng::{self, tag};
use crate::sampling::{clip_at, sample_consecutive};
use crate::tensor::{ParamSet, Tensor};
use crate::video::{LabeledCorpus, Video};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::PathBuf;

/// How the classifier's conv stack is initialized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitKind {
    Random,
    O3nCheckpoint(PathBuf),
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub head_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_samples: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub fc_lr_multiplier: f64,
    pub dropout: f32,
    pub clip_len: usize,
    pub encoder: EncoderKind,
    pub convs: Vec<ConvSpec>,
    pub init: InitKind,
    pub clips_per_video: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            head_dims: vec![256],
            epochs: 30,
            batch_samples: 128,
            lr_start: 1e-3,
            lr_end: 1e-5,
            fc_lr_multiplier: 10.0,
            dropout: 0.8,
            clip_len: 6,
            encoder: EncoderKind::StackOfDiff,
            convs: TrunkConfig::desk_default(3).convs,
            init: InitKind::Random,
            clips_per_video: 1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 7,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_dims.is_empty() || self.head_dims.contains(&0) {
            return Err(Error::ConfigError("head_dims must be non-empty positive widths".into()));
        }
        if self.fc_lr_multiplier <= 0.0 {
            return Err(Error::ConfigError("fc_lr_multiplier must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::ConfigError("dropout must be in [0, 1)".into()));
        }
        if self.clip_len < 2 {
            return Err(Error::ConfigError("clip_len must be >= 2".into()));
        }
        if self.epochs < 2 {
            return Err(Error::ConfigError("epochs must be >= 2".into()));
        }
        if self.batch_samples == 0 || self.clips_per_video == 0 {
            return Err(Error::ConfigError("batch_samples and clips_per_video must be >= 1".into()));
        }
        if self.lr_start <= 0.0 || self.lr_end <= 0.0 {
            return Err(Error::ConfigError("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.encoder.out_channels(self.clip_len)
    }
}

/// Classifier: the shared conv stack followed by fully-connected layers
/// (rectifier + dropout after each hidden layer) and a final class layer.
#[derive(Debug)]
pub struct ClassifierModel {
    pub params: ParamSet,
    convs: Vec<ConvSpec>,
    head_dims: Vec<usize>,
    n_classes: usize,
    dropout: f32,
    input_hw: (usize, usize),
}

struct HiddenCache {
    input: Tensor,
    pre_relu: Tensor,
    mask: Option<Vec<f32>>,
}

pub struct ClsForwardState {
    convs: ConvStackCache,
    flat: Tensor,
    hidden: Vec<HiddenCache>,
    last_out: Tensor,
}

impl ClassifierModel {
    pub fn new(
        cfg: &FinetuneConfig,
        n_classes: usize,
        input_hw: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_classes < 2 {
            return Err(Error::ConfigError("need at least 2 classes".into()));
        }
        let trunk = TrunkConfig {
            convs: cfg.convs.clone(),
            fc_dim: 1, // unused; only the conv part of the trunk shape matters here
            in_channels: cfg.in_channels(),
        };
        trunk.validate()?;
        let feat = trunk.feature_len(input_hw.0, input_hw.1)?;
        let mut params = ParamSet::new();
        init_conv_params(&mut params, &cfg.convs, cfg.in_channels(), "trunk", rng)?;
        let mut d_in = feat;
        for (j, &width) in cfg.head_dims.iter().enumerate() {
            init_affine(&mut params, &format!("head.fc{j}"), d_in, width, rng)?;
            d_in = width;
        }
        init_classifier_affine(&mut params, "head.out", d_in, n_classes, rng)?;
        Ok(Self {
            params,
            convs: cfg.convs.clone(),
            head_dims: cfg.head_dims.clone(),
            n_classes,
            dropout: cfg.dropout,
            input_hw,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    /// Flattened conv features for a batch of encoded clips.
    pub fn conv_features(&self, x: Tensor) -> Result<Tensor> {
        let (flat, _) = conv_stack_forward(&self.params, &self.convs, "trunk", x)?;
        Ok(flat)
    }

    /// Forward pass. Dropout masks are drawn from `rng` only when
    /// `train` is set; at eval time the pass is deterministic.
    pub fn forward(
        &self,
        x: Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, ClsForwardState)> {
        let (flat, convs) = conv_stack_forward(&self.params, &self.convs, "trunk", x)?;
        let mut hidden = Vec::with_capacity(self.head_dims.len());
        let mut cur = flat.clone();
        for j in 0..self.head_dims.len() {
            let w = self.params.get(&format!("head.fc{j}.w")).unwrap();
            let b = self.params.get(&format!("head.fc{j}.b")).unwrap();
            let pre = ops::affine(&cur, w, b)?;
            let post = ops::relu(&pre);
            let (dropped, mask) = ops::dropout(&post, self.dropout, train, rng);
            hidden.push(HiddenCache { input: cur, pre_relu: pre, mask });
            cur = dropped;
        }
        let logits = ops::affine(
            &cur,
            self.params.get("head.out.w").unwrap(),
            self.params.get("head.out.b").unwrap(),
        )?;
        Ok((logits, ClsForwardState { convs, flat, hidden, last_out: cur }))
    }

    pub fn backward(&mut self, state: ClsForwardState, dlogits: &Tensor) -> Result<()> {
        let ClsForwardState { convs, flat, hidden, last_out } = state;
        let (mut dcur, dw, db) =
            ops::affine_backward(&last_out, self.params.get("head.out.w").unwrap(), dlogits)?;
        accumulate(&mut self.params, "head.out.w", &dw);
        accumulate(&mut self.params, "head.out.b", &db);
        for (j, cache) in hidden.iter().enumerate().rev() {
            let dpost = ops::dropout_backward(cache.mask.as_ref(), &dcur);
            let dpre = ops::relu_backward(&cache.pre_relu, &dpost);
            let name = format!("head.fc{j}");
            let (dinput, dw, db) =
                ops::affine_backward(&cache.input, self.params.get(&format!("{name}.w")).unwrap(), &dpre)?;
            accumulate(&mut self.params, &format!("{name}.w"), &dw);
            accumulate(&mut self.params, &format!("{name}.b"), &db);
            dcur = dinput;
        }
        let _ = flat;
        conv_stack_backward(&mut self.params, &self.convs, "trunk", convs, &dcur)
    }
}

impl ClassifierModel {
    /// Reassemble a trained classifier from raw parts (checkpoint loading).
    pub fn from_parts(
        params: ParamSet,
        convs: Vec<ConvSpec>,
        head_dims: Vec<usize>,
        n_classes: usize,
        dropout: f32,
        input_hw: (usize, usize),
    ) -> Result<Self> {
        for i in 0..convs.len() {
            for suffix in ["w", "b"] {
                let name = format!("trunk.conv{i}.{suffix}");
                if params.get(&name).is_none() {
                    return Err(Error::ShapeMismatch(format!("missing tensor {name:?}")));
                }
            }
        }
        for j in 0..head_dims.len() {
            if params.get(&format!("head.fc{j}.w")).is_none() {
                return Err(Error::ShapeMismatch(format!("missing tensor \"head.fc{j}.w\"")));
            }
        }
        if params.get("head.out.w").is_none() {
            return Err(Error::ShapeMismatch("missing tensor \"head.out.w\"".into()));
        }
        Ok(Self { params, convs, head_dims, n_classes, dropout, input_hw })
    }

    /// Persistable snapshot with enough metadata to rebuild the model.
    pub fn to_checkpoint(&self, extra_meta: Vec<(String, String)>) -> Checkpoint {
        let mut metadata = vec![
            (
                "conv_layers".to_string(),
                self.convs.iter().map(ConvSpec::to_compact).collect::<Vec<_>>().join(","),
            ),
            (
                "head_dims".to_string(),
                self.head_dims.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("n_classes".to_string(), self.n_classes.to_string()),
            ("dropout".to_string(), self.dropout.to_string()),
            ("input_h".to_string(), self.input_hw.0.to_string()),
            ("input_w".to_string(), self.input_hw.1.to_string()),
        ];
        metadata.extend(extra_meta);
        Checkpoint::from_params(&self.params, metadata)
    }

    /// Inverse of [`ClassifierModel::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |key: &str| {
            ckpt.meta(key).ok_or_else(|| {
                Error::MalformedContainer(format!("checkpoint metadata missing {key:?}"))
            })
        };
        let convs = meta("conv_layers")?
            .split(',')
            .map(ConvSpec::parse_compact)
            .collect::<Result<Vec<_>>>()?;
        let head_dims = meta("head_dims")?
            .split(',')
            .map(|s| {
                s.parse::<usize>().map_err(|_| {
                    Error::MalformedContainer(format!("bad head_dims entry {s:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let parse = |key: &str| -> Result<usize> {
            meta(key)?.parse().map_err(|_| {
                Error::MalformedContainer(format!("bad checkpoint metadata for {key:?}"))
            })
        };
        let n_classes = parse("n_classes")?;
        let input_hw = (parse("input_h")?, parse("input_w")?);
        let dropout = meta("dropout")?.parse::<f32>().map_err(|_| {
            Error::MalformedContainer("bad checkpoint metadata for \"dropout\"".into())
        })?;
        Self::from_parts(ckpt.tensors.clone(), convs, head_dims, n_classes, dropout, input_hw)
    }
}

/// Build a classifier whose conv stack is copied bitwise from an O3N
/// checkpoint; fully-connected layers are freshly initialized from `rng`.
pub fn init_from_checkpoint(
    ckpt: &Checkpoint,
    cfg: &FinetuneConfig,
    n_classes: usize,
    input_hw: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<ClassifierModel> {
    let mut model = ClassifierModel::new(cfg, n_classes, input_hw, rng)?;
    for i in 0..cfg.convs.len() {
        for suffix in ["w", "b"] {
            let name = format!("trunk.conv{i}.{suffix}");
            let src = ckpt.tensors.get(&name).ok_or_else(|| {
                Error::ShapeMismatch(format!("checkpoint is missing trunk tensor {name:?}"))
            })?;
            let dst = model.params.get_mut(&name).expect("model has conv params");
            if src.shape() != dst.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{name:?}: checkpoint shape {:?} vs model shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
    }
    Ok(model)
}

fn encode_consecutive_clip(
    video: &Video,
    encoder: EncoderKind,
    clip_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let clip = sample_consecutive(video, clip_len, rng)?;
    Ok(encode_clip(encoder, &clip)?.data)
}

fn stack_samples(samples: &[(Tensor, usize)], order: &[usize]) -> (Tensor, Vec<usize>) {
    let clip_shape = samples[order[0]].0.shape().to_vec();
    let clip_len: usize = clip_shape.iter().product();
    let mut data = Vec::with_capacity(order.len() * clip_len);
    let mut labels = Vec::with_capacity(order.len());
    for &i in order {
        data.extend_from_slice(samples[i].0.data());
        labels.push(samples[i].1);
    }
    let t = Tensor::new(
        vec![order.len(), clip_shape[0], clip_shape[1], clip_shape[2]],
        data,
    )
    .expect("consistent sample shapes");
    (t, labels)
}

/// Keep the first `per_class` videos of every class, preserving order. A
/// zero budget keeps everything. Deterministic, so label-limited protocols
/// reproduce exactly.
pub fn label_budget_subset(corpus: &LabeledCorpus, per_class: usize) -> Result<LabeledCorpus> {
    if per_class == 0 {
        return Ok(corpus.clone());
    }
    let k = corpus.num_classes();
    let mut counts = vec![0usize; k];
    let mut videos = Vec::new();
    let mut labels = Vec::new();
    for (video, &label) in corpus.videos.iter().zip(&corpus.labels) {
        if counts[label] < per_class {
            counts[label] += 1;
            videos.push(video.clone());
            labels.push(label);
        }
    }
    LabeledCorpus::new(videos, labels, corpus.class_names.clone(), corpus.split)
}

/// Supervised fine-tuning: one encoded clip per video per epoch (at a fresh
/// random temporal position, the jittering), conv layers on the configured
/// schedule, fully-connected layers at `fc_lr_multiplier` times that rate.
pub fn finetune(
    corpus: &LabeledCorpus,
    cfg: &FinetuneConfig,
    input_model: Option<ClassifierModel>,
) -> Result<(ClassifierModel, Vec<MetricsRow>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::ConfigError("train split is empty".into()));
    }
    for video in &corpus.videos {
        if video.frame_count() < cfg.clip_len {
            return Err(Error::VideoTooShort {
                needed: cfg.clip_len,
                actual: video.frame_count(),
            });
        }
    }
    let samples_per_epoch = corpus.len() * cfg.clips_per_video;
    if samples_per_epoch < cfg.batch_samples {
        return Err(Error::ConfigError(format!(
            "batch_samples {} exceeds the {samples_per_epoch} samples per epoch",
            cfg.batch_samples
        )));
    }
    let input_hw = (corpus.videos[0].height(), corpus.videos[0].width());
    let mut model = match input_model {
        Some(m) => m,
        None => build_model(cfg, corpus.num_classes(), input_hw)?,
    };
    let mut opt = SgdMomentum::new(&model.params, cfg.momentum, cfg.weight_decay);
    let fc_mult = cfg.fc_lr_multiplier;

    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let conv_lr = lr_at(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)?;
        let mut samples = Vec::with_capacity(samples_per_epoch);
        for (vid, (video, &label)) in corpus.videos.iter().zip(&corpus.labels).enumerate() {
            let mut clip_rng = rng::stream(cfg.seed, &[tag::FT_CLIP, epoch as u64, vid as u64]);
            for _ in 0..cfg.clips_per_video {
                samples.push((
                    encode_consecutive_clip(video, cfg.encoder, cfg.clip_len, &mut clip_rng)?,
                    label,
                ));
            }
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::FT_SHUFFLE, epoch as u64]));

        let mut dropout_rng = rng::stream(cfg.seed, &[tag::FT_DROPOUT, epoch as u64]);
        let mut loss_sum = 0.0f64;
        let mut acc_sum = 0.0f64;
        let mut used = 0usize;
        for batch in order.chunks_exact(cfg.batch_samples) {
            let (x, labels) = stack_samples(&samples, batch);
            let (logits, state) = model.forward(x, true, &mut dropout_rng)?;
            let (loss, probs) = ops::softmax_xent(&logits, &labels)?;
            loss_sum += loss as f64 * labels.len() as f64;
            acc_sum += batch_accuracy(&logits, &labels) * labels.len() as f64;
            used += labels.len();
            let dlogits = ops::softmax_xent_backward(&probs, &labels);
            model.params.zero_grads();
            model.backward(state, &dlogits)?;
            opt.step_with(&mut model.params, |name| {
                if name.starts_with("head.") {
                    (conv_lr * fc_mult) as f32
                } else {
                    conv_lr as f32
                }
            })?;
        }
        metrics.push(MetricsRow {
            epoch,
            phase: "train",
            loss: loss_sum / used as f64,
            accuracy: acc_sum / used as f64,
            lr: conv_lr,
        });
    }
    Ok((model, metrics))
}

fn build_model(
    cfg: &FinetuneConfig,
    n_classes: usize,
    input_hw: (usize, usize),
) -> Result<ClassifierModel> {
    let mut init_rng = rng::stream(cfg.seed, &[tag::FT_INIT]);
    match &cfg.init {
        InitKind::Random => ClassifierModel::new(cfg, n_classes, input_hw, &mut init_rng),
        InitKind::O3nCheckpoint(path) => {
            let ckpt = Checkpoint::load(path)?;
            init_from_checkpoint(&ckpt, cfg, n_classes, input_hw, &mut init_rng)
        }
    }
}

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    correct as f64 / labels.len() as f64
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Classify a whole video: encode every non-overlapping `clip_len`-frame
/// clip from the start, sum per-class log softmax probabilities across
/// clips, and return the argmax class (lowest index on ties) with the
/// summed log-probabilities.
pub fn predict_video(
    model: &ClassifierModel,
    video: &Video,
    clip_len: usize,
    encoder: EncoderKind,
) -> Result<(usize, Vec<f64>)> {
    let m = video.frame_count() / clip_len;
    if m == 0 {
        return Err(Error::VideoTooShort { needed: clip_len, actual: video.frame_count() });
    }
    let clips: Vec<Tensor> = (0..m)
        .map(|i| {
            let clip = clip_at(video, i * clip_len + 1, clip_len)?;
            Ok(encode_clip(encoder, &clip)?.data)
        })
        .collect::<Result<Vec<_>>>()?;
    let shape = clips[0].shape().to_vec();
    let mut data = Vec::with_capacity(m * clips[0].numel());
    for clip in &clips {
        data.extend_from_slice(clip.data());
    }
    let x = Tensor::new(vec![m, shape[0], shape[1], shape[2]], data)?;
    let mut eval_rng = rng::stream(0, &[]);
    let (logits, _) = model.forward(x, false, &mut eval_rng)?;

    let classes = model.n_classes();
    let mut log_probs = vec![0.0f64; classes];
    for row in logits.data().chunks(classes) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let denom: f64 = row.iter().map(|&v| ((v as f64) - max).exp()).sum();
        let log_denom = denom.ln();
        for (acc, &v) in log_probs.iter_mut().zip(row) {
            *acc += (v as f64) - max - log_denom;
        }
    }
    let mut best = 0usize;
    for (i, &v) in log_probs.iter().enumerate() {
        if v > log_probs[best] {
            best = i;
        }
    }
    Ok((best, log_probs))
}

/// Accuracy summary over a test split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    pub total: usize,
}

impl EvalReport {
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(name);
            for &count in row {
                let _ = write!(out, ",{count}");
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "overall_accuracy={:.6}", self.overall_accuracy);
        let _ = writeln!(out, "total_videos={}", self.total);
        for (name, acc) in self.class_names.iter().zip(&self.per_class_accuracy) {
            let _ = writeln!(out, "accuracy_{name}={acc:.6}");
        }
        out
    }
}

/// Run [`predict_video`] over every video of a split and aggregate.
pub fn evaluate(
    model: &ClassifierModel,
    corpus: &LabeledCorpus,
    clip_len: usize,
    encoder: EncoderKind,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::ConfigError("evaluation split is empty".into()));
    }
    let k = corpus.num_classes();
    let mut confusion = vec![vec![0usize; k]; k];
    for (video, &label) in corpus.videos.iter().zip(&corpus.labels) {
        let (pred, _) = predict_video(model, video, clip_len, encoder)?;
        confusion[label][pred] += 1;
    }
    let per_class_accuracy: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(kk, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[kk] as f64 / total as f64
            }
        })
        .collect();
    let trace: usize = (0..k).map(|kk| confusion[kk][kk]).sum();
    let total = corpus.len();
    Ok(EvalReport {
        class_names: corpus.class_names.clone(),
        confusion,
        per_class_accuracy,
        overall_accuracy: trace as f64 / total as f64,
        total,
    })
}
