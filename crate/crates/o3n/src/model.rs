//! The multi-branch odd-one-out network and its self-supervised training
//! loop.
//!
//! Every branch runs the same trunk (shared weights): a configurable conv
//! stack followed by one fully-connected layer of width `fc_dim`. Branch
//! activations are merged by a fusion layer (concatenation, or the sum of
//! all pairwise later-minus-earlier activation differences), then a
//! two-layer head classifies which of the `n_even + 1` positions holds the
//! odd clip.

use crate::checkpoint::Checkpoint;
use crate::clipenc::{encode_clip, EncoderKind};
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::ops;
use crate::optim::SgdMomentum;
use crate::rng::{self, tag};
use crate::sampling::{build_question, Question, SamplerConfig, Strategy};
use crate::tensor::{ParamSet, Tensor};
use crate::video::Video;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// One convolutional stage: conv + rectifier, optionally followed by max
/// pooling (`pool > 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: usize,
}

impl ConvSpec {
    pub fn to_compact(&self) -> String {
        format!(
            "{}:{}:{}:{}:{}",
            self.out_channels, self.kernel, self.stride, self.pad, self.pool
        )
    }

    pub fn parse_compact(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 5 {
            return Err(Error::ConfigError(format!(
                "conv spec {s:?} must be out:kernel:stride:pad:pool"
            )));
        }
        let mut nums = parts.iter().map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::ConfigError(format!("bad number {p:?} in conv spec {s:?}")))
        });
        Ok(Self {
            out_channels: nums.next().unwrap()?,
            kernel: nums.next().unwrap()?,
            stride: nums.next().unwrap()?,
            pad: nums.next().unwrap()?,
            pool: nums.next().unwrap()?,
        })
    }
}

/// Shared trunk: conv stack plus the first fully-connected layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrunkConfig {
    pub convs: Vec<ConvSpec>,
    pub fc_dim: usize,
    pub in_channels: usize,
}

impl TrunkConfig {
    /// Desk-scale default trunk for 32x32 inputs.
    pub fn desk_default(in_channels: usize) -> Self {
        Self {
            convs: vec![
                ConvSpec { out_channels: 16, kernel: 5, stride: 2, pad: 2, pool: 2 },
                ConvSpec { out_channels: 32, kernel: 3, stride: 1, pad: 1, pool: 2 },
                ConvSpec { out_channels: 64, kernel: 3, stride: 1, pad: 1, pool: 2 },
            ],
            fc_dim: 128,
            in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return Err(Error::ConfigError("trunk needs at least one conv layer".into()));
        }
        if self.fc_dim == 0 || self.in_channels == 0 {
            return Err(Error::ConfigError("trunk widths must be >= 1".into()));
        }
        for (i, spec) in self.convs.iter().enumerate() {
            if spec.out_channels == 0 || spec.kernel == 0 || spec.stride == 0 || spec.pool == 0 {
                return Err(Error::ConfigError(format!("conv layer {i} has a zero field")));
            }
        }
        Ok(())
    }

    /// Spatial dims and channels after each conv(+pool) stage.
    pub fn stage_dims(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        let mut dims = Vec::with_capacity(self.convs.len());
        let (mut h, mut w) = (h, w);
        for (i, spec) in self.convs.iter().enumerate() {
            if h + 2 * spec.pad < spec.kernel || w + 2 * spec.pad < spec.kernel {
                return Err(Error::ConfigError(format!(
                    "conv layer {i}: kernel {} exceeds padded input {}x{}",
                    spec.kernel,
                    h + 2 * spec.pad,
                    w + 2 * spec.pad
                )));
            }
            h = (h + 2 * spec.pad - spec.kernel) / spec.stride + 1;
            w = (w + 2 * spec.pad - spec.kernel) / spec.stride + 1;
            if spec.pool > 1 {
                if h < spec.pool || w < spec.pool {
                    return Err(Error::ConfigError(format!(
                        "conv layer {i}: pool {} exceeds {}x{}",
                        spec.pool, h, w
                    )));
                }
                h /= spec.pool;
                w /= spec.pool;
            }
            dims.push((h, w, spec.out_channels));
        }
        Ok(dims)
    }

    /// Flattened feature length entering the trunk fully-connected layer.
    pub fn feature_len(&self, h: usize, w: usize) -> Result<usize> {
        let (fh, fw, fc) = *self.stage_dims(h, w)?.last().expect("validated non-empty");
        Ok(fh * fw * fc)
    }

    pub fn to_compact(&self) -> String {
        self.convs.iter().map(ConvSpec::to_compact).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionKind {
    Concat,
    SumOfDiff,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Concat => "concat",
            FusionKind::SumOfDiff => "sum_of_diff",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "sum_of_diff" => Ok(FusionKind::SumOfDiff),
            other => Err(Error::ConfigError(format!("unknown fusion {other:?}"))),
        }
    }

    pub fn fused_len(self, branches: usize, fc_dim: usize) -> usize {
        match self {
            FusionKind::Concat => branches * fc_dim,
            FusionKind::SumOfDiff => fc_dim,
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Self-supervised training configuration. Defaults follow the reference
/// protocol: six-element questions of six-frame clips, 200 epochs of
/// 64-question batches, learning rate falling geometrically from 0.01 to
/// 0.0001.
#[derive(Debug, Clone)]
pub struct O3NConfig {
    pub n_even: usize,
    pub clip_len: usize,
    pub strategy: Strategy,
    pub encoder: EncoderKind,
    pub fusion: FusionKind,
    pub convs: Vec<ConvSpec>,
    pub fc_dim: usize,
    pub head_dim: usize,
    pub epochs: usize,
    pub batch_questions: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub val_fraction: f64,
    pub questions_per_video: usize,
    pub seed: u64,
}

impl Default for O3NConfig {
    fn default() -> Self {
        Self {
            n_even: 5,
            clip_len: 6,
            strategy: Strategy::Random,
            encoder: EncoderKind::DynamicImage,
            fusion: FusionKind::SumOfDiff,
            convs: TrunkConfig::desk_default(3).convs,
            fc_dim: 128,
            head_dim: 128,
            epochs: 200,
            batch_questions: 64,
            lr_start: 0.01,
            lr_end: 0.0001,
            momentum: 0.9,
            weight_decay: 5e-4,
            val_fraction: 0.1,
            questions_per_video: 1,
            seed: 7,
        }
    }
}

impl O3NConfig {
    pub fn branches(&self) -> usize {
        self.n_even + 1
    }

    pub fn trunk(&self) -> TrunkConfig {
        TrunkConfig {
            convs: self.convs.clone(),
            fc_dim: self.fc_dim,
            in_channels: self.encoder.out_channels(self.clip_len),
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_even: self.n_even,
            clip_len: self.clip_len,
            strategy: self.strategy,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler().validate()?;
        self.trunk().validate()?;
        if self.head_dim == 0 {
            return Err(Error::ConfigError("head_dim must be >= 1".into()));
        }
        if self.epochs < 2 {
            return Err(Error::ConfigError("epochs must be >= 2".into()));
        }
        if self.batch_questions == 0 {
            return Err(Error::ConfigError("batch_questions must be >= 1".into()));
        }
        if self.lr_start <= 0.0 || self.lr_end <= 0.0 {
            return Err(Error::ConfigError("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::ConfigError("val_fraction must be in [0, 1)".into()));
        }
        if self.questions_per_video == 0 {
            return Err(Error::ConfigError("questions_per_video must be >= 1".into()));
        }
        Ok(())
    }
}

/// Geometric interpolation from `lr_start` at epoch 0 to `lr_end` at the
/// final epoch; the ratio between consecutive epochs is constant.
pub fn lr_at(epoch: usize, epochs: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if epochs < 2 {
        return Err(Error::ConfigError("lr schedule needs at least 2 epochs".into()));
    }
    if epoch >= epochs {
        return Err(Error::ConfigError(format!("epoch {epoch} out of range 0..{epochs}")));
    }
    if lr_start <= 0.0 || lr_end <= 0.0 {
        return Err(Error::ConfigError("learning rates must be positive".into()));
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    Ok(lr_start * (lr_end / lr_start).powf(t))
}

/// Coefficients of the sum-of-difference fusion: expanding
/// `sum_{j>i} (v_j - v_i)` gives branch `k` (1-based) the coefficient
/// `2k - 1 - branches`.
pub fn sod_coefficients(branches: usize) -> Vec<f32> {
    (1..=branches).map(|k| (2 * k) as f32 - 1.0 - branches as f32).collect()
}

/// Concatenate per-branch activations `(B, d)` into `(B, branches*d)` in
/// presentation order.
pub fn fuse_concat(activations: &[Tensor]) -> Result<Tensor> {
    let (batch, d) = check_branch_shapes(activations)?;
    let branches = activations.len();
    let mut out = vec![0.0f32; batch * branches * d];
    for (i, v) in activations.iter().enumerate() {
        for b in 0..batch {
            let dst = b * branches * d + i * d;
            out[dst..dst + d].copy_from_slice(&v.data()[b * d..(b + 1) * d]);
        }
    }
    Tensor::new(vec![batch, branches * d], out)
}

pub fn fuse_concat_backward(dfused: &Tensor, branches: usize) -> Vec<Tensor> {
    let batch = dfused.shape()[0];
    let d = dfused.shape()[1] / branches;
    (0..branches)
        .map(|i| {
            let mut out = vec![0.0f32; batch * d];
            for b in 0..batch {
                let src = b * branches * d + i * d;
                out[b * d..(b + 1) * d].copy_from_slice(&dfused.data()[src..src + d]);
            }
            Tensor::new(vec![batch, d], out).expect("shape consistent")
        })
        .collect()
}

/// Sum of all pairwise later-minus-earlier branch differences, reduced to
/// one `(B, d)` vector via the closed-form coefficients.
pub fn fuse_sod(activations: &[Tensor]) -> Result<Tensor> {
    let (batch, d) = check_branch_shapes(activations)?;
    let coeffs = sod_coefficients(activations.len());
    let mut out = vec![0.0f32; batch * d];
    for (v, &c) in activations.iter().zip(&coeffs) {
        for (o, &x) in out.iter_mut().zip(v.data()) {
            *o += c * x;
        }
    }
    Tensor::new(vec![batch, d], out)
}

pub fn fuse_sod_backward(dfused: &Tensor, branches: usize) -> Vec<Tensor> {
    sod_coefficients(branches)
        .iter()
        .map(|&c| {
            let data = dfused.data().iter().map(|&g| c * g).collect();
            Tensor::new(dfused.shape().to_vec(), data).expect("same shape")
        })
        .collect()
}

fn check_branch_shapes(activations: &[Tensor]) -> Result<(usize, usize)> {
    let first = activations
        .first()
        .ok_or_else(|| Error::ShapeError("fusion needs at least one branch".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeError(format!("branch activations must be (B, d), got {shape:?}")));
    }
    for v in activations {
        if v.shape() != shape {
            return Err(Error::ShapeError(format!(
                "branch activation shapes differ: {:?} vs {shape:?}",
                v.shape()
            )));
        }
    }
    Ok((shape[0], shape[1]))
}

/// Forward cache of a conv(+pool) stack, shared by the O3N trunk and the
/// fine-tuned classifier.
pub struct ConvStackCache {
    conv_inputs: Vec<Tensor>,
    conv_pre_relu: Vec<Tensor>,
    pool_inputs: Vec<Option<Tensor>>,
    pool_argmax: Vec<Option<Vec<u32>>>,
    out_shape: Vec<usize>,
}

/// Run the conv stack under `prefix.conv{i}` parameter names and flatten
/// the result to `(B, features)`.
pub(crate) fn conv_stack_forward(
    params: &ParamSet,
    convs: &[ConvSpec],
    prefix: &str,
    x: Tensor,
) -> Result<(Tensor, ConvStackCache)> {
    let layers = convs.len();
    let mut conv_inputs = Vec::with_capacity(layers);
    let mut conv_pre_relu = Vec::with_capacity(layers);
    let mut pool_inputs = Vec::with_capacity(layers);
    let mut pool_argmax = Vec::with_capacity(layers);
    let mut cur = x;
    for (i, spec) in convs.iter().enumerate() {
        let w = params.get(&format!("{prefix}.conv{i}.w")).expect("conv weights present");
        let b = params.get(&format!("{prefix}.conv{i}.b")).expect("conv biases present");
        let pre = ops::conv2d(&cur, w, Some(b), spec.stride, spec.pad)?;
        let post = ops::relu(&pre);
        conv_inputs.push(cur);
        conv_pre_relu.push(pre);
        if spec.pool > 1 {
            let (pooled, argmax) = ops::maxpool(&post, spec.pool, spec.pool)?;
            pool_inputs.push(Some(post));
            pool_argmax.push(Some(argmax));
            cur = pooled;
        } else {
            pool_inputs.push(None);
            pool_argmax.push(None);
            cur = post;
        }
    }
    let out_shape = cur.shape().to_vec();
    let flat = ops::flatten(cur)?;
    Ok((flat, ConvStackCache { conv_inputs, conv_pre_relu, pool_inputs, pool_argmax, out_shape }))
}

/// Backward through the conv stack, accumulating parameter gradients.
pub(crate) fn conv_stack_backward(
    params: &mut ParamSet,
    convs: &[ConvSpec],
    prefix: &str,
    cache: ConvStackCache,
    dflat: &Tensor,
) -> Result<()> {
    let mut dcur = dflat.clone().reshaped(cache.out_shape.clone())?;
    for i in (0..convs.len()).rev() {
        let spec = &convs[i];
        if spec.pool > 1 {
            let post = cache.pool_inputs[i].as_ref().expect("pooled layer has input");
            let argmax = cache.pool_argmax[i].as_ref().expect("pooled layer has argmax");
            dcur = ops::maxpool_backward(argmax, post.shape(), &dcur);
        }
        let dpre = ops::relu_backward(&cache.conv_pre_relu[i], &dcur);
        let w = params.get(&format!("{prefix}.conv{i}.w")).expect("conv weights present");
        let (dx, dk, db) =
            ops::conv2d_backward(&cache.conv_inputs[i], w, spec.stride, spec.pad, &dpre)?;
        accumulate(params, &format!("{prefix}.conv{i}.w"), &dk);
        accumulate(params, &format!("{prefix}.conv{i}.b"), &db);
        dcur = dx;
    }
    Ok(())
}

/// Per-branch forward cache: everything the trunk backward needs.
pub struct BranchCache {
    convs: ConvStackCache,
    flat: Tensor,
    fc_pre_relu: Tensor,
}

struct HeadCache {
    fused: Tensor,
    fc1_pre_relu: Tensor,
    fc1_post: Tensor,
}

/// Full forward state of one question batch, consumed by the backward pass.
pub struct ForwardState {
    branch_caches: Vec<BranchCache>,
    head: HeadCache,
}

/// The odd-one-out network: shared trunk weights, fusion layer, two-layer
/// classification head over `branches` positions.
pub struct O3NModel {
    pub params: ParamSet,
    trunk: TrunkConfig,
    fusion: FusionKind,
    branches: usize,
    head_dim: usize,
    input_hw: (usize, usize),
}

impl O3NModel {
    pub fn new(
        trunk: TrunkConfig,
        fusion: FusionKind,
        branches: usize,
        head_dim: usize,
        input_hw: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        trunk.validate()?;
        if branches < 2 {
            return Err(Error::ConfigError("need at least 2 branches".into()));
        }
        let mut params = ParamSet::new();
        init_trunk_params(&mut params, &trunk, input_hw, rng)?;
        let fused_len = fusion.fused_len(branches, trunk.fc_dim);
        init_affine(&mut params, "head.fc1", fused_len, head_dim, rng)?;
        init_classifier_affine(&mut params, "head.fc2", head_dim, branches, rng)?;
        Ok(Self { params, trunk, fusion, branches, head_dim, input_hw })
    }

    pub fn trunk_config(&self) -> &TrunkConfig {
        &self.trunk
    }

    pub fn fusion(&self) -> FusionKind {
        self.fusion
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    /// Shared-trunk forward over a batch of encoded clips `(B, h, w, c_in)`.
    /// Returns `(B, fc_dim)` activations.
    pub fn forward_branch(&self, x: Tensor) -> Result<(Tensor, BranchCache)> {
        trunk_forward(&self.params, &self.trunk, x)
    }

    /// Forward a batch assembled as one tensor per branch position.
    pub fn forward_batch(&self, branch_inputs: Vec<Tensor>) -> Result<(Tensor, ForwardState)> {
        if branch_inputs.len() != self.branches {
            return Err(Error::ShapeError(format!(
                "{} branch inputs for a {}-branch network",
                branch_inputs.len(),
                self.branches
            )));
        }
        let mut caches = Vec::with_capacity(self.branches);
        let mut activations = Vec::with_capacity(self.branches);
        for x in branch_inputs {
            let (v, cache) = self.forward_branch(x)?;
            activations.push(v);
            caches.push(cache);
        }
        let fused = match self.fusion {
            FusionKind::Concat => fuse_concat(&activations)?,
            FusionKind::SumOfDiff => fuse_sod(&activations)?,
        };
        let fc1_pre = ops::affine(
            &fused,
            self.params.get("head.fc1.w").unwrap(),
            self.params.get("head.fc1.b").unwrap(),
        )?;
        let fc1_post = ops::relu(&fc1_pre);
        let logits = ops::affine(
            &fc1_post,
            self.params.get("head.fc2.w").unwrap(),
            self.params.get("head.fc2.b").unwrap(),
        )?;
        let state = ForwardState {
            branch_caches: caches,
            head: HeadCache { fused, fc1_pre_relu: fc1_pre, fc1_post },
        };
        Ok((logits, state))
    }

    /// Accumulate parameter gradients for one batch. Branch gradients sum
    /// into the shared trunk tensors.
    pub fn backward_batch(&mut self, state: ForwardState, dlogits: &Tensor) -> Result<()> {
        let ForwardState { branch_caches, head } = state;
        let (dfc1_post, dw2, db2) = ops::affine_backward(
            &head.fc1_post,
            self.params.get("head.fc2.w").unwrap(),
            dlogits,
        )?;
        accumulate(&mut self.params, "head.fc2.w", &dw2);
        accumulate(&mut self.params, "head.fc2.b", &db2);
        let dfc1_pre = ops::relu_backward(&head.fc1_pre_relu, &dfc1_post);
        let (dfused, dw1, db1) = ops::affine_backward(
            &head.fused,
            self.params.get("head.fc1.w").unwrap(),
            &dfc1_pre,
        )?;
        accumulate(&mut self.params, "head.fc1.w", &dw1);
        accumulate(&mut self.params, "head.fc1.b", &db1);

        let branch_grads = match self.fusion {
            FusionKind::Concat => fuse_concat_backward(&dfused, self.branches),
            FusionKind::SumOfDiff => fuse_sod_backward(&dfused, self.branches),
        };
        for (cache, dv) in branch_caches.into_iter().zip(branch_grads) {
            trunk_backward(&mut self.params, &self.trunk, cache, &dv)?;
        }
        Ok(())
    }

    /// Logits for a single already-sampled question.
    pub fn o3n_forward(&self, question: &Question, encoder: EncoderKind) -> Result<Vec<f32>> {
        let inputs = encode_question(question, encoder)?
            .clips
            .into_iter()
            .map(|clip| {
                let shape = clip.shape().to_vec();
                clip.reshaped(vec![1, shape[0], shape[1], shape[2]])
            })
            .collect::<Result<Vec<_>>>()?;
        let (logits, _) = self.forward_batch(inputs)?;
        Ok(logits.data().to_vec())
    }
}

pub(crate) fn init_affine(
    params: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let std = (2.0 / d_in as f32).sqrt();
    params.insert(format!("{prefix}.w"), Tensor::randn(&[d_in, d_out], std, rng))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?;
    Ok(())
}

/// Final classifier layers start near zero so the first logits sit at the
/// uniform distribution. The variance-preserving init on the last layer
/// produced initial losses an order of magnitude above ln(classes) here
/// (the fusion coefficients amplify activations), and the resulting early
/// updates left most trunk rectifier units permanently dead.
pub(crate) fn init_classifier_affine(
    params: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let std = 0.01 * (2.0 / d_in as f32).sqrt();
    params.insert(format!("{prefix}.w"), Tensor::randn(&[d_in, d_out], std, rng))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?;
    Ok(())
}

/// Insert He-initialized conv parameters under `prefix.conv{i}`.
pub(crate) fn init_conv_params(
    params: &mut ParamSet,
    convs: &[ConvSpec],
    in_channels: usize,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut c_in = in_channels;
    for (i, spec) in convs.iter().enumerate() {
        let fan_in = (spec.kernel * spec.kernel * c_in) as f32;
        let std = (2.0 / fan_in).sqrt();
        params.insert(
            format!("{prefix}.conv{i}.w"),
            Tensor::randn(&[spec.kernel, spec.kernel, c_in, spec.out_channels], std, rng),
        )?;
        params.insert(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[spec.out_channels]))?;
        c_in = spec.out_channels;
    }
    Ok(())
}

fn init_trunk_params(
    params: &mut ParamSet,
    trunk: &TrunkConfig,
    input_hw: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_conv_params(params, &trunk.convs, trunk.in_channels, "trunk", rng)?;
    let feat = trunk.feature_len(input_hw.0, input_hw.1)?;
    init_affine(params, "trunk.fc", feat, trunk.fc_dim, rng)?;
    Ok(())
}

/// Conv stack + trunk fully-connected layer with rectifier.
pub(crate) fn trunk_forward(
    params: &ParamSet,
    trunk: &TrunkConfig,
    x: Tensor,
) -> Result<(Tensor, BranchCache)> {
    let (flat, convs) = conv_stack_forward(params, &trunk.convs, "trunk", x)?;
    let fc_pre = ops::affine(
        &flat,
        params.get("trunk.fc.w").expect("trunk fc present"),
        params.get("trunk.fc.b").expect("trunk fc present"),
    )?;
    let out = ops::relu(&fc_pre);
    Ok((out, BranchCache { convs, flat, fc_pre_relu: fc_pre }))
}

pub(crate) fn trunk_backward(
    params: &mut ParamSet,
    trunk: &TrunkConfig,
    cache: BranchCache,
    dv: &Tensor,
) -> Result<()> {
    let dfc_pre = ops::relu_backward(&cache.fc_pre_relu, dv);
    let (dflat, dw, db) = ops::affine_backward(
        &cache.flat,
        params.get("trunk.fc.w").expect("trunk fc present"),
        &dfc_pre,
    )?;
    accumulate(params, "trunk.fc.w", &dw);
    accumulate(params, "trunk.fc.b", &db);
    conv_stack_backward(params, &trunk.convs, "trunk", cache.convs, &dflat)
}

pub(crate) fn accumulate(params: &mut ParamSet, name: &str, grad: &Tensor) {
    params
        .get_mut(name)
        .unwrap_or_else(|| panic!("parameter {name:?} exists"))
        .add_to_grad(grad.data());
}

/// A question reduced to its encoded clips and 0-based answer label.
pub struct EncodedQuestion {
    pub clips: Vec<Tensor>,
    pub answer: usize,
}

pub fn encode_question(question: &Question, encoder: EncoderKind) -> Result<EncodedQuestion> {
    let clips = question
        .elements
        .iter()
        .map(|clip| encode_clip(encoder, clip).map(|e| e.data))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedQuestion { clips, answer: question.answer - 1 })
}

/// Stack per-branch clips of a question batch into one tensor per branch
/// position.
pub fn branch_batches(questions: &[&EncodedQuestion]) -> Result<Vec<Tensor>> {
    let first = questions
        .first()
        .ok_or_else(|| Error::ShapeError("empty question batch".into()))?;
    let branches = first.clips.len();
    let clip_shape = first.clips[0].shape().to_vec();
    let clip_len: usize = clip_shape.iter().product();
    let batch = questions.len();
    let mut out = Vec::with_capacity(branches);
    for i in 0..branches {
        let mut data = Vec::with_capacity(batch * clip_len);
        for q in questions {
            if q.clips.len() != branches || q.clips[i].shape() != clip_shape {
                return Err(Error::ShapeError("ragged question batch".into()));
            }
            data.extend_from_slice(q.clips[i].data());
        }
        out.push(Tensor::new(
            vec![batch, clip_shape[0], clip_shape[1], clip_shape[2]],
            data,
        )?);
    }
    Ok(out)
}

fn batch_labels(questions: &[&EncodedQuestion]) -> Vec<usize> {
    questions.iter().map(|q| q.answer).collect()
}

fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let mut correct = 0usize;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Generate and encode this epoch's questions for the given video subset.
/// Each `(epoch, video)` pair has its own RNG stream, so regeneration per
/// epoch (the temporal jittering) is reproducible and parallelizable.
fn epoch_questions(
    videos: &[Video],
    ids: &[usize],
    cfg: &O3NConfig,
    stream_tag: u64,
    epoch: u64,
) -> Result<Vec<EncodedQuestion>> {
    let sampler = cfg.sampler();
    ids.par_iter()
        .map(|&vid| {
            let mut rng = rng::stream(cfg.seed, &[stream_tag, epoch, vid as u64]);
            (0..cfg.questions_per_video)
                .map(|_| {
                    let q = build_question(&videos[vid], vid, &sampler, &mut rng)?;
                    encode_question(&q, cfg.encoder)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()
        .map(|nested| nested.into_iter().flatten().collect())
}

fn eval_questions(model: &O3NModel, questions: &[EncodedQuestion], batch: usize) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0f64;
    let mut acc_sum = 0.0f64;
    let mut count = 0usize;
    for chunk in questions.chunks(batch) {
        let refs: Vec<&EncodedQuestion> = chunk.iter().collect();
        let inputs = branch_batches(&refs)?;
        let labels = batch_labels(&refs);
        let (logits, _) = model.forward_batch(inputs)?;
        let (loss, _) = ops::softmax_xent(&logits, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        acc_sum += accuracy_of(&logits, &labels) * chunk.len() as f64;
        count += chunk.len();
    }
    Ok((loss_sum / count as f64, acc_sum / count as f64))
}

/// Outcome of a pretraining run.
pub struct PretrainOutput {
    pub model: O3NModel,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub final_val_accuracy: Option<f64>,
}

/// Self-supervised training on unlabeled videos. Questions are regenerated
/// from scratch every epoch (temporal jittering); a held-out fraction of
/// videos provides the validation accuracy.
pub fn pretrain(videos: &[Video], cfg: &O3NConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::ConfigError("pretrain needs at least one video".into()));
    }
    let needed = cfg.strategy.min_frames(cfg.clip_len);
    for (i, v) in videos.iter().enumerate() {
        if v.frame_count() < needed {
            return Err(Error::VideoTooShort { needed, actual: videos[i].frame_count() });
        }
    }
    let (h, w) = (videos[0].height(), videos[0].width());
    for v in videos {
        if v.height() != h || v.width() != w {
            return Err(Error::ShapeError("videos must share spatial dims".into()));
        }
    }

    let mut ids: Vec<usize> = (0..videos.len()).collect();
    ids.shuffle(&mut rng::stream(cfg.seed, &[tag::VAL_SPLIT]));
    let val_count = ((videos.len() as f64) * cfg.val_fraction).round() as usize;
    let (val_ids, train_ids) = ids.split_at(val_count.min(videos.len().saturating_sub(1)));
    let (val_ids, train_ids) = (val_ids.to_vec(), train_ids.to_vec());
    if train_ids.len() * cfg.questions_per_video < cfg.batch_questions {
        return Err(Error::ConfigError(format!(
            "batch_questions {} exceeds the {} questions generated per epoch",
            cfg.batch_questions,
            train_ids.len() * cfg.questions_per_video
        )));
    }

    let mut model = O3NModel::new(
        cfg.trunk(),
        cfg.fusion,
        cfg.branches(),
        cfg.head_dim,
        (h, w),
        &mut rng::stream(cfg.seed, &[tag::WEIGHT_INIT]),
    )?;
    let mut opt = SgdMomentum::new(&model.params, cfg.momentum, cfg.weight_decay);

    // Validation questions are fixed for the whole run.
    let val_questions = epoch_questions(videos, &val_ids, cfg, tag::VAL_QUESTION, 0)?;

    let mut metrics = Vec::with_capacity(cfg.epochs * 2);
    let mut final_val = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)?;
        let mut questions = epoch_questions(videos, &train_ids, cfg, tag::QUESTION, epoch as u64)?;
        let mut order: Vec<usize> = (0..questions.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::EPOCH_SHUFFLE, epoch as u64]));
        apply_order(&mut questions, &order);

        let mut loss_sum = 0.0f64;
        let mut acc_sum = 0.0f64;
        let mut used = 0usize;
        for chunk in questions.chunks_exact(cfg.batch_questions) {
            let refs: Vec<&EncodedQuestion> = chunk.iter().collect();
            let inputs = branch_batches(&refs)?;
            let labels = batch_labels(&refs);
            let (logits, state) = model.forward_batch(inputs)?;
            let (loss, probs) = ops::softmax_xent(&logits, &labels)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            acc_sum += accuracy_of(&logits, &labels) * chunk.len() as f64;
            used += chunk.len();
            let dlogits = ops::softmax_xent_backward(&probs, &labels);
            model.params.zero_grads();
            model.backward_batch(state, &dlogits)?;
            opt.step(&mut model.params, lr as f32)?;
        }
        metrics.push(MetricsRow {
            epoch,
            phase: "train",
            loss: loss_sum / used as f64,
            accuracy: acc_sum / used as f64,
            lr,
        });
        if !val_questions.is_empty() {
            let (val_loss, val_acc) = eval_questions(&model, &val_questions, cfg.batch_questions)?;
            metrics.push(MetricsRow { epoch, phase: "val", loss: val_loss, accuracy: val_acc, lr });
            final_val = Some(val_acc);
        }
    }

    let metadata = checkpoint_metadata(cfg, (h, w), final_val);
    let checkpoint = Checkpoint::from_params(&model.params, metadata);
    Ok(PretrainOutput { model, checkpoint, metrics, final_val_accuracy: final_val })
}

fn apply_order<T>(items: &mut Vec<T>, order: &[usize]) {
    let mut taken: Vec<Option<T>> = items.drain(..).map(Some).collect();
    items.extend(order.iter().map(|&i| taken[i].take().expect("order is a permutation")));
}

fn checkpoint_metadata(
    cfg: &O3NConfig,
    input_hw: (usize, usize),
    final_val: Option<f64>,
) -> Vec<(String, String)> {
    let mut meta = vec![
        ("epochs".to_string(), cfg.epochs.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("encoder".to_string(), cfg.encoder.to_string()),
        ("fusion".to_string(), cfg.fusion.to_string()),
        ("strategy".to_string(), cfg.strategy.to_string()),
        ("n_even".to_string(), cfg.n_even.to_string()),
        ("clip_len".to_string(), cfg.clip_len.to_string()),
        ("fc_dim".to_string(), cfg.fc_dim.to_string()),
        ("head_dim".to_string(), cfg.head_dim.to_string()),
        ("conv_layers".to_string(), cfg.trunk().to_compact()),
        ("input_h".to_string(), input_hw.0.to_string()),
        ("input_w".to_string(), input_hw.1.to_string()),
    ];
    if let Some(acc) = final_val {
        meta.push(("final_val_accuracy".to_string(), format!("{acc:.6}")));
    }
    meta
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_trunk(in_channels: usize) -> TrunkConfig {
        TrunkConfig {
            convs: vec![ConvSpec { out_channels: 4, kernel: 3, stride: 1, pad: 1, pool: 2 }],
            fc_dim: 8,
            in_channels,
        }
    }

    fn tiny_model(branches: usize, fusion: FusionKind) -> O3NModel {
        O3NModel::new(
            tiny_trunk(3),
            fusion,
            branches,
            8,
            (8, 8),
            &mut rng::stream(11, &[tag::WEIGHT_INIT]),
        )
        .unwrap()
    }

    fn random_activations(branches: usize, batch: usize, d: usize, salt: u64) -> Vec<Tensor> {
        let mut rng = rng::stream(3, &[0x77, salt]);
        (0..branches)
            .map(|_| {
                let data = (0..batch * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::new(vec![batch, d], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        assert!((lr_at(0, 200, 0.01, 0.0001).unwrap() - 0.01).abs() < 1e-12);
        assert!((lr_at(199, 200, 0.01, 0.0001).unwrap() - 0.0001).abs() < 1e-12);
        assert!((lr_at(1, 3, 0.01, 0.0001).unwrap() - 0.001).abs() < 1e-12);
        assert!(lr_at(0, 1, 0.01, 0.0001).is_err());
    }

    #[test]
    fn lr_ratio_is_constant() {
        let lrs: Vec<f64> = (0..10).map(|e| lr_at(e, 10, 0.01, 0.0001).unwrap()).collect();
        let r0 = lrs[1] / lrs[0];
        for pair in lrs.windows(2) {
            assert!((pair[1] / pair[0] - r0).abs() < 1e-9);
        }
    }

    #[test]
    fn sod_coefficients_match_pairwise_expansion() {
        for branches in 2..=10 {
            let coeffs = sod_coefficients(branches);
            // Brute force: count +1 for every pair (i, j>i) at j, -1 at i.
            let mut brute = vec![0.0f32; branches];
            for j in 0..branches {
                for i in 0..j {
                    brute[j] += 1.0;
                    brute[i] -= 1.0;
                }
            }
            assert_eq!(coeffs, brute, "branches={branches}");
        }
    }

    #[test]
    fn fuse_concat_matches_layout() {
        let v1 = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let v2 = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let fused = fuse_concat(&[v1, v2]).unwrap();
        assert_eq!(fused.shape(), &[1, 4]);
        assert_eq!(fused.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fuse_concat_permutes_blocks() {
        let vs = random_activations(3, 2, 4, 0);
        let fused = fuse_concat(&vs).unwrap();
        let permuted = fuse_concat(&[vs[2].clone(), vs[0].clone(), vs[1].clone()]).unwrap();
        for b in 0..2 {
            for (dst, src) in [(0usize, 2usize), (1, 0), (2, 1)] {
                assert_eq!(
                    &permuted.data()[b * 12 + dst * 4..b * 12 + dst * 4 + 4],
                    &fused.data()[b * 12 + src * 4..b * 12 + src * 4 + 4]
                );
            }
        }
    }

    #[test]
    fn fuse_sod_two_branches_is_difference() {
        let v1 = Tensor::new(vec![1, 2], vec![1.0, 5.0]).unwrap();
        let v2 = Tensor::new(vec![1, 2], vec![4.0, 2.0]).unwrap();
        let fused = fuse_sod(&[v1, v2]).unwrap();
        assert_eq!(fused.data(), &[3.0, -3.0]);
    }

    #[test]
    fn fuse_sod_equal_branches_vanish() {
        let v = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let fused = fuse_sod(&[v.clone(), v.clone(), v.clone(), v]).unwrap();
        assert!(fused.data().iter().all(|&x| x.abs() < 1e-6));
    }

    #[test]
    fn fuse_sod_three_scalar_branches() {
        // (2-1) + (4-1) + (4-2) = 6
        let vs = [
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![4.0]).unwrap(),
        ];
        let fused = fuse_sod(&vs).unwrap();
        assert_eq!(fused.data(), &[6.0]);
    }

    #[test]
    fn fuse_sod_matches_brute_force_pairs() {
        for branches in 2..=10 {
            let vs = random_activations(branches, 2, 5, branches as u64);
            let fused = fuse_sod(&vs).unwrap();
            let mut brute = vec![0.0f32; 2 * 5];
            for j in 0..branches {
                for i in 0..j {
                    for (b, acc) in brute.iter_mut().enumerate() {
                        *acc += vs[j].data()[b] - vs[i].data()[b];
                    }
                }
            }
            for (a, e) in fused.data().iter().zip(&brute) {
                assert!((a - e).abs() < 1e-5, "branches={branches}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn fuse_sod_is_position_sensitive() {
        let vs = random_activations(4, 1, 6, 99);
        let fused = fuse_sod(&vs).unwrap();
        let mut swapped = vs.clone();
        swapped.swap(0, 3);
        let fused_swapped = fuse_sod(&swapped).unwrap();
        let diff: f32 = fused
            .data()
            .iter()
            .zip(fused_swapped.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-3, "permuting branches must change the fused vector");
    }

    #[test]
    fn shared_trunk_gives_identical_activations() {
        let model = tiny_model(3, FusionKind::SumOfDiff);
        let mut rng = rng::stream(4, &[0x88]);
        let data: Vec<f32> = (0..2 * 8 * 8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![2, 8, 8, 3], data).unwrap();
        let (v1, _) = model.forward_branch(x.clone()).unwrap();
        let (v2, _) = model.forward_branch(x).unwrap();
        assert_eq!(v1.data(), v2.data());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_activation() {
        let model = tiny_model(2, FusionKind::Concat);
        let x = Tensor::zeros(&[1, 8, 8, 3]);
        let (v, _) = model.forward_branch(x).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_batch_shapes_and_softmax() {
        for (fusion, fused_len) in [(FusionKind::Concat, 3 * 8), (FusionKind::SumOfDiff, 8)] {
            let model = tiny_model(3, fusion);
            assert_eq!(fusion.fused_len(3, 8), fused_len);
            let inputs = (0..3)
                .map(|i| {
                    let mut rng = rng::stream(5, &[0x99, i]);
                    let data =
                        (0..2 * 8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
                    Tensor::new(vec![2, 8, 8, 3], data).unwrap()
                })
                .collect();
            let (logits, _) = model.forward_batch(inputs).unwrap();
            assert_eq!(logits.shape(), &[2, 3]);
            let (_, probs) = ops::softmax_xent(&logits, &[0, 1]).unwrap();
            for row in probs.data().chunks(3) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_identical_branches_hit_head_bias_response() {
        // With sum-of-difference fusion, identical inputs on every branch
        // cancel, so logits depend only on the head's response to zero.
        let model = tiny_model(4, FusionKind::SumOfDiff);
        let mk = |salt: u64| {
            let mut rng = rng::stream(6, &[0xab, salt]);
            let data: Vec<f32> = (0..8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::new(vec![1, 8, 8, 3], data).unwrap()
        };
        let (l1, _) = model.forward_batch(vec![mk(0); 4]).unwrap();
        let (l2, _) = model.forward_batch(vec![mk(1); 4]).unwrap();
        for (a, b) in l1.data().iter().zip(l2.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_spec_compact_round_trip() {
        let spec = ConvSpec { out_channels: 16, kernel: 5, stride: 2, pad: 2, pool: 2 };
        assert_eq!(spec.to_compact(), "16:5:2:2:2");
        assert_eq!(ConvSpec::parse_compact("16:5:2:2:2").unwrap(), spec);
        assert!(ConvSpec::parse_compact("16:5:2:2").is_err());
        assert!(ConvSpec::parse_compact("16:x:2:2:2").is_err());
    }

    #[test]
    fn desk_trunk_dims_on_32x32() {
        let trunk = TrunkConfig::desk_default(15);
        let dims = trunk.stage_dims(32, 32).unwrap();
        assert_eq!(dims, vec![(8, 8, 16), (4, 4, 32), (2, 2, 64)]);
        assert_eq!(trunk.feature_len(32, 32).unwrap(), 256);
    }

    #[test]
    fn default_config_matches_protocol() {
        let cfg = O3NConfig::default();
        assert_eq!(cfg.branches(), 6);
        assert_eq!(cfg.clip_len, 6);
        assert_eq!(cfg.fc_dim, 128);
        assert_eq!(cfg.epochs, 200);
        assert_eq!(cfg.batch_questions, 64);
        assert!((cfg.lr_start - 0.01).abs() < 1e-12);
        assert!((cfg.lr_end - 0.0001).abs() < 1e-12);
        cfg.validate().unwrap();
    }
}
