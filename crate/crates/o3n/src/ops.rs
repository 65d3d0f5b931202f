//! Forward and backward passes for the layer set used by the networks:
//! convolution, rectifier, max pooling, dropout, affine, and softmax
//! cross-entropy.
//!
//! Ops are pure functions over [`Tensor`]s; callers keep whatever they need
//! for the backward pass. Internal parallelism only ever splits work into
//! disjoint output regions with a fixed per-element accumulation order, so
//! results are bitwise identical for any thread count.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Images per im2col chunk; bounds scratch memory during convolution.
const CONV_CHUNK: usize = 16;

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        other => Err(Error::ShapeError(format!("{what}: expected 4 dims, got {other:?}"))),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        other => Err(Error::ShapeError(format!("{what}: expected 2 dims, got {other:?}"))),
    }
}

/// out = a (m x k) * b (k x n), rows in parallel.
fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(|(out_row, a_row)| {
        out_row.iter_mut().for_each(|v| *v = 0.0);
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// out += aᵀ (m x p) * b (p x n) where a is stored p x m. Parallel over the
/// m output rows; each row accumulates over p in a fixed order.
fn matmul_at_b_accum(a: &[f32], b: &[f32], out: &mut [f32], p: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).enumerate().for_each(|(mi, out_row)| {
        for pi in 0..p {
            let av = a[pi * m + mi];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[pi * n..(pi + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// out = a (p x n) * bᵀ where b is stored m x n; result p x m.
fn matmul_a_bt(a: &[f32], b: &[f32], out: &mut [f32], p: usize, n: usize, m: usize) {
    debug_assert_eq!(a.len(), p * n);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), p * m);
    out.par_chunks_mut(m).zip(a.par_chunks(n)).for_each(|(out_row, a_row)| {
        for (mi, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[mi * n..(mi + 1) * n];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    c_in: usize,
    k_h: usize,
    k_w: usize,
    c_out: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

fn conv_geometry(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (batch, in_h, in_w, c_in) = dims4(x, "conv input")?;
    let (k_h, k_w, kc_in, c_out) = dims4(k, "conv kernel")?;
    if kc_in != c_in {
        return Err(Error::ShapeError(format!(
            "kernel expects {kc_in} input channels, input has {c_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::ShapeError("stride must be >= 1".into()));
    }
    if in_h + 2 * pad < k_h || in_w + 2 * pad < k_w {
        return Err(Error::ShapeError(format!(
            "kernel {k_h}x{k_w} larger than padded input {}x{}",
            in_h + 2 * pad,
            in_w + 2 * pad
        )));
    }
    let out_h = (in_h + 2 * pad - k_h) / stride + 1;
    let out_w = (in_w + 2 * pad - k_w) / stride + 1;
    Ok(ConvGeom { batch, in_h, in_w, c_in, k_h, k_w, c_out, out_h, out_w, stride, pad })
}

/// Patch matrix for images `[b0, b1)`: one row per output position, columns
/// ordered (k_h, k_w, c_in). Out-of-bounds taps are zero.
fn im2col_chunk(x: &[f32], g: &ConvGeom, b0: usize, b1: usize) -> Vec<f32> {
    let cols = g.k_h * g.k_w * g.c_in;
    let rows = (b1 - b0) * g.out_h * g.out_w;
    let mut col = vec![0.0f32; rows * cols];
    let img_len = g.in_h * g.in_w * g.c_in;
    col.par_chunks_mut(g.out_h * g.out_w * cols)
        .enumerate()
        .for_each(|(bi, img_col)| {
            let img = &x[(b0 + bi) * img_len..(b0 + bi + 1) * img_len];
            let mut row = 0;
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let base = row * cols;
                    for kh in 0..g.k_h {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        for kw in 0..g.k_w {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.in_w as isize {
                                continue;
                            }
                            let src = (ih as usize * g.in_w + iw as usize) * g.c_in;
                            let dst = base + (kh * g.k_w + kw) * g.c_in;
                            img_col[dst..dst + g.c_in]
                                .copy_from_slice(&img[src..src + g.c_in]);
                        }
                    }
                    row += 1;
                }
            }
        });
    col
}

/// Cross-correlation of NHWC input with (k_h, k_w, c_in, c_out) kernels.
pub fn conv2d(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geometry(x, k, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::ShapeError(format!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                g.c_out
            )));
        }
    }
    let cols = g.k_h * g.k_w * g.c_in;
    let mut out = vec![0.0f32; g.batch * g.out_h * g.out_w * g.c_out];
    let out_img = g.out_h * g.out_w * g.c_out;
    let mut b0 = 0;
    while b0 < g.batch {
        let b1 = (b0 + CONV_CHUNK).min(g.batch);
        let col = im2col_chunk(x.data(), &g, b0, b1);
        let rows = (b1 - b0) * g.out_h * g.out_w;
        matmul_into(&col, k.data(), &mut out[b0 * out_img..b1 * out_img], rows, cols, g.c_out);
        b0 = b1;
    }
    if let Some(b) = bias {
        let bd = b.data();
        out.par_chunks_mut(g.c_out).for_each(|px| {
            for (o, &bv) in px.iter_mut().zip(bd) {
                *o += bv;
            }
        });
    }
    Tensor::new(vec![g.batch, g.out_h, g.out_w, g.c_out], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geometry(x, k, stride, pad)?;
    let expected = [g.batch, g.out_h, g.out_w, g.c_out];
    if dy.shape() != expected {
        return Err(Error::ShapeError(format!(
            "conv grad shape {:?}, expected {:?}",
            dy.shape(),
            expected
        )));
    }
    let cols = g.k_h * g.k_w * g.c_in;
    let out_img = g.out_h * g.out_w * g.c_out;
    let img_len = g.in_h * g.in_w * g.c_in;

    let mut dk = vec![0.0f32; cols * g.c_out];
    let mut db = vec![0.0f32; g.c_out];
    let mut dx = vec![0.0f32; g.batch * img_len];

    for px in dy.data().chunks(g.c_out) {
        for (d, &v) in db.iter_mut().zip(px) {
            *d += v;
        }
    }

    let mut b0 = 0;
    while b0 < g.batch {
        let b1 = (b0 + CONV_CHUNK).min(g.batch);
        let rows = (b1 - b0) * g.out_h * g.out_w;
        let col = im2col_chunk(x.data(), &g, b0, b1);
        let dy_chunk = &dy.data()[b0 * out_img..b1 * out_img];
        matmul_at_b_accum(&col, dy_chunk, &mut dk, rows, cols, g.c_out);

        // dcol = dy * kᵀ, then scatter patches back into dx.
        let mut dcol = vec![0.0f32; rows * cols];
        matmul_a_bt(dy_chunk, k.data(), &mut dcol, rows, g.c_out, cols);
        dx[b0 * img_len..b1 * img_len]
            .par_chunks_mut(img_len)
            .enumerate()
            .for_each(|(bi, dx_img)| {
                let img_rows = g.out_h * g.out_w;
                let dcol_img = &dcol[bi * img_rows * cols..(bi + 1) * img_rows * cols];
                let mut row = 0;
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        let base = row * cols;
                        for kh in 0..g.k_h {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.in_h as isize {
                                continue;
                            }
                            for kw in 0..g.k_w {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.in_w as isize {
                                    continue;
                                }
                                let dst = (ih as usize * g.in_w + iw as usize) * g.c_in;
                                let src = base + (kh * g.k_w + kw) * g.c_in;
                                for ci in 0..g.c_in {
                                    dx_img[dst + ci] += dcol_img[src + ci];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            });
        b0 = b1;
    }

    Ok((
        Tensor::new(vec![g.batch, g.in_h, g.in_w, g.c_in], dx)?,
        Tensor::new(vec![g.k_h, g.k_w, g.c_in, g.c_out], dk)?,
        Tensor::new(vec![g.c_out], db)?,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xi, &di)| if xi > 0.0 { di } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Max pooling over `window x window` at the given stride. Returns the
/// pooled tensor and, per output element, the flat input index of its max
/// (first maximum wins on ties) for the backward pass.
pub fn maxpool(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    let (batch, in_h, in_w, c) = dims4(x, "maxpool input")?;
    if window == 0 || stride == 0 {
        return Err(Error::ShapeError("pool window and stride must be >= 1".into()));
    }
    if in_h < window || in_w < window {
        return Err(Error::ShapeError(format!(
            "pool window {window} larger than input {in_h}x{in_w}"
        )));
    }
    let out_h = (in_h - window) / stride + 1;
    let out_w = (in_w - window) / stride + 1;
    let img_len = in_h * in_w * c;
    let out_img = out_h * out_w * c;
    let mut out = vec![0.0f32; batch * out_img];
    let mut argmax = vec![0u32; batch * out_img];
    let xd = x.data();
    out.par_chunks_mut(out_img)
        .zip(argmax.par_chunks_mut(out_img))
        .enumerate()
        .for_each(|(b, (out_img_buf, arg_img))| {
            let img_base = b * img_len;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    for ci in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for kh in 0..window {
                            for kw in 0..window {
                                let ih = oh * stride + kh;
                                let iw = ow * stride + kw;
                                let idx = img_base + (ih * in_w + iw) * c + ci;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (oh * out_w + ow) * c + ci;
                        out_img_buf[o] = best;
                        arg_img[o] = best_idx as u32;
                    }
                }
            }
        });
    Ok((Tensor::new(vec![batch, out_h, out_w, c], out)?, argmax))
}

pub fn maxpool_backward(argmax: &[u32], x_shape: &[usize], dy: &Tensor) -> Tensor {
    let numel: usize = x_shape.iter().product();
    let mut dx = vec![0.0f32; numel];
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        dx[idx as usize] += g;
    }
    Tensor::new(x_shape.to_vec(), dx).expect("shape matches")
}

/// Inverted dropout. At train time survivors are scaled by `1/(1-rate)`;
/// at eval time (or rate 0) it is the identity and the mask is `None`.
pub fn dropout(
    x: &Tensor,
    rate: f32,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Option<Vec<f32>>) {
    if !train || rate == 0.0 {
        return (x.clone(), None);
    }
    debug_assert!((0.0..1.0).contains(&rate));
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Vec<f32> = (0..x.numel())
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep_scale })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (Tensor::new(x.shape().to_vec(), data).expect("same shape"), Some(mask))
}

pub fn dropout_backward(mask: Option<&Vec<f32>>, dy: &Tensor) -> Tensor {
    match mask {
        None => dy.clone(),
        Some(mask) => {
            let data = dy.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
            Tensor::new(dy.shape().to_vec(), data).expect("same shape")
        }
    }
}

/// y = x (B x in) * w (in x out) + b.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, d_in) = dims2(x, "affine input")?;
    let (w_in, d_out) = dims2(w, "affine weight")?;
    if w_in != d_in {
        return Err(Error::ShapeError(format!(
            "affine input width {d_in} does not match weight rows {w_in}"
        )));
    }
    if b.shape() != [d_out] {
        return Err(Error::ShapeError(format!(
            "affine bias shape {:?}, expected [{d_out}]",
            b.shape()
        )));
    }
    let mut out = vec![0.0f32; batch * d_out];
    matmul_into(x.data(), w.data(), &mut out, batch, d_in, d_out);
    let bd = b.data();
    out.chunks_mut(d_out).for_each(|row| {
        for (o, &bv) in row.iter_mut().zip(bd) {
            *o += bv;
        }
    });
    Tensor::new(vec![batch, d_out], out)
}

pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, d_in) = dims2(x, "affine input")?;
    let (_, d_out) = dims2(w, "affine weight")?;
    if dy.shape() != [batch, d_out] {
        return Err(Error::ShapeError(format!(
            "affine grad shape {:?}, expected [{batch}, {d_out}]",
            dy.shape()
        )));
    }
    let mut dx = vec![0.0f32; batch * d_in];
    matmul_a_bt(dy.data(), w.data(), &mut dx, batch, d_out, d_in);
    let mut dw = vec![0.0f32; d_in * d_out];
    matmul_at_b_accum(x.data(), dy.data(), &mut dw, batch, d_in, d_out);
    let mut db = vec![0.0f32; d_out];
    for row in dy.data().chunks(d_out) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok((
        Tensor::new(vec![batch, d_in], dx)?,
        Tensor::new(vec![d_in, d_out], dw)?,
        Tensor::new(vec![d_out], db)?,
    ))
}

/// Numerically stable softmax cross-entropy. Returns the mean negative
/// log-likelihood and the probability rows.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (batch, classes) = dims2(logits, "logits")?;
    if labels.len() != batch {
        return Err(Error::ShapeError(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }
    for &label in labels {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
    }
    let mut probs = vec![0.0f32; batch * classes];
    let mut loss = 0.0f64;
    for (bi, row) in logits.data().chunks(classes).enumerate() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - max) as f64).exp();
        }
        let log_denom = denom.ln();
        for (ci, &v) in row.iter().enumerate() {
            probs[bi * classes + ci] = (((v - max) as f64 - log_denom).exp()) as f32;
        }
        loss -= (row[labels[bi]] - max) as f64 - log_denom;
    }
    Ok((
        (loss / batch as f64) as f32,
        Tensor::new(vec![batch, classes], probs)?,
    ))
}

/// d loss / d logits = (probs - onehot) / batch.
pub fn softmax_xent_backward(probs: &Tensor, labels: &[usize]) -> Tensor {
    let classes = probs.shape()[1];
    let batch = probs.shape()[0];
    let scale = 1.0 / batch as f32;
    let mut dlogits = probs.data().to_vec();
    for (bi, &label) in labels.iter().enumerate() {
        dlogits[bi * classes + label] -= 1.0;
    }
    dlogits.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(probs.shape().to_vec(), dlogits).expect("same shape")
}

/// (B, H, W, C) -> (B, H*W*C).
pub fn flatten(x: Tensor) -> Result<Tensor> {
    let (batch, h, w, c) = dims4(&x, "flatten input")?;
    x.reshaped(vec![batch, h * w * c])
}
