//! Shared test support: independent f64 reference implementations of the
//! network math (naive loops, no shared code with the production engine),
//! chi-square critical values, and corpus helpers.

#![allow(dead_code)]
// Reference implementations stay as naive index loops on purpose.
#![allow(clippy::needless_range_loop)]

use o3n::model::{ConvSpec, FusionKind};
use std::collections::BTreeMap;

/// Dense f64 tensor for reference computations.
#[derive(Debug, Clone)]
pub struct RefTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RefTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self::new(shape.to_vec(), data.iter().map(|&v| v as f64).collect())
    }
}

/// Naive NHWC cross-correlation with zero padding.
pub fn conv2d_ref(x: &RefTensor, k: &RefTensor, bias: &[f64], stride: usize, pad: usize) -> RefTensor {
    let (b, ih, iw, ci) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (kh, kw, kci, co) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    assert_eq!(ci, kci);
    let oh = (ih + 2 * pad - kh) / stride + 1;
    let ow = (iw + 2 * pad - kw) / stride + 1;
    let mut out = RefTensor::zeros(&[b, oh, ow, co]);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..co {
                    let mut acc = bias[oc];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            for ic in 0..ci {
                                let xv = x.data
                                    [((bi * ih + iy as usize) * iw + ix as usize) * ci + ic];
                                let kv = k.data[((ky * kw + kx) * ci + ic) * co + oc];
                                acc += xv * kv;
                            }
                        }
                    }
                    out.data[((bi * oh + oy) * ow + ox) * co + oc] = acc;
                }
            }
        }
    }
    out
}

pub fn relu_ref(x: &RefTensor) -> RefTensor {
    RefTensor::new(x.shape.clone(), x.data.iter().map(|&v| v.max(0.0)).collect())
}

pub fn maxpool_ref(x: &RefTensor, window: usize, stride: usize) -> RefTensor {
    let (b, ih, iw, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let oh = (ih - window) / stride + 1;
    let ow = (iw - window) / stride + 1;
    let mut out = RefTensor::zeros(&[b, oh, ow, c]);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..window {
                        for kx in 0..window {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            best = best.max(x.data[((bi * ih + iy) * iw + ix) * c + ci]);
                        }
                    }
                    out.data[((bi * oh + oy) * ow + ox) * c + ci] = best;
                }
            }
        }
    }
    out
}

pub fn affine_ref(x: &RefTensor, w: &RefTensor, bias: &[f64]) -> RefTensor {
    let (b, din) = (x.shape[0], x.shape[1]);
    let dout = w.shape[1];
    assert_eq!(w.shape[0], din);
    let mut out = RefTensor::zeros(&[b, dout]);
    for bi in 0..b {
        for o in 0..dout {
            let mut acc = bias[o];
            for i in 0..din {
                acc += x.data[bi * din + i] * w.data[i * dout + o];
            }
            out.data[bi * dout + o] = acc;
        }
    }
    out
}

/// Mean negative log-likelihood of the labels under row softmax.
pub fn softmax_xent_ref(logits: &RefTensor, labels: &[usize]) -> f64 {
    let (b, c) = (logits.shape[0], logits.shape[1]);
    let mut loss = 0.0;
    for bi in 0..b {
        let row = &logits.data[bi * c..(bi + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        loss -= row[labels[bi]] - max - denom.ln();
    }
    loss / b as f64
}

/// Reference parameter store keyed by name.
pub type RefParams = BTreeMap<String, RefTensor>;

/// Conv stack + flatten, mirroring the production layer order.
pub fn conv_stack_ref(params: &RefParams, convs: &[ConvSpec], x: &RefTensor) -> RefTensor {
    let mut cur = x.clone();
    for (i, spec) in convs.iter().enumerate() {
        let w = &params[&format!("trunk.conv{i}.w")];
        let b = &params[&format!("trunk.conv{i}.b")];
        cur = relu_ref(&conv2d_ref(&cur, w, &b.data, spec.stride, spec.pad));
        if spec.pool > 1 {
            cur = maxpool_ref(&cur, spec.pool, spec.pool);
        }
    }
    let batch = cur.shape[0];
    let feat: usize = cur.shape[1..].iter().product();
    RefTensor::new(vec![batch, feat], cur.data)
}

/// Full O3N graph in f64: shared trunk per branch, fusion, two-layer head,
/// softmax cross-entropy.
pub fn o3n_loss_ref(
    params: &RefParams,
    convs: &[ConvSpec],
    fusion: FusionKind,
    branch_inputs: &[RefTensor],
    labels: &[usize],
) -> f64 {
    let branches = branch_inputs.len();
    let mut activations = Vec::with_capacity(branches);
    for x in branch_inputs {
        let flat = conv_stack_ref(params, convs, x);
        let fc = affine_ref(&flat, &params["trunk.fc.w"], &params["trunk.fc.b"].data);
        activations.push(relu_ref(&fc));
    }
    let batch = activations[0].shape[0];
    let d = activations[0].shape[1];
    let fused = match fusion {
        FusionKind::Concat => {
            let mut data = vec![0.0; batch * branches * d];
            for (i, v) in activations.iter().enumerate() {
                for bi in 0..batch {
                    for j in 0..d {
                        data[bi * branches * d + i * d + j] = v.data[bi * d + j];
                    }
                }
            }
            RefTensor::new(vec![batch, branches * d], data)
        }
        FusionKind::SumOfDiff => {
            // Literal pairwise expansion, not the closed form.
            let mut data = vec![0.0; batch * d];
            for j in 0..branches {
                for i in 0..j {
                    for idx in 0..batch * d {
                        data[idx] += activations[j].data[idx] - activations[i].data[idx];
                    }
                }
            }
            RefTensor::new(vec![batch, d], data)
        }
    };
    let h1 = relu_ref(&affine_ref(&fused, &params["head.fc1.w"], &params["head.fc1.b"].data));
    let logits = affine_ref(&h1, &params["head.fc2.w"], &params["head.fc2.b"].data);
    softmax_xent_ref(&logits, labels)
}

/// Upper-tail chi-square critical values at significance 0.01 (p > 0.01
/// passes when the statistic is below the value), by degrees of freedom.
pub fn chi_square_crit_99(dof: usize) -> f64 {
    const TABLE: [f64; 30] = [
        6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090, 21.666, 23.209, 24.725,
        26.217, 27.688, 29.141, 30.578, 32.000, 33.409, 34.805, 36.191, 37.566, 38.932, 40.289,
        41.638, 42.980, 44.314, 45.642, 46.963, 48.278, 49.588, 50.892,
    ];
    assert!(dof >= 1 && dof <= TABLE.len(), "dof {dof} outside table");
    TABLE[dof - 1]
}

/// Pearson chi-square statistic against a uniform expectation.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum()
}
