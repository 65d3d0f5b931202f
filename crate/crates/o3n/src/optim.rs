//! SGD with momentum and weight decay.

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

/// One parameter update: `v <- momentum*v - lr*(g + weight_decay*w)`,
/// then `w <- w + v`.
pub fn sgd_update(
    weights: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) {
    debug_assert_eq!(weights.len(), grads.len());
    debug_assert_eq!(weights.len(), velocity.len());
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * (g + weight_decay * *w);
        *w += *v;
    }
}

/// Momentum state for a [`ParamSet`], addressed by parameter position.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(params: &ParamSet, momentum: f32, weight_decay: f32) -> Self {
        let velocity = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { momentum, weight_decay, velocity }
    }

    /// Apply one step using each tensor's stored gradient. `lr_for` maps a
    /// parameter name to its learning rate, which lets fine-tuning drive
    /// fully-connected layers faster than convolutional ones.
    pub fn step_with(&mut self, params: &mut ParamSet, lr_for: impl Fn(&str) -> f32) -> Result<()> {
        for (slot, (name, tensor)) in self.velocity.iter_mut().zip(params.iter_mut()) {
            let lr = lr_for(name);
            let numel = tensor.numel();
            if slot.len() != numel {
                return Err(Error::ShapeError(format!(
                    "velocity for {name:?} has {} entries, parameter has {numel}",
                    slot.len()
                )));
            }
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => {
                    return Err(Error::ShapeError(format!("parameter {name:?} has no gradient")))
                }
            };
            sgd_update(
                tensor.data_mut(),
                &grad,
                slot,
                lr,
                self.momentum,
                self.weight_decay,
            );
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f32) -> Result<()> {
        self.step_with(params, |_| lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn plain_sgd_step() {
        let mut w = [1.0f32];
        let mut v = [0.0f32];
        sgd_update(&mut w, &[2.0], &mut v, 0.1, 0.0, 0.0);
        assert!((w[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_zero_velocity_leaves_weights() {
        let mut w = [3.5f32];
        let mut v = [0.0f32];
        sgd_update(&mut w, &[0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(w[0], 3.5);
    }

    #[test]
    fn momentum_unrolls_two_steps() {
        // v1 = -0.1, w1 = -0.1; v2 = 0.9*(-0.1) - 0.1 = -0.19, w2 = -0.29.
        let mut w = [0.0f32];
        let mut v = [0.0f32];
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((w[0] + 0.29).abs() < 1e-6, "w = {}", w[0]);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut w = [1.0f32];
        let mut v = [0.0f32];
        sgd_update(&mut w, &[0.0], &mut v, 0.1, 0.0, 0.5);
        assert!((w[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn per_name_learning_rates() {
        let mut params = ParamSet::new();
        params.insert("conv.w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        params.insert("fc.w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        for (_, t) in params.iter_mut() {
            t.grad_mut()[0] = 1.0;
        }
        let mut opt = SgdMomentum::new(&params, 0.0, 0.0);
        opt.step_with(&mut params, |name| if name.starts_with("fc") { 1.0 } else { 0.1 })
            .unwrap();
        assert!((params.get("conv.w").unwrap().data()[0] - 0.9).abs() < 1e-7);
        assert!((params.get("fc.w").unwrap().data()[0] - 0.0).abs() < 1e-7);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::zeros(&[2])).unwrap();
        let mut opt = SgdMomentum::new(&params, 0.9, 0.0);
        assert!(opt.step(&mut params, 0.1).is_err());
    }
}
