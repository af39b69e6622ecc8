use std::f64::consts::PI;

use super::{Schedule, TrainConfig};
use crate::binarize::{BinaryLayer, ALPHA_FLOOR};
use crate::numcore::Scalar;

/// Learning rate at `step` of `total_steps`. Both decaying schedules reach 0
/// exactly at `step == total_steps`.
pub fn lr_at(schedule: Schedule, eta: f64, step: usize, total_steps: usize) -> f64 {
    let progress = if total_steps == 0 {
        0.0
    } else {
        (step as f64 / total_steps as f64).min(1.0)
    };
    match schedule {
        Schedule::Constant => eta,
        Schedule::Cosine => 0.5 * eta * (1.0 + (PI * progress).cos()),
        Schedule::Linear => eta * (1.0 - progress),
    }
}

/// SGD with heavy-ball momentum: `d = g + λp`, `v ← μv + d`, `p ← p − ηv`.
pub fn sgd_update<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T, weight_decay: T) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let d = if weight_decay == T::zero() {
            g
        } else {
            g + weight_decay * *p
        };
        *v = momentum * *v + d;
        *p = *p - lr * *v;
    }
}

/// Momentum buffers for one binary layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMomentum<T: Scalar = f32> {
    pub weight: Vec<T>,
    pub alpha: Vec<T>,
}

impl<T: Scalar> BinaryMomentum<T> {
    pub fn zeros(layer: &BinaryLayer<T>) -> Self {
        Self {
            weight: vec![T::zero(); layer.latent_weight.len()],
            alpha: vec![T::zero(); layer.c_out()],
        }
    }
}

/// Applies one SGD step to a binary layer's latent weights and scales.
///
/// `weight_grad` is the full latent-weight gradient (STE or resilient) and
/// `alpha_grad` the per-channel scale gradient. Latent weights get no weight
/// decay; `α` is clamped to stay positive.
pub fn sgd_step<T: Scalar>(
    layer: &mut BinaryLayer<T>,
    weight_grad: &[T],
    alpha_grad: &[T],
    state: &mut BinaryMomentum<T>,
    config: &TrainConfig,
    lr: f64,
) {
    let lr = T::from_f64_lossy(lr);
    let mu = T::from_f64_lossy(config.momentum);
    sgd_update(
        layer.latent_weight.data_mut(),
        weight_grad,
        &mut state.weight,
        lr,
        mu,
        T::zero(),
    );
    sgd_update(&mut layer.alpha, alpha_grad, &mut state.alpha, lr, mu, T::zero());
    let floor = T::from_f64_lossy(ALPHA_FLOOR);
    for a in &mut layer.alpha {
        *a = a.max(floor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use crate::rebnn::resilient_grad;

    fn plain_config() -> TrainConfig {
        TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn closed_form_example() {
        let mut l = BinaryLayer::new(Tensor::new(vec![1, 1, 1, 1], vec![0.5f64]).unwrap(), 0.2).unwrap();
        l.alpha = vec![1.0];
        let g = resilient_grad(&[0.3], &l, 0);
        let mut st = BinaryMomentum::zeros(&l);
        sgd_step(&mut l, &g, &[0.0], &mut st, &plain_config(), 0.1);
        let closed = 0.98 * 0.5 - 0.1 * (0.3 - 0.2);
        assert!((l.latent_weight.data()[0] - 0.48).abs() < 1e-15);
        assert!((l.latent_weight.data()[0] - closed).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_no_momentum_is_noop() {
        let mut l = BinaryLayer::new(Tensor::new(vec![2, 1, 1, 1], vec![0.5f64, -0.25]).unwrap(), 1e-4).unwrap();
        let before = l.clone();
        let mut st = BinaryMomentum::zeros(&l);
        sgd_step(&mut l, &[0.0, 0.0], &[0.0, 0.0], &mut st, &plain_config(), 0.1);
        assert_eq!(l, before);
    }

    #[test]
    fn alpha_stays_positive() {
        let mut l = BinaryLayer::new(Tensor::new(vec![1, 1, 1, 1], vec![0.5f64]).unwrap(), 1e-4).unwrap();
        let mut st = BinaryMomentum::zeros(&l);
        sgd_step(&mut l, &[0.0], &[100.0], &mut st, &plain_config(), 0.1);
        assert_eq!(l.alpha[0], ALPHA_FLOOR);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(Schedule::Cosine, 0.1, 0, 100), 0.1);
        assert!(lr_at(Schedule::Cosine, 0.1, 100, 100).abs() < 1e-9);
        assert!((lr_at(Schedule::Cosine, 0.1, 50, 100) - 0.05).abs() < 1e-12);
        assert_eq!(lr_at(Schedule::Linear, 1e-3, 100, 100), 0.0);
        assert_eq!(lr_at(Schedule::Linear, 1e-3, 25, 100), 7.5e-4);
        assert_eq!(lr_at(Schedule::Constant, 0.1, 99, 100), 0.1);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!((p[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = [2.0f64];
        let mut v = [0.0];
        sgd_update(&mut p, &[0.0], &mut v, 0.5, 0.0, 0.1);
        assert!((p[0] - 1.9).abs() < 1e-15);
    }
}
