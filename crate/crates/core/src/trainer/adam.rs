use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::scalar::Real;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a, I>(params: I) -> Self
    where
        I: IntoIterator<Item = &'a Tensor<T>>,
    {
        let m: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter group.
///
/// Gradients are checked before anything is modified: a non-finite entry
/// aborts the step and names the offending group.
pub fn adam_step<T: Real>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    for ((name, _), g) in params.iter().zip(grads) {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                group: name.clone(),
                index: i,
            });
        }
    }
    state.step += 1;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let correction1 = one - b1.powi(state.step as i32);
    let correction2 = one - b2.powi(state.step as i32);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / correction1;
            let v_hat = *vi / correction2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> T {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| v * v)
        .sum::<T>()
        .sqrt();
    let max_norm = T::lit(max_norm);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> Tensor<f64> {
        Tensor::scalar(value)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(1.5);
        let mut state = AdamState::new([&p]);
        let mut params = vec![("w".to_string(), &mut p)];
        adam_step(&mut params, &[single(0.0)], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = single(0.0);
        let mut state = AdamState::new([&p]);
        let cfg = AdamConfig::default();
        adam_step(&mut vec![("w".into(), &mut p)], &[single(1.0)], &mut state, &cfg).unwrap();
        let m1 = state.m[0].data()[0];
        adam_step(&mut vec![("w".into(), &mut p)], &[single(0.0)], &mut state, &cfg).unwrap();
        assert_eq!(state.m[0].data()[0], 0.9 * m1);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let cfg = AdamConfig::default();
        let mut p = single(0.0);
        let mut state = AdamState::new([&p]);
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..2000 {
            adam_step(&mut vec![("w".into(), &mut p)], &[single(-3.0)], &mut state, &cfg).unwrap();
            step = p.data()[0] - prev;
            prev = p.data()[0];
        }
        assert!((step - cfg.lr).abs() < 1e-9, "step {step}");
    }

    #[test]
    fn matches_scalar_oracle_over_five_steps() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let grads = [0.5, -1.25, 2.0, 0.0, 0.75];
        let mut p = single(1.0);
        let mut state = AdamState::new([&p]);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam_step(&mut vec![("w".into(), &mut p)], &[single(g)], &mut state, &cfg).unwrap();
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            w -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((p.data()[0] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_names_the_group() {
        let mut a = single(0.0);
        let mut b = single(0.0);
        let mut state = AdamState::new([&a, &b]);
        let mut params = vec![("first".to_string(), &mut a), ("second".to_string(), &mut b)];
        let err = adam_step(
            &mut params,
            &[single(1.0), single(f64::NAN)],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("second"));
        assert_eq!(a.data(), &[0.0]);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut grads = vec![
            Tensor::row(vec![3.0, 4.0]),
            Tensor::row(vec![12.0]),
        ];
        let before = clip_global_norm(&mut grads, 5.0);
        assert_eq!(before, 13.0);
        let after: f64 = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(after <= 5.0 + 1e-12);
        let mut small = vec![Tensor::row(vec![0.1])];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0].data(), &[0.1]);
    }
}
