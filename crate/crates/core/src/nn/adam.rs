//! Adam with bias correction.

use super::{Gradients, NnError, ParamStore};
use crate::math;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, aligned with the parameter store.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn for_store(params: &ParamStore) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One update over every parameter that has a gradient. Rejects non-finite
/// gradients before touching any state, so a poisoned batch cannot corrupt
/// the moments.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    grads.ensure_finite(params)?;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - math::powf(cfg.beta1, t);
    let bc2 = 1.0 - math::powf(cfg.beta2, t);
    for id in 0..params.len() {
        let Some(g) = grads.get(id) else { continue };
        let g = g.data();
        let m = &mut state.m[id];
        let v = &mut state.v[id];
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= cfg.lr * mhat / (math::sqrt(vhat) + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor4;

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        // With a constant gradient, bias-corrected Adam's per-step move tends
        // to exactly lr (the second moment matches the squared first moment).
        let mut params = ParamStore::new();
        let id = params.add("w", Tensor4::from_vec([1, 1, 1, 1], vec![0.0]).unwrap()).unwrap();
        let mut grads = Gradients::for_store(&params);
        grads.slot_mut(&params, id).data_mut()[0] = 0.37;
        let mut state = AdamState::for_store(&params);
        let cfg = AdamConfig::default();
        let mut prev = params.get(id).data()[0];
        let mut last_step = 0.0;
        for _ in 0..1000 {
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            let cur = params.get(id).data()[0];
            last_step = prev - cur;
            prev = cur;
        }
        assert!(
            (last_step - cfg.lr).abs() < 1e-6,
            "step magnitude {last_step} should approach lr {}",
            cfg.lr
        );
    }

    #[test]
    fn first_step_is_lr_sized_regardless_of_gradient_scale() {
        for &scale in &[1e-6, 1.0, 1e6] {
            let mut params = ParamStore::new();
            let id = params.add("w", Tensor4::from_vec([1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
            let mut grads = Gradients::for_store(&params);
            grads.slot_mut(&params, id).data_mut()[0] = scale;
            let mut state = AdamState::for_store(&params);
            let cfg = AdamConfig::default();
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            let step = 1.0 - params.get(id).data()[0];
            // eps in the denominator trims up to ~1% when the gradient is tiny.
            assert!((step - cfg.lr).abs() < 0.02 * cfg.lr, "scale {scale}: step {step}");
        }
    }

    #[test]
    fn non_finite_gradients_are_refused_and_leave_params_untouched() {
        let mut params = ParamStore::new();
        let id = params.add("w", Tensor4::from_vec([1, 1, 1, 1], vec![2.0]).unwrap()).unwrap();
        let mut grads = Gradients::for_store(&params);
        grads.slot_mut(&params, id).data_mut()[0] = f64::NAN;
        let mut state = AdamState::for_store(&params);
        let err = adam_step(&mut params, &grads, &mut state, &AdamConfig::default());
        assert!(matches!(err, Err(NnError::NonFiniteGradient(_))));
        assert_eq!(params.get(id).data()[0], 2.0);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize (w - 3)^2 from 0; gradient 2(w - 3).
        let mut params = ParamStore::new();
        let id = params.add("w", Tensor4::from_vec([1, 1, 1, 1], vec![0.0]).unwrap()).unwrap();
        let mut state = AdamState::for_store(&params);
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        for _ in 0..2000 {
            let w = params.get(id).data()[0];
            let mut grads = Gradients::for_store(&params);
            grads.slot_mut(&params, id).data_mut()[0] = 2.0 * (w - 3.0);
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        }
        assert!((params.get(id).data()[0] - 3.0).abs() < 1e-3);
    }
}
