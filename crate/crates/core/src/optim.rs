//! Adam with decoupled weight decay.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: ModelParams,
    second: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }
}

/// One update of a single tensor. `step` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    first: &mut Array2<f64>,
    second: &mut Array2<f64>,
    step: u64,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    let shrink = 1.0 - lr * weight_decay;
    Zip::from(param)
        .and(grad)
        .and(first)
        .and(second)
        .for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p * shrink - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        });
}

/// Update every tensor for which `active(name)` holds, then renormalize the
/// prototypes to unit rows.
///
/// Inactive tensors keep their values and moments.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    active: impl Fn(&str) -> bool,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    for (name, g) in &grad_tensors {
        if active(name) && g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let step = state.step;
    let cfg = state.config;
    let tensors = params.tensors_mut();
    let firsts = state.first.tensors_mut();
    let seconds = state.second.tensors_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in tensors.into_iter().zip(grad_tensors).zip(firsts).zip(seconds) {
        if active(&name) {
            adam_update(p, g, m, v, step, lr, weight_decay, &cfg);
        }
    }
    params.normalize_prototypes();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use ndarray::array;

    fn scalar_step(p: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut param = array![[p]];
        let mut m = array![[0.0]];
        let mut v = array![[0.0]];
        adam_update(
            &mut param,
            &array![[g]],
            &mut m,
            &mut v,
            1,
            lr,
            wd,
            &AdamConfig::default(),
        );
        param[[0, 0]]
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let expected = 1.0 - 1e-3 * 0.1 / (0.1 + 1e-8);
        let got = scalar_step(1.0, 0.1, 1e-3, 0.0);
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.9990).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        assert_eq!(scalar_step(0.37, 0.0, 1e-3, 0.0), 0.37);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let got = scalar_step(2.0, 0.0, 1e-2, 0.5);
        assert!((got - 2.0 * (1.0 - 1e-2 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn inactive_tensors_are_untouched_and_prototypes_stay_unit() {
        let cfg = ModelConfig::new(3, 4, 2);
        let mut params = ModelParams::init(&cfg, 0);
        let before = params.clone();
        let mut grads = params.zeros_like();
        for (_, g) in grads.tensors_mut() {
            g.fill(0.5);
        }
        let mut state = OptimizerState::new(&params, AdamConfig::default());
        adam_step(
            &mut params,
            &grads,
            &mut state,
            1e-2,
            1e-5,
            crate::network::is_frame_stage_tensor,
        )
        .unwrap();
        assert_eq!(params.embedding, before.embedding);
        assert_eq!(params.head, before.head);
        assert_ne!(params.encoder, before.encoder);
        for row in params.prototypes.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let cfg = ModelConfig::new(3, 4, 2);
        let mut params = ModelParams::init(&cfg, 0);
        let mut grads = params.zeros_like();
        grads.head.bias[[0, 0]] = f64::NAN;
        let mut state = OptimizerState::new(&params, AdamConfig::default());
        let err = adam_step(&mut params, &grads, &mut state, 1e-3, 0.0, |_| true).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "head.bias"));
        assert_eq!(state.step, 0);
    }
}
