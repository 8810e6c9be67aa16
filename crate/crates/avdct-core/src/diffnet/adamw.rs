//! Decoupled-weight-decay adaptive-moment parameter update.

use crate::error::{CodecError, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second-moment accumulators per named parameter. The map is ordered,
/// so update order is deterministic.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Apply one optimizer step to every named parameter.
///
/// `params` and `grads` must pair up by name and shape. Non-finite gradients
/// abort with a divergence error before any parameter is touched.
pub fn adamw_step(
    params: &mut [(&str, &mut Tensor)],
    grads: &[(&str, &Tensor)],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(CodecError::InvalidInput(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((pname, param), (gname, grad)) in params.iter().zip(grads) {
        if pname != gname {
            return Err(CodecError::InvalidInput(format!(
                "parameter `{pname}` paired with gradient `{gname}`"
            )));
        }
        if param.shape() != grad.shape() {
            return Err(CodecError::InvalidInput(format!(
                "gradient shape {:?} does not match parameter `{pname}` shape {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if !grad.all_finite() {
            return Err(CodecError::Divergence(format!(
                "non-finite gradient for parameter `{pname}` at step {}",
                state.step + 1
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for ((name, param), (_, grad)) in params.iter_mut().zip(grads) {
        let slot = state
            .moments
            .entry((*name).to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        if slot.0.len() != param.len() {
            return Err(CodecError::InvalidInput(format!(
                "optimizer state for `{name}` has stale length {}",
                slot.0.len()
            )));
        }
        for (i, theta) in param.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i];
            slot.0[i] = cfg.beta1 * slot.0[i] + (1.0 - cfg.beta1) * g;
            slot.1[i] = cfg.beta2 * slot.1[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = slot.0[i] / bc1;
            let v_hat = slot.1[i] / bc2;
            *theta -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *theta);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay(lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn first_step_moves_opposite_gradient_sign() {
        let cfg = no_decay(0.01);
        let mut theta = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let grad = Tensor::from_vec(&[3], vec![3.0, -0.2, 1e-4]).unwrap();
        let mut state = AdamWState::new();
        adamw_step(
            &mut [("theta", &mut theta)],
            &[("theta", &grad)],
            &mut state,
            &cfg,
        )
        .unwrap();
        // bias-corrected m_hat / sqrt(v_hat) = g / |g| up to eps
        let expect = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (got, want) in theta.data().iter().zip(expect) {
            assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let cfg = no_decay(0.1);
        let mut theta = Tensor::from_vec(&[2], vec![4.0, -1.0]).unwrap();
        let grad = Tensor::zeros(&[2]);
        let mut state = AdamWState::new();
        adamw_step(
            &mut [("theta", &mut theta)],
            &[("theta", &grad)],
            &mut state,
            &cfg,
        )
        .unwrap();
        assert_eq!(theta.data(), &[4.0, -1.0]);
    }

    #[test]
    fn two_steps_on_quadratic_match_hand_computation() {
        // f(theta) = theta^2, theta0 = 1, lr = 0.1, no decay.
        let cfg = no_decay(0.1);
        let mut theta = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut state = AdamWState::new();

        // hand-evaluated recurrence
        let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut expect = 1.0;
        for step in 1..=2 {
            let g = 2.0 * theta.data()[0];
            let grad = Tensor::from_vec(&[1], vec![g]).unwrap();
            adamw_step(
                &mut [("theta", &mut theta)],
                &[("theta", &grad)],
                &mut state,
                &cfg,
            )
            .unwrap();

            let ge = 2.0 * expect;
            m = b1 * m + (1.0 - b1) * ge;
            v = b2 * v + (1.0 - b2) * ge * ge;
            let m_hat = m / (1.0 - b1.powi(step));
            let v_hat = v / (1.0 - b2.powi(step));
            expect -= cfg.lr * m_hat / (v_hat.sqrt() + eps);
            assert!(
                (theta.data()[0] - expect).abs() <= 1e-12,
                "step {step}: {} vs {expect}",
                theta.data()[0]
            );
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let cfg = AdamWConfig::default();
        let mut theta = Tensor::zeros(&[1]);
        let grad = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        let mut state = AdamWState::new();
        let err = adamw_step(
            &mut [("theta", &mut theta)],
            &[("theta", &grad)],
            &mut state,
            &cfg,
        );
        assert!(matches!(err, Err(CodecError::Divergence(_))));
    }

    #[test]
    fn decay_moves_parameters_even_without_gradient() {
        let cfg = AdamWConfig {
            lr: 0.001,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mut theta = Tensor::from_vec(&[1], vec![100.0]).unwrap();
        let grad = Tensor::zeros(&[1]);
        let mut state = AdamWState::new();
        adamw_step(
            &mut [("theta", &mut theta)],
            &[("theta", &grad)],
            &mut state,
            &cfg,
        )
        .unwrap();
        assert!((theta.data()[0] - 100.0 * (1.0 - 0.001 * 0.01)).abs() <= 1e-12);
    }
}
