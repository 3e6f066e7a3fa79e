use crate::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<f32>>,
    second: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor<f32>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Rebuild a state from stored moments (checkpoint resume).
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        first: Vec<Tensor<f32>>,
        second: Vec<Tensor<f32>>,
    ) -> Result<Self> {
        for (m, v) in first.iter().zip(&second) {
            if m.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: m.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        if first.len() != second.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                reason: format!("{} first moments, {} second", first.len(), second.len()),
            });
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<f32>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<f32>] {
        &self.second
    }

    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(lr, params, grads)
    }

    /// One bias-corrected Adam update using `lr` instead of the configured rate.
    pub fn step_with_lr(
        &mut self,
        lr: f64,
        params: &mut [Tensor<f32>],
        grads: &[Tensor<f32>],
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                reason: format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi as f64;
                let m_new = beta1 * *mi as f64 + (1.0 - beta1) * gi;
                let v_new = beta2 * *vi as f64 + (1.0 - beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *pi = (*pi as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor<f32> {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![scalar(1.5), Tensor::full(&[2, 2], -0.25)];
        let before = params.clone();
        let grads: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![scalar(0.0)];
        let config = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut state = AdamState::new(config, &params);
        state.step(&mut params, &[scalar(1.0)]).unwrap();
        // m̂ = v̂ = 1, so the update is lr / (1 + eps)
        assert!((params[0].data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let mut params = vec![scalar(0.3), scalar(0.3)];
        let grads = vec![scalar(-0.7), scalar(-0.7)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            state.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params[0], params[1]);
    }

    #[test]
    fn moments_start_at_zero() {
        let params = vec![Tensor::full(&[3], 2.0f32)];
        let state = AdamState::new(AdamConfig::default(), &params);
        assert!(state.first_moments()[0].data().iter().all(|&x| x == 0.0));
        assert!(state.second_moments()[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        let err = state.step(&mut params, &[Tensor::zeros(&[3])]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }
}
