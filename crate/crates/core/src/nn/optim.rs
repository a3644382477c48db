use super::ParamSet;
use crate::error::{Error, Result};

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update with learning rate `lr` from the flat gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[f32], lr: f32) -> Result<()> {
        if grads.len() != self.m.len() || params.numel() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer sized for {} parameters, got {} gradients for {}",
                self.m.len(),
                grads.len(),
                params.numel()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        params.update_each(|i, p| {
            let g = grads[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
        Ok(())
    }
}

/// L2 norm of a flat gradient.
pub fn grad_norm(grads: &[f32]) -> f32 {
    grads.iter().map(|g| g * g).sum::<f32>().sqrt()
}

/// Rescales `grads` in place so its norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f32) -> f32 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / (norm + 1e-6);
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}
