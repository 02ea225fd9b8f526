//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restores a saved state; moment lists must align.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape("adam moment lists disagree"));
        }
        Ok(Adam { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one descent step. A non-finite gradient rejects the whole step
    /// and leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape(format!(
                    "adam slot {i}: moment {:?}, param {:?}, grad {:?}",
                    self.m[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                log::warn!("adam: non-finite gradient in slot {i}; step rejected");
                return Err(Error::NonFinite(format!("gradient slot {i}")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = one(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[&p]);
        adam.step(&mut [&mut p], &[one(&[1.0, 1.0])]).unwrap();
        let before = p.clone();
        let m_before = adam.first_moments()[0].clone();
        adam.step(&mut [&mut p], &[one(&[0.0, 0.0])]).unwrap();
        let m_after = &adam.first_moments()[0];
        assert!(m_after.data()[0] < m_before.data()[0]);
        // m_hat/v_hat is nonzero after a prior nonzero gradient, so the
        // parameters keep moving; from fresh state they must not.
        let mut q = one(&[1.0, -2.0]);
        let mut fresh = Adam::new(AdamConfig::with_lr(0.1), &[&q]);
        fresh.step(&mut [&mut q], &[one(&[0.0, 0.0])]).unwrap();
        assert_eq!(q, one(&[1.0, -2.0]));
        assert_ne!(before, p);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = one(&[0.0, 0.0, 0.0]);
        let cfg = AdamConfig::with_lr(0.01);
        let mut adam = Adam::new(cfg, &[&p]);
        let g = [0.5, -3.0, 1e-3];
        adam.step(&mut [&mut p], &[one(&g)]).unwrap();
        for (w, gi) in p.data().iter().zip(g) {
            let want = -0.01 * gi / (gi.abs() + cfg.eps);
            assert!((w - want).abs() < 1e-15, "{w} vs {want}");
        }
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let mut p = one(&[0.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3), &[&p]);
        let mut last = 0.0;
        for _ in 0..2000 {
            let prev = p.data()[0];
            adam.step(&mut [&mut p], &[one(&[0.7])]).unwrap();
            last = prev - p.data()[0];
        }
        assert!((last - 1e-3).abs() < 1e-9, "{last}");
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut p = one(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        let before = adam.clone();
        assert!(adam.step(&mut [&mut p], &[one(&[f64::NAN])]).is_err());
        assert_eq!(adam, before);
        assert_eq!(p, one(&[1.0]));
    }
}
