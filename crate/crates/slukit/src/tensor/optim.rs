//! Adam with bias correction.

use crate::error::{Error, Result};

use super::{Elem, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct Moments<E: Elem> {
    m: Vec<E>,
    v: Vec<E>,
}

/// Optimizer state: per-parameter first and second moments plus the shared
/// step counter. Moment buffers are zero until the first step.
pub struct Adam<E: Elem> {
    cfg: AdamConfig,
    t: u64,
    slots: Vec<Moments<E>>,
}

impl<E: Elem> Adam<E> {
    /// Registers one moment slot per parameter size, in order.
    pub fn new(cfg: AdamConfig, param_sizes: &[usize]) -> Result<Self> {
        if cfg.lr <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        let slots = param_sizes
            .iter()
            .map(|&n| Moments {
                m: vec![E::ZERO; n],
                v: vec![E::ZERO; n],
            })
            .collect();
        Ok(Adam { cfg, t: 0, slots })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Lets a schedule adjust the rate between steps.
    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.cfg.lr = lr;
        Ok(())
    }

    /// One update over all registered parameters. A parameter without a
    /// gradient buffer is treated as having zero gradient (its moments
    /// decay, its value is only moved by any remaining momentum).
    pub fn step(&mut self, params: &mut [&mut Tensor<E>]) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::Contract {
                op: "adam_step",
                msg: format!(
                    "{} parameters registered, {} given",
                    self.slots.len(),
                    params.len()
                ),
            });
        }
        self.t += 1;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_m_b1 = E::ONE - b1;
        let one_m_b2 = E::ONE - b2;
        let corr1 = E::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let corr2 = E::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = E::from_f64(self.cfg.lr);
        let eps = E::from_f64(self.cfg.epsilon);

        for (slot, param) in self.slots.iter_mut().zip(params.iter_mut()) {
            if slot.m.len() != param.numel() {
                return Err(Error::Contract {
                    op: "adam_step",
                    msg: format!(
                        "moment size {} does not match parameter size {}",
                        slot.m.len(),
                        param.numel()
                    ),
                });
            }
            let zero_grad = vec![E::ZERO; param.numel()];
            let grad: &[E] = param.grad().unwrap_or(&zero_grad);
            // Split borrow: data and grad were both read from param above.
            let grad = grad.to_vec();
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + one_m_b1 * g;
                slot.v[i] = b2 * slot.v[i] + one_m_b2 * g * g;
                let mhat = slot.m[i] / corr1;
                let vhat = slot.v[i] / corr2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive_lr() {
        let cfg = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(Adam::<f32>::new(cfg, &[4]).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = Adam::<f32>::new(AdamConfig::default(), &[2]).unwrap();
        let mut p = Tensor::from_vec(vec![1.0f32, -2.0]).with_requires_grad();
        p.set_grad(vec![0.0, 0.0]);
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign_for_large_grads() {
        // Independently derived single-step form: from zero moments,
        // m = (1-b1) g, v = (1-b2) g^2; after bias correction mhat = g,
        // vhat = g^2, so delta = -lr * g / (|g| + eps) ~ -lr * sign(g).
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut adam = Adam::<f64>::new(cfg, &[3]).unwrap();
        let mut p = Tensor::from_vec(vec![0.0f64, 0.0, 0.0]).with_requires_grad();
        p.set_grad(vec![10.0, -3.0, 0.5]);
        adam.step(&mut [&mut p]).unwrap();
        for (&got, &g) in p.data().iter().zip(&[10.0f64, -3.0, 0.5]) {
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!(
                (got - expected).abs() < 1e-9,
                "got {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut adam = Adam::<f32>::new(AdamConfig::default(), &[1, 1]).unwrap();
        let mut a = Tensor::from_vec(vec![0.5f32]).with_requires_grad();
        let mut b = Tensor::from_vec(vec![0.5f32]).with_requires_grad();
        a.set_grad(vec![0.3]);
        b.set_grad(vec![0.3]);
        adam.step(&mut [&mut a, &mut b]).unwrap();
        assert_eq!(a.data()[0], b.data()[0]);
    }
}
