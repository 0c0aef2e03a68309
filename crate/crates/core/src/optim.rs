//! SGD (with momentum) and Adam.
//!
//! Buffers are kept per parameter slot in the network's canonical parameter
//! order, so the same optimizer instance must always step the same network.
//! Frozen layers keep their parameters and buffers untouched.

use crate::error::{Error, Result};
use crate::layers::Network;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
    step_count: u64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::InvalidParam(format!("sgd lr {lr}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
            step_count: 0,
        })
    }

    pub fn step(&mut self, net: &mut Network) -> Result<()> {
        let params = net.params_mut();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::InvalidParam(
                "optimizer bound to a different network".into(),
            ));
        }
        for ((param, frozen), vel) in params.into_iter().zip(self.velocity.iter_mut()) {
            if frozen {
                continue;
            }
            let Some(grad) = param.grad() else { continue };
            if grad.len() != vel.len() {
                return Err(Error::ShapeMismatch {
                    context: "sgd buffer".into(),
                    expected: vec![vel.len()],
                    got: vec![grad.len()],
                });
            }
            let grad = grad.to_vec();
            let lr = self.lr;
            let mu = self.momentum;
            for ((w, v), g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
        self.step_count += 1;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        Adam::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::InvalidParam(format!("adam lr {lr}")));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
        })
    }

    pub fn step(&mut self, net: &mut Network) -> Result<()> {
        let params = net.params_mut();
        if self.m.is_empty() {
            self.m = params.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidParam(
                "optimizer bound to a different network".into(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (param, frozen)) in params.into_iter().enumerate() {
            if frozen {
                continue;
            }
            let Some(grad) = param.grad() else { continue };
            if grad.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch {
                    context: "adam buffer".into(),
                    expected: vec![self.m[i].len()],
                    got: vec![grad.len()],
                });
            }
            let grad = grad.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// Step decay x0.2 once past 50% and again past 80% of the epoch budget.
/// Epochs are 1-based.
pub fn decayed_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    let mut lr = base;
    if epoch > total_epochs / 2 {
        lr *= 0.2;
    }
    if epoch > total_epochs * 4 / 5 {
        lr *= 0.2;
    }
    lr
}
