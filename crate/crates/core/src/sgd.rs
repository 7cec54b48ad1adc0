//! SGD with momentum and a milestone-decay learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::Real;

/// Outer-loop schedule: epochs, batch size, SGD momentum, and a learning
/// rate that decays by `gamma` at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Schedule {
    pub fn new(
        epochs: usize,
        batch_size: usize,
        lr: f64,
        momentum: f64,
        milestones: Vec<usize>,
        gamma: f64,
    ) -> Result<Self> {
        if !(lr > 0.0) || !(gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must stay positive (lr {lr}, gamma {gamma})"
            )));
        }
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        Ok(Schedule {
            epochs,
            batch_size,
            lr,
            momentum,
            milestones,
            gamma,
        })
    }

    /// Desk-scale default: 30 epochs, batch 128, momentum 0.9, lr 0.1
    /// decaying by 0.1 at epochs 15 and 23.
    pub fn desk_default() -> Self {
        Schedule {
            epochs: 30,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            milestones: vec![15, 23],
            gamma: 0.1,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        let mut lr = self.lr;
        for _ in 0..decays {
            lr *= self.gamma;
        }
        lr
    }
}

/// Momentum SGD: `v <- mu * v + g`, `p <- p - lr * v`.
#[derive(Debug)]
pub struct Sgd {
    velocity: Vec<Vec<Real>>,
    momentum: Real,
}

impl Sgd {
    pub fn new(param_sizes: &[usize], momentum: f64) -> Self {
        Sgd {
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            momentum: momentum as Real,
        }
    }

    pub fn step(&mut self, slot: usize, params: &mut [Real], grad: &[Real], lr: f64) {
        let v = &mut self.velocity[slot];
        debug_assert_eq!(v.len(), params.len());
        debug_assert_eq!(grad.len(), params.len());
        let lr = lr as Real;
        for i in 0..params.len() {
            v[i] = self.momentum * v[i] + grad[i];
            params[i] -= lr * v[i];
        }
    }
}
