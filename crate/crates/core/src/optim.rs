//! Gradient-descent optimizers and the polynomial learning-rate decay.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::{Error, Real, Result};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_PO_ITERS: usize = 50;
pub const LR_DECAY_POWER: f64 = 0.9;

/// `lr * (1 - (m - 1) / epochs)^0.9` for the 1-based epoch `m`.
pub fn lr_schedule(m: usize, epochs: usize, lr: f64) -> Result<f64> {
    if m == 0 || m > epochs {
        return Err(Error::invalid(format!("epoch {m} outside 1..={epochs}")));
    }
    if m == 1 {
        return Ok(lr);
    }
    let frac = 1.0 - (m - 1) as f64 / epochs as f64;
    Ok(lr * num_traits::Float::powf(frac, LR_DECAY_POWER))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct OptimConfig {
    pub lr_init: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub ncc_window: usize,
    pub po_iters: usize,
    pub optimizer: OptimizerKind,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_init: DEFAULT_LR,
            epochs: DEFAULT_EPOCHS,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 1.0,
            ncc_window: crate::objective::DEFAULT_NCC_WINDOW,
            po_iters: DEFAULT_PO_ITERS,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr_init)));
        }
        if self.po_iters == 0 || self.epochs == 0 {
            return Err(Error::invalid("po_iters and epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("Adam needs betas in [0, 1) and eps > 0"));
        }
        self.loss().validate()
    }

    pub fn loss(&self) -> crate::objective::LossConfig {
        crate::objective::LossConfig { lambda: self.lambda, ncc_window: self.ncc_window }
    }

    pub fn build<T: Real>(&self) -> Optimizer<T> {
        match self.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(self.beta1, self.beta2, self.eps)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd),
        }
    }
}

/// Adam with bias-corrected moments, one state slot per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|t| vec![T::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - num_traits::Float::powf(self.beta1, self.step as f64);
        let c2 = 1.0 - num_traits::Float::powf(self.beta2, self.step as f64);
        let step_size = T::lit(lr / c1);
        let c2 = T::lit(c2);
        let eps = T::lit(self.eps);
        for ((t, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..t.values.len() {
                let g = t.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let denom = (v[i] / c2).sqrt() + eps;
                t.values[i] = t.values[i] - step_size * m[i] / denom;
            }
        }
    }
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Sgd;

impl Sgd {
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let lr = T::lit(lr);
        for t in store.iter_mut() {
            for (v, &g) in t.values.iter_mut().zip(&t.grad) {
                *v = *v - lr * g;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd(Sgd),
}

impl<T: Real> Optimizer<T> {
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        match self {
            Optimizer::Adam(a) => a.step(store, lr),
            Optimizer::Sgd(s) => s.step(store, lr),
        }
    }
}
