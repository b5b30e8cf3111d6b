//! AdamW and a plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moment(&self, id: usize) -> &Tensor {
        &self.m[id]
    }

    pub fn second_moment(&self, id: usize) -> &Tensor {
        &self.v[id]
    }

    /// One AdamW step. Parameters are left untouched if any gradient is not
    /// finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer over {} params, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(bad) = grads.first_non_finite() {
            let g = grads.get(bad);
            let count = g.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::NonFinite(format!(
                "gradient of {} has {count} non-finite values at step {}",
                params.name(bad),
                self.step + 1
            )));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.get(id).data();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

pub const STOP_LR: f64 = 1e-7;

/// Reduces the learning rate when a higher-is-better metric stops improving.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub best: Option<f64>,
    pub bad_evals: usize,
    pub history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauOutcome {
    pub lr: f64,
    pub reduced: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!("plateau factor {factor} outside (0,1)")));
        }
        Ok(PlateauSchedule {
            patience,
            factor,
            min_lr,
            best: None,
            bad_evals: 0,
            history: Vec::new(),
        })
    }

    /// Records `metric` and returns the (possibly reduced) learning rate.
    /// Reduction happens once `patience` evaluations in a row failed to
    /// beat the best value.
    pub fn step(&mut self, lr: f64, metric: f64) -> Result<PlateauOutcome> {
        if !metric.is_finite() {
            return Err(Error::NonFinite(format!("plateau metric {metric}")));
        }
        self.history.push(metric);
        match self.best {
            Some(b) if metric <= b => self.bad_evals += 1,
            _ => {
                self.best = Some(metric);
                self.bad_evals = 0;
            }
        }
        let mut new_lr = lr;
        let mut reduced = false;
        if self.bad_evals >= self.patience.max(1) {
            new_lr = (lr * self.factor).max(self.min_lr);
            reduced = new_lr < lr;
            self.bad_evals = 0;
        }
        Ok(PlateauOutcome {
            lr: new_lr,
            reduced,
            stop: new_lr < STOP_LR,
        })
    }
}
