use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam (β = 0.9, 0.999, ε = 1e-8) or SGD with momentum 0.9.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, step: 0, first: IndexMap::new(), second: IndexMap::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update to every trainable tensor that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        for (name, g) in grads {
            if params.kind(name) != Some(ParamKind::Trainable) {
                continue;
            }
            let w = params.get_mut(name)?;
            if w.shape() != g.shape() {
                return Err(Error::shape("optimizer", format!("{name}: weight {:?}, grad {:?}", w.shape(), g.shape())));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((wi, gi), mi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mi = Self::MOMENTUM * *mi + gi;
                        *wi -= self.lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - Self::BETA1.powf(t);
                    let c2 = 1.0 - Self::BETA2.powf(t);
                    for (((wi, gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = Self::BETA1 * *mi + (1.0 - Self::BETA1) * gi;
                        *vi = Self::BETA2 * *vi + (1.0 - Self::BETA2) * gi * gi;
                        *wi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
