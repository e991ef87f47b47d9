//! Stochastic weight averaging and its Gaussian posterior.
//!
//! Weight vectors are the concatenated trainable tensors of a model in store
//! order (`ParamStore::flatten`).

use std::collections::VecDeque;

use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{EpochRecord, Model, ParamKind, ParamStore, TensorArchive, TrainingHook};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower bound applied to the diagonal variance before its square root.
pub const MIN_VARIANCE: f64 = 1e-30;

/// Running first and second moments plus the last `max_rank` deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct SwagStats {
    pub mean: Vec<f64>,
    pub sq_mean: Vec<f64>,
    /// Columns `w_i − θ̄_i`, oldest first.
    pub deviations: VecDeque<Vec<f64>>,
    pub n: usize,
    pub max_rank: usize,
}

impl SwagStats {
    pub fn new(dim: usize, max_rank: usize) -> Self {
        Self { mean: vec![0.0; dim], sq_mean: vec![0.0; dim], deviations: VecDeque::new(), n: 0, max_rank }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Folds in one snapshot.
    pub fn update(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::shape("swag update", format!("snapshot of {} entries for {} parameters", w.len(), self.dim())));
        }
        let k = (self.n + 1) as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.sq_mean.iter_mut()).zip(w) {
            *m += (x - *m) / k;
            *s += (x * x - *s) / k;
        }
        self.n += 1;
        if self.max_rank > 0 {
            if self.deviations.len() == self.max_rank {
                self.deviations.pop_front();
            }
            self.deviations.push_back(w.iter().zip(&self.mean).map(|(x, m)| x - m).collect());
        }
        Ok(())
    }

    /// SWA solution θ̄.
    pub fn swa_mean(&self) -> Result<&[f64]> {
        if self.n == 0 {
            return Err(Error::invalid("swa_mean before any snapshot"));
        }
        Ok(&self.mean)
    }

    /// `max(0, E[w²] − θ̄²)` per entry.
    pub fn diag_var(&self) -> Vec<f64> {
        self.sq_mean.iter().zip(&self.mean).map(|(s, m)| (s - m * m).max(0.0)).collect()
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let d = self.dim();
        let mut tensors = ParamStore::new();
        tensors.insert("mean", Tensor::new(vec![d], self.mean.clone())?, ParamKind::Buffer)?;
        tensors.insert("sq_mean", Tensor::new(vec![d], self.sq_mean.clone())?, ParamKind::Buffer)?;
        let cols: Vec<f64> = self.deviations.iter().flatten().copied().collect();
        tensors.insert("deviations", Tensor::new(vec![self.deviations.len(), d], cols)?, ParamKind::Buffer)?;
        Ok(TensorArchive { meta: json!({ "n": self.n, "max_rank": self.max_rank }), tensors })
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let num = |k: &str| {
            a.meta.get(k).and_then(|v| v.as_u64()).map(|v| v as usize).ok_or_else(|| Error::Format(format!("swag archive lacks {k}")))
        };
        let mean = a.tensors.get("mean")?.data().to_vec();
        let sq_mean = a.tensors.get("sq_mean")?.data().to_vec();
        let dev = a.tensors.get("deviations")?;
        if sq_mean.len() != mean.len() || dev.ndim() != 2 || dev.shape()[1] != mean.len() {
            return Err(Error::Format("swag archive tensors disagree in length".into()));
        }
        let deviations = dev.data().chunks(mean.len().max(1)).take(dev.shape()[0]).map(<[f64]>::to_vec).collect();
        Ok(Self { mean, sq_mean, deviations, n: num("n")?, max_rank: num("max_rank")? })
    }
}

/// Gaussian `N(θ̄, ½(Σ_diag + DDᵀ/(K−1)))` fitted to collected snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct SwagPosterior {
    pub mean: Vec<f64>,
    pub diag_var: Vec<f64>,
    pub deviations: Vec<Vec<f64>>,
}

pub fn swag_fit(stats: &SwagStats) -> Result<SwagPosterior> {
    if stats.n < 2 {
        return Err(Error::invalid(format!("swag_fit needs at least two snapshots, has {}", stats.n)));
    }
    Ok(SwagPosterior { mean: stats.mean.clone(), diag_var: stats.diag_var(), deviations: stats.deviations.iter().cloned().collect() })
}

impl SwagPosterior {
    /// Number of deviation columns `K`.
    pub fn rank(&self) -> usize {
        self.deviations.len()
    }

    /// `θ̄ + scale·(Σ_diag^{1/2} z₁/√2 + D z₂/√(2(K−1)))`; the low-rank term is
    /// dropped when `K < 2`.
    pub fn sample(&self, scale: f64, rng: &mut Rng) -> Vec<f64> {
        let mut noise: Vec<f64> = self.diag_var.iter().map(|v| (v.max(MIN_VARIANCE) / 2.0).sqrt() * rng.normal()).collect();
        let k = self.rank();
        if k >= 2 {
            let c = 1.0 / (2.0 * (k - 1) as f64).sqrt();
            for col in &self.deviations {
                let z = rng.normal() * c;
                noise.iter_mut().zip(col).for_each(|(n, d)| *n += d * z);
            }
        }
        self.mean.iter().zip(noise).map(|(m, n)| m + scale * n).collect()
    }

    /// Diagonal of the sampling covariance at unit scale.
    pub fn sample_variance(&self) -> Vec<f64> {
        let k = self.rank();
        let mut v: Vec<f64> = self.diag_var.iter().map(|d| d.max(MIN_VARIANCE) / 2.0).collect();
        if k >= 2 {
            let c = 1.0 / (2.0 * (k - 1) as f64);
            for col in &self.deviations {
                v.iter_mut().zip(col).for_each(|(v, d)| *v += c * d * d);
            }
        }
        v
    }
}

/// Snapshots the trainable weights every `interval` epochs from `start_epoch`.
#[derive(Clone, Debug)]
pub struct SwagCollector {
    pub stats: SwagStats,
    pub start_epoch: usize,
    pub interval: usize,
}

impl SwagCollector {
    pub fn new(model: &Model, max_rank: usize, start_epoch: usize, interval: usize) -> Self {
        Self { stats: SwagStats::new(model.params.trainable_count(), max_rank), start_epoch, interval: interval.max(1) }
    }
}

impl TrainingHook for SwagCollector {
    fn on_epoch_end(&mut self, model: &Model, record: &mut EpochRecord) -> Result<()> {
        if record.epoch >= self.start_epoch && (record.epoch - self.start_epoch).is_multiple_of(self.interval) {
            self.stats.update(&model.params.flatten(|_| true))?;
        }
        Ok(())
    }
}
