//! Epistemic uncertainty methods over the shared residual U-Net.
//!
//! Every method turns one or more forward passes into a
//! [`PredictiveResult`]: mean class probabilities plus a voxel-wise
//! uncertainty map. Sampled methods aggregate with [`aggregate_samples`];
//! single-pass methods use the confidence baseline [`base_uq`].

mod dropout;
mod fast;
mod lpbnn;
mod method;
mod swag;

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::model::argmax_labels;
use crate::tensor::Tensor;

pub use dropout::{
    concrete_mask, concrete_regularizer, dropout_probability, ConcreteDropoutHooks, ConcreteObjective, McDropoutHooks, McDropoutObjective,
    P_LOGIT_SUFFIX,
};
pub use fast::{
    add_fast_weights, add_rank1_posterior, fast_linear, gaussian_kl, rank1_elbo_terms, rank1_kl, tile_batch, FastWeightHooks,
    FastWeightObjective, FastWeights, Rank1Objective,
};
pub use lpbnn::{LayerVae, LpBnnObjective, VaeLoss};
pub use method::{
    image_refs, init_model, load_artifacts, pass_bytes, predict, predict_batch, save_artifacts, train_ensemble, train_method,
    ArtifactManifest, TrainedMethod, ARTIFACT_VERSION,
};
pub use swag::{swag_fit, SwagCollector, SwagPosterior, SwagStats, MIN_VARIANCE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Base,
    McDropout,
    ConcreteDropout,
    Ensemble,
    BatchEnsemble,
    Rank1Bnn,
    LpBnn,
    Swa,
    Swag,
    MultiSwag,
}

impl MethodTag {
    pub const ALL: [MethodTag; 10] = [
        MethodTag::Base,
        MethodTag::McDropout,
        MethodTag::ConcreteDropout,
        MethodTag::Ensemble,
        MethodTag::BatchEnsemble,
        MethodTag::Rank1Bnn,
        MethodTag::LpBnn,
        MethodTag::Swa,
        MethodTag::Swag,
        MethodTag::MultiSwag,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::Base => "base",
            MethodTag::McDropout => "mc_dropout",
            MethodTag::ConcreteDropout => "concrete_dropout",
            MethodTag::Ensemble => "ensemble",
            MethodTag::BatchEnsemble => "batch_ensemble",
            MethodTag::Rank1Bnn => "rank1_bnn",
            MethodTag::LpBnn => "lp_bnn",
            MethodTag::Swa => "swa",
            MethodTag::Swag => "swag",
            MethodTag::MultiSwag => "multi_swag",
        }
    }

    /// Methods whose configuration needs `num_members ≥ 2`.
    pub fn uses_members(self) -> bool {
        matches!(self, MethodTag::Ensemble | MethodTag::BatchEnsemble | MethodTag::Rank1Bnn | MethodTag::LpBnn | MethodTag::MultiSwag)
    }

    /// Methods whose pass count follows `num_samples`.
    pub fn is_sampled(self) -> bool {
        matches!(
            self,
            MethodTag::McDropout
                | MethodTag::ConcreteDropout
                | MethodTag::Rank1Bnn
                | MethodTag::LpBnn
                | MethodTag::Swag
                | MethodTag::MultiSwag
        )
    }
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodTag::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| Error::invalid(format!("unknown method tag {s:?}")))
    }
}

/// Voxel-wise statistic of sampled predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    /// Population standard deviation of the foreground probability.
    #[default]
    Std,
    /// Entropy of the mean distribution, in nats.
    Entropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConcreteConfig {
    pub temperature: f64,
    pub lengthscale: f64,
    pub init_p: f64,
    /// Dataset size in the regularizer; defaults to the training set size.
    pub n_data: Option<usize>,
}

impl Default for ConcreteConfig {
    fn default() -> Self {
        Self { temperature: 0.1, lengthscale: 1e-2, init_p: 0.1, n_data: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rank1Config {
    pub prior_mean: f64,
    pub prior_std: f64,
    /// Initial posterior standard deviation.
    pub init_std: f64,
    pub n_data: Option<usize>,
}

impl Default for Rank1Config {
    fn default() -> Self {
        Self { prior_mean: 1.0, prior_std: 0.1, init_std: 0.05, n_data: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpBnnConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub kl_weight: f64,
    pub lr: f64,
}

impl Default for LpBnnConfig {
    fn default() -> Self {
        Self { latent_dim: 8, hidden: 32, kl_weight: 1e-2, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwagConfig {
    /// Epoch of a single training run at which collection starts. `None`
    /// trains to the early-stopping plateau first and then collects for
    /// `collect_epochs` further epochs from the best weights.
    pub start_epoch: Option<usize>,
    pub interval: usize,
    pub max_rank: usize,
    pub scale: f64,
    pub collect_epochs: usize,
    /// SGD learning rate for the whole SWA/SWAG run.
    pub lr: f64,
    /// Training images used to re-estimate batch-norm statistics of every
    /// averaged or sampled weight vector; `None` uses all of them.
    pub bn_images: Option<usize>,
}

impl Default for SwagConfig {
    fn default() -> Self {
        Self { start_epoch: None, interval: 1, max_rank: 10, scale: 0.5, collect_epochs: 10, lr: 1e-2, bn_images: None }
    }
}

/// Selects one method and carries every method's hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UQMethodSpec {
    pub tag: MethodTag,
    /// Stochastic passes `T` (per member for multi-SWAG).
    pub num_samples: usize,
    pub num_members: usize,
    pub dropout_p: f64,
    pub concrete: ConcreteConfig,
    pub rank1: Rank1Config,
    pub lpbnn: LpBnnConfig,
    pub swag: SwagConfig,
    pub uncertainty: UncertaintyMode,
}

impl Default for UQMethodSpec {
    fn default() -> Self {
        Self {
            tag: MethodTag::Base,
            num_samples: 4,
            num_members: 4,
            dropout_p: 0.1,
            concrete: ConcreteConfig::default(),
            rank1: Rank1Config::default(),
            lpbnn: LpBnnConfig::default(),
            swag: SwagConfig::default(),
            uncertainty: UncertaintyMode::Std,
        }
    }
}

impl UQMethodSpec {
    pub fn new(tag: MethodTag) -> Self {
        Self { tag, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::invalid("num_samples must be ≥ 1"));
        }
        if self.tag.uses_members() && self.num_members < 2 {
            return Err(Error::invalid(format!("{} needs num_members ≥ 2", self.tag)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        let c = &self.concrete;
        if !(c.temperature > 0.0 && c.lengthscale >= 0.0 && c.init_p > 0.0 && c.init_p < 1.0) {
            return Err(Error::invalid("concrete dropout needs t > 0, l ≥ 0 and 0 < init_p < 1"));
        }
        if c.n_data == Some(0) || self.rank1.n_data == Some(0) {
            return Err(Error::invalid("n_data must be ≥ 1"));
        }
        if !(self.rank1.prior_std > 0.0 && self.rank1.init_std > 0.0) {
            return Err(Error::invalid("rank-1 standard deviations must be positive"));
        }
        if self.lpbnn.latent_dim == 0 || self.lpbnn.hidden == 0 || self.lpbnn.kl_weight < 0.0 || self.lpbnn.lr <= 0.0 {
            return Err(Error::invalid("invalid LP-BNN settings"));
        }
        let s = &self.swag;
        if s.max_rank < 2 || s.interval == 0 || s.scale < 0.0 || s.lr <= 0.0 || s.bn_images == Some(0) {
            return Err(Error::invalid("SWAG needs max_rank ≥ 2, interval ≥ 1, scale ≥ 0 and a positive lr"));
        }
        if s.start_epoch.is_none() && s.collect_epochs < 2 {
            return Err(Error::invalid("SWAG collection needs at least two epochs"));
        }
        Ok(())
    }
}

/// Mean prediction and uncertainty of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveResult {
    pub method: MethodTag,
    /// `[C, H, W]`.
    pub mean_probs: Tensor,
    /// `[H, W]`, non-negative.
    pub uncertainty_map: Tensor,
    /// Per-pass `[C, H, W]` maps of sampled methods.
    pub samples: Option<Vec<Tensor>>,
    /// Forward passes behind `mean_probs`.
    pub n_samples: usize,
    pub inference_seconds: f64,
}

impl PredictiveResult {
    /// Argmax segmentation of `mean_probs`.
    pub fn labels(&self) -> Result<LabelMap> {
        argmax_labels(&self.mean_probs)
    }

    pub fn seconds_per_sample(&self) -> f64 {
        self.inference_seconds / self.n_samples.max(1) as f64
    }
}

fn check_probs(op: &'static str, probs: &Tensor) -> Result<(usize, usize)> {
    if probs.ndim() != 3 || probs.shape()[0] < 2 {
        return Err(Error::shape(op, format!("expected [C ≥ 2, H, W], got {:?}", probs.shape())));
    }
    Ok((probs.shape()[0], probs.shape()[1] * probs.shape()[2]))
}

/// `1 − max_c p_c` per voxel.
pub fn base_uq(probs: &Tensor) -> Result<Tensor> {
    let (c, s) = check_probs("base_uq", probs)?;
    let d = probs.data();
    let out = (0..s).map(|v| 1.0 - (0..c).map(|k| d[k * s + v]).fold(f64::NEG_INFINITY, f64::max)).collect();
    Tensor::new(probs.shape()[1..].to_vec(), out)
}

/// Voxel-wise mean of `samples` and the uncertainty statistic of `mode`.
pub fn aggregate_samples(samples: &[Tensor], mode: UncertaintyMode) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::invalid("aggregate_samples: no samples"))?;
    let (c, s) = check_probs("aggregate_samples", first)?;
    if let Some(bad) = samples.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::shape("aggregate_samples", format!("{:?} vs {:?}", bad.shape(), first.shape())));
    }
    let t = samples.len() as f64;
    // Offsets from the first sample keep identical samples exact.
    let mut shift = vec![0.0; first.len()];
    for smp in &samples[1..] {
        for ((m, v), f) in shift.iter_mut().zip(smp.data()).zip(first.data()) {
            *m += v - f;
        }
    }
    let mean: Vec<f64> = first.data().iter().zip(&shift).map(|(f, s)| f + s / t).collect();
    let unc = match mode {
        UncertaintyMode::Std => {
            // Foreground probability is 1 − p_background.
            let mut var = vec![0.0; s];
            for smp in samples {
                for (v, acc) in var.iter_mut().enumerate() {
                    let diff = smp.data()[v] - mean[v];
                    *acc += diff * diff;
                }
            }
            var.into_iter().map(|v| (v / t).sqrt()).collect()
        }
        UncertaintyMode::Entropy => (0..s)
            .map(|v| {
                let h: f64 = (0..c).map(|k| mean[k * s + v]).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
                h.max(0.0)
            })
            .collect(),
    };
    Ok((Tensor::new(first.shape().to_vec(), mean)?, Tensor::new(first.shape()[1..].to_vec(), unc)?))
}
