//! Parameter, memory and timing profile of a trained method.

use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::Result;
use crate::rng::Rng;
use crate::uq::{pass_bytes, predict, TrainedMethod, UQMethodSpec};

/// Timed predictions after one warm-up.
pub const TIMING_REPEATS: usize = 5;

/// Storage width of one parameter.
pub const BYTES_PER_PARAM: usize = std::mem::size_of::<f64>();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityRow {
    pub method: String,
    /// Epochs summed over every trained network.
    pub train_epochs: usize,
    /// `train_epochs` divided by the number of trained networks.
    pub train_epochs_per_member: f64,
    pub train_seconds: f64,
    pub inference_seconds_per_sample: f64,
    pub total_params: usize,
    pub params_mb: f64,
    pub pass_mb: f64,
}

impl ScalabilityRow {
    /// Copy with wall-clock fields zeroed.
    pub fn canonical(&self) -> Self {
        Self { train_seconds: 0.0, inference_seconds_per_sample: 0.0, ..self.clone() }
    }
}

/// Trainable entries of every network plus any layer VAEs.
pub fn total_params(trained: &TrainedMethod) -> usize {
    trained.members.iter().map(|m| m.params.trainable_count()).sum::<usize>()
        + trained.vaes.iter().map(|v| v.params.trainable_count()).sum::<usize>()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Profiles `trained` on `sample`. Sampled methods are timed with a single
/// pass per member; the per-sample time is a prediction's wall time over
/// its pass count.
pub fn profile(label: &str, spec: &UQMethodSpec, trained: &TrainedMethod, sample: &LabeledImage, rng: &mut Rng) -> Result<ScalabilityRow> {
    let total = total_params(trained);
    let pass = pass_bytes(spec, trained, sample, rng)?;
    let timed = UQMethodSpec { num_samples: if spec.tag.is_sampled() { 1 } else { spec.num_samples }, ..spec.clone() };
    predict(&timed, trained, &sample.image, rng)?;
    let mut times = Vec::with_capacity(TIMING_REPEATS);
    for _ in 0..TIMING_REPEATS {
        times.push(predict(&timed, trained, &sample.image, rng)?.seconds_per_sample());
    }
    let train_epochs: usize = trained.histories.iter().map(|h| h.epochs.len()).sum();
    Ok(ScalabilityRow {
        method: label.to_string(),
        train_epochs,
        train_epochs_per_member: train_epochs as f64 / trained.histories.len().max(1) as f64,
        train_seconds: trained.histories.iter().map(|h| h.train_seconds).sum(),
        inference_seconds_per_sample: median(times),
        total_params: total,
        params_mb: (total * BYTES_PER_PARAM) as f64 / 1e6,
        pass_mb: pass as f64 / 1e6,
    })
}
