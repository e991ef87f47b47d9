//! Intensity normalization and random patch extraction.

use super::{LabelMap, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Min-max scaling to `[0, 1]`; a constant volume maps to zeros.
pub fn normalize_intensity(volume: &Tensor) -> Tensor {
    let d = volume.data();
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range <= 0.0 || !range.is_finite() {
        return Tensor::zeros(volume.shape());
    }
    volume.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// An aligned image/label crop with its top-left corner.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub top: usize,
    pub left: usize,
    pub image: Tensor,
    pub labels: LabelMap,
}

/// `n` square patches with uniformly random top-left corners.
pub fn sample_patches(item: &LabeledImage, patch_size: usize, rng: &mut Rng, n: usize) -> Result<Vec<Patch>> {
    let (h, w) = (item.height(), item.width());
    if patch_size == 0 || patch_size > h || patch_size > w {
        return Err(Error::invalid(format!("patch size {patch_size} does not fit a {h}x{w} image")));
    }
    let channels = item.image.shape()[0];
    (0..n)
        .map(|_| {
            let top = rng.below(h - patch_size + 1);
            let left = rng.below(w - patch_size + 1);
            let src = item.image.data();
            let mut data = Vec::with_capacity(channels * patch_size * patch_size);
            for c in 0..channels {
                for y in top..top + patch_size {
                    let row = c * h * w + y * w;
                    data.extend_from_slice(&src[row + left..row + left + patch_size]);
                }
            }
            Ok(Patch {
                top,
                left,
                image: Tensor::new(vec![channels, patch_size, patch_size], data)?,
                labels: item.labels.crop(top, left, patch_size),
            })
        })
        .collect()
}
