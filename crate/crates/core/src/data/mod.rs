//! Datasets: synthetic generation, splitting, preprocessing and file IO.

pub mod nifti;
pub mod preprocess;
pub mod rawtensor;
pub mod split;
pub mod synth;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use preprocess::{normalize_intensity, sample_patches, Patch};
pub use split::{kfold_split, ood_split, single_split, Fold, SplitPlan};
pub use synth::{synth_generate, SynthConfig};

pub const BACKGROUND: u8 = 0;
pub const ORGAN: u8 = 1;
pub const TUMOR: u8 = 2;

/// Per-voxel class indices of a single 2-D image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("LabelMap", format!("{height}x{width} needs {} labels, got {}", height * width, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Class indices as a `[H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width], self.data.iter().map(|&c| c as f64).collect())
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> LabelMap {
        let mut data = Vec::with_capacity(size * size);
        for y in top..top + size {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + size]);
        }
        LabelMap { height: size, width: size, data }
    }
}

/// One image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    /// `[1, H, W]` intensities.
    pub image: Tensor,
    pub labels: LabelMap,
    /// `|tumor| / |organ|`, present when the dataset carries tumor semantics.
    pub tumor_ratio: Option<f64>,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

/// `|class 2| / |class 1|`.
pub fn tumor_ratio(labels: &LabelMap) -> Result<f64> {
    let organ = labels.count(ORGAN);
    if organ == 0 {
        return Err(Error::invalid("tumor_ratio: label map has no organ voxels"));
    }
    Ok(labels.count(TUMOR) as f64 / organ as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub ids: Vec<String>,
    /// Aligned with `ids`; `null` where the dataset has no tumor semantics.
    pub tumor_ratios: Vec<Option<f64>>,
}

/// Writes `images/<id>.uqtn`, `labels/<id>.uqtn` and `manifest.json`.
pub fn write_dataset_dir(dir: &Path, images: &[LabeledImage], num_classes: usize) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    for item in images {
        rawtensor::write_file(&dir.join("images").join(format!("{}.uqtn", item.id)), &rawtensor::RawTensor::F64(item.image.clone()))?;
        let labels = rawtensor::RawTensor::U8 { shape: vec![item.height(), item.width()], data: item.labels.data.clone() };
        rawtensor::write_file(&dir.join("labels").join(format!("{}.uqtn", item.id)), &labels)?;
    }
    let manifest = DatasetManifest {
        num_classes,
        ids: images.iter().map(|i| i.id.clone()).collect(),
        tumor_ratios: images.iter().map(|i| i.tumor_ratio).collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a dataset directory written by [`write_dataset_dir`]. Images may
/// also be NIfTI (`.nii` / `.nii.gz`); 3-D volumes contribute their middle
/// axial slice. Intensities are normalized to `[0, 1]` on load.
pub fn read_dataset_dir(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledImage>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut out = Vec::with_capacity(manifest.ids.len());
    for (id, ratio) in manifest.ids.iter().zip(&manifest.tumor_ratios) {
        let image = read_volume_slice(&dir.join("images"), id)?;
        let labels = read_volume_slice(&dir.join("labels"), id)?;
        let (h, w) = (labels.shape()[1], labels.shape()[2]);
        if image.shape() != labels.shape() {
            return Err(Error::Format(format!("{id}: image {:?} and labels {:?} differ", image.shape(), labels.shape())));
        }
        let labels = LabelMap::new(h, w, labels.data().iter().map(|&v| v.round() as u8).collect())?;
        out.push(LabeledImage { id: id.clone(), image: normalize_intensity(&image), labels, tumor_ratio: *ratio });
    }
    Ok((manifest, out))
}

fn read_volume_slice(dir: &Path, id: &str) -> Result<Tensor> {
    let raw = dir.join(format!("{id}.uqtn"));
    let vol = if raw.exists() {
        rawtensor::read_file(&raw)?.to_f64()
    } else {
        let nii = [format!("{id}.nii.gz"), format!("{id}.nii")]
            .into_iter()
            .map(|n| dir.join(n))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Format(format!("no volume for {id} in {}", dir.display())))?;
        nifti::read_nifti(&nii)?.volume
    };
    to_single_slice(vol)
}

/// `[1, H, W]` view of a 2-D map or the middle slice of a `[Z, Y, X]` volume.
fn to_single_slice(vol: Tensor) -> Result<Tensor> {
    match *vol.shape() {
        [h, w] => vol.reshape(&[1, h, w]),
        [z, h, w] => {
            let k = z / 2;
            Tensor::new(vec![1, h, w], vol.data()[k * h * w..(k + 1) * h * w].to_vec())
        }
        _ => Err(Error::Format(format!("unsupported volume shape {:?}", vol.shape()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tumor_ratio_counts() {
        let mut data = vec![0u8; 200];
        data[..100].fill(ORGAN);
        data[100..110].fill(TUMOR);
        let l = LabelMap::new(10, 20, data).unwrap();
        assert_eq!(tumor_ratio(&l).unwrap(), 0.1);
        let l = LabelMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(tumor_ratio(&l).unwrap(), 0.0);
        let l = LabelMap::new(2, 2, vec![0, 2, 0, 0]).unwrap();
        assert!(tumor_ratio(&l).is_err());
    }

    #[test]
    fn tumor_ratio_matches_counting_oracle() {
        let mut rng = crate::Rng::new(4);
        for _ in 0..20 {
            let data: Vec<u8> = (0..64).map(|_| rng.below(3) as u8).collect();
            let l = LabelMap::new(8, 8, data.clone()).unwrap();
            let (mut organ, mut tumor) = (0, 0);
            for c in &data {
                match c {
                    1 => organ += 1,
                    2 => tumor += 1,
                    _ => {}
                }
            }
            if organ > 0 {
                assert_eq!(tumor_ratio(&l).unwrap(), tumor as f64 / organ as f64);
            }
        }
    }

    #[test]
    fn dataset_dir_round_trip() {
        let cfg = SynthConfig { size: 16, organ_radius: (4.0, 6.0), tumor_radius: (1.0, 3.0), tumor_prob: 1.0, ..SynthConfig::default() };
        let images = synth_generate(3, &cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(dir.path(), &images, 3).unwrap();
        let (manifest, back) = read_dataset_dir(dir.path()).unwrap();
        assert_eq!(manifest.num_classes, 3);
        assert_eq!(back.len(), 3);
        for (a, b) in images.iter().zip(&back) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.tumor_ratio, b.tumor_ratio);
            assert_eq!(a.image, b.image);
        }
    }
}
