//! Synthetic organ/tumor images.
//!
//! Each image holds one rotated elliptical organ over a noisy, slowly varying
//! background, optionally a tumor ellipse strictly inside it, and a few
//! organ-like distractor blobs that carry no label. Labels are rasterized
//! from the generating ellipses at pixel centers.

use serde::{Deserialize, Serialize};

use super::{tumor_ratio, LabelMap, LabeledImage, BACKGROUND, ORGAN, TUMOR};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: usize,
    /// Semi-axis range in pixels.
    pub organ_radius: (f64, f64),
    pub tumor_radius: (f64, f64),
    pub tumor_prob: f64,
    pub noise_sigma: f64,
    /// Mean organ intensity minus mean background intensity.
    pub contrast: f64,
    /// Relative per-image spread of the organ contrast: each image draws
    /// `contrast · (1 + contrast_jitter · u)` with `u ~ U(−1, 1)`.
    /// Distractor intensities stay tied to the nominal contrast.
    pub contrast_jitter: f64,
    /// Tumor intensity relative to the organ (negative: hypodense).
    pub tumor_contrast: f64,
    pub background: f64,
    /// Width in pixels of the soft intensity edge.
    pub edge_width: f64,
    pub distractors: usize,
    /// Peak amplitude of the smooth background bias field.
    pub bias_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            organ_radius: (10.0, 20.0),
            tumor_radius: (2.0, 10.0),
            tumor_prob: 0.0,
            noise_sigma: 0.05,
            contrast: 0.35,
            contrast_jitter: 0.0,
            tumor_contrast: -0.25,
            background: 0.3,
            edge_width: 1.5,
            distractors: 2,
            bias_amplitude: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (olo, ohi) = self.organ_radius;
        let (tlo, thi) = self.tumor_radius;
        if !(olo > 0.0 && olo <= ohi) || !(tlo > 0.0 && tlo <= thi) {
            return Err(Error::invalid(format!(
                "radius ranges must be positive and ordered: organ {:?}, tumor {:?}",
                self.organ_radius, self.tumor_radius
            )));
        }
        if self.tumor_prob > 0.0 && thi > olo {
            return Err(Error::invalid(format!("tumor radius range up to {thi} exceeds the smallest organ radius {olo}")));
        }
        if 2.0 * ohi + 2.0 > self.size as f64 {
            return Err(Error::invalid(format!("organ radius {ohi} does not fit a {0}x{0} image", self.size)));
        }
        if !(0.0..=1.0).contains(&self.tumor_prob) || self.noise_sigma < 0.0 || self.edge_width <= 0.0 {
            return Err(Error::invalid("tumor_prob must be in [0,1], noise_sigma ≥ 0, edge_width > 0"));
        }
        if !(0.0..1.0).contains(&self.contrast_jitter) {
            return Err(Error::invalid(format!("contrast_jitter must be in [0,1), got {}", self.contrast_jitter)));
        }
        Ok(())
    }

    pub fn has_tumor_class(&self) -> bool {
        self.tumor_prob > 0.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Normalized radius: ≤ 1 inside.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    /// Soft indicator decaying over `width` pixels around the boundary.
    fn soft(&self, y: f64, x: f64, width: f64) -> f64 {
        let r = self.rho(y, x);
        let signed_px = (1.0 - r) * self.a.min(self.b);
        1.0 / (1.0 + (-signed_px / (0.25 * width)).exp())
    }
}

/// Generates `n` images; image `i` uses the RNG stream `i` derived from `seed`.
pub fn synth_generate(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<LabeledImage>> {
    if n == 0 {
        return Err(Error::invalid("synth_generate: n must be ≥ 1"));
    }
    cfg.validate()?;
    let root = Rng::new(seed);
    (0..n).map(|i| generate_one(i, cfg, &mut root.derive(i as u64))).collect()
}

fn generate_one(index: usize, cfg: &SynthConfig, rng: &mut Rng) -> Result<LabeledImage> {
    let size = cfg.size;
    let s = size as f64;
    let (olo, ohi) = cfg.organ_radius;

    let a = rng.uniform_range(olo, ohi);
    let b = rng.uniform_range(olo, ohi);
    let reach = a.max(b) + 1.0;
    let organ = Ellipse {
        cy: rng.uniform_range(reach, s - reach),
        cx: rng.uniform_range(reach, s - reach),
        a,
        b,
        theta: rng.uniform_range(0.0, std::f64::consts::PI),
    };

    let tumor = if rng.bernoulli(cfg.tumor_prob) {
        let (tlo, thi) = cfg.tumor_radius;
        let ta = rng.uniform_range(tlo, thi);
        let tb = rng.uniform_range(tlo, thi);
        // Place the center so the whole tumor stays inside the organ: the
        // tumor fits in a disc of radius max(ta, tb), and shrinking the organ
        // by that amount along both axes bounds the admissible centers.
        let tr = ta.max(tb);
        let room = 1.0 - tr / organ.a.min(organ.b);
        let (ang, rad) = (rng.uniform_range(0.0, std::f64::consts::TAU), rng.uniform().sqrt() * room.max(0.0) * 0.9);
        let (st, ct) = organ.theta.sin_cos();
        let u = rad * organ.a * ang.cos();
        let v = rad * organ.b * ang.sin();
        Some(Ellipse {
            cx: organ.cx + ct * u - st * v,
            cy: organ.cy + st * u + ct * v,
            a: ta,
            b: tb,
            theta: rng.uniform_range(0.0, std::f64::consts::PI),
        })
    } else {
        None
    };

    let distractors: Vec<(Ellipse, f64)> = (0..cfg.distractors)
        .map(|_| {
            let r = rng.uniform_range(0.3 * olo, 0.8 * olo);
            let e = Ellipse {
                cy: rng.uniform_range(0.0, s),
                cx: rng.uniform_range(0.0, s),
                a: r,
                b: rng.uniform_range(0.5 * r, r),
                theta: rng.uniform_range(0.0, std::f64::consts::PI),
            };
            (e, rng.uniform_range(0.4, 0.8) * cfg.contrast)
        })
        .collect();

    // Drawn only when enabled so jitter-free datasets keep their stream.
    let contrast =
        if cfg.contrast_jitter > 0.0 { cfg.contrast * (1.0 + cfg.contrast_jitter * rng.uniform_range(-1.0, 1.0)) } else { cfg.contrast };

    let bias_phase = (rng.uniform_range(0.0, std::f64::consts::TAU), rng.uniform_range(0.0, std::f64::consts::TAU));

    let mut labels = vec![BACKGROUND; size * size];
    let mut image = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let k = y * size + x;
            let bias = cfg.bias_amplitude
                * (std::f64::consts::TAU * py / s + bias_phase.0).sin()
                * (std::f64::consts::TAU * px / s + bias_phase.1).cos();
            let mut v = cfg.background + bias;
            for (d, c) in &distractors {
                v += c * d.soft(py, px, cfg.edge_width);
            }
            let w_organ = organ.soft(py, px, cfg.edge_width);
            // Organ replaces distractors where they overlap.
            v = v * (1.0 - w_organ) + (cfg.background + bias + contrast) * w_organ;
            if organ.rho(py, px) <= 1.0 {
                labels[k] = ORGAN;
            }
            if let Some(t) = &tumor {
                v += cfg.tumor_contrast * t.soft(py, px, cfg.edge_width) * w_organ;
                if t.rho(py, px) <= 1.0 && labels[k] == ORGAN {
                    labels[k] = TUMOR;
                }
            }
            image[k] = v + cfg.noise_sigma * rng.normal();
        }
    }

    let labels = LabelMap::new(size, size, labels)?;
    let ratio = if cfg.has_tumor_class() { Some(tumor_ratio(&labels)?) } else { None };
    Ok(LabeledImage {
        id: format!("img_{index:04}"),
        image: super::normalize_intensity(&Tensor::new(vec![1, size, size], image)?),
        labels,
        tumor_ratio: ratio,
    })
}
