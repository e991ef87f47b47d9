//! Segmentation quality and uncertainty evaluation.
//!
//! DSC values are percentages. The error of a prediction is `100 − DSC`.
//! Retention curves replace predicted labels by ground truth in order of
//! decreasing uncertainty on a fixed grid of 101 fractions; R-AUC is the
//! raw trapezoidal integral of error over `f ∈ [0, 1]`, without
//! normalization.

mod report;

pub use report::{
    evaluate_split, ood_correlation_report, read_records_csv, read_summary_csv, summarize, write_records_csv, write_retention_csv,
    write_summary_csv, EvalRecord, OodCorrelation, SummaryRow,
};

use crate::data::LabelMap;
use crate::error::{Error, Result};

pub const RETENTION_POINTS: usize = 101;

/// Every non-background class of a `num_classes` problem.
pub fn foreground_classes(num_classes: usize) -> Vec<u8> {
    (1..num_classes.min(256) as u16).map(|c| c as u8).collect()
}

fn fg_table(classes: &[u8]) -> [bool; 256] {
    let mut t = [false; 256];
    for &c in classes {
        t[c as usize] = true;
    }
    t
}

fn check_same_shape(op: &'static str, a: &LabelMap, b: &LabelMap) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(op, format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    Ok(())
}

fn dsc_from_counts(inter: usize, p: usize, g: usize) -> f64 {
    if p + g == 0 {
        100.0
    } else {
        200.0 * inter as f64 / (p + g) as f64
    }
}

/// `100 · 2|P∩G| / (|P| + |G|)` over voxels whose class is in `foreground`;
/// 100 when both sets are empty.
pub fn dsc_foreground(pred: &LabelMap, gt: &LabelMap, foreground: &[u8]) -> Result<f64> {
    check_same_shape("dsc_foreground", pred, gt)?;
    let fg = fg_table(foreground);
    let (mut inter, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (fg[a as usize], fg[b as usize]);
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    Ok(dsc_from_counts(inter, p, g))
}

/// Product-moment correlation; zero variance in either input is an
/// [`Error::UndefinedCorrelation`].
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape("pearson_r", format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{} paired values", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "pearson_r" });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionCurve {
    /// `(fraction, error)` at fractions `0.00, 0.01, …, 1.00`.
    pub points: Vec<(f64, f64)>,
    pub r_auc: f64,
}

/// Trapezoidal integral of `(x, y)` points.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Voxel indices sorted by uncertainty descending, ties by index ascending.
pub fn retention_order(uncertainty: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..uncertainty.len()).collect();
    order.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(a.cmp(&b)));
    order
}

/// Error-retention curve of `pred` against `gt` under `uncertainty`
/// (one value per voxel, row-major).
pub fn retention_curve(pred: &LabelMap, gt: &LabelMap, uncertainty: &[f64], foreground: &[u8]) -> Result<RetentionCurve> {
    check_same_shape("retention_curve", pred, gt)?;
    if uncertainty.len() != pred.len() {
        return Err(Error::shape("retention_curve", format!("{} uncertainties for {} voxels", uncertainty.len(), pred.len())));
    }
    if let Some(v) = uncertainty.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("retention_curve: uncertainties must be finite and non-negative, found {v}")));
    }
    retention_with_order(pred, gt, &retention_order(uncertainty), foreground)
}

/// Retention curve for an explicit replacement order (a permutation of voxel
/// indices).
pub fn retention_with_order(pred: &LabelMap, gt: &LabelMap, order: &[usize], foreground: &[u8]) -> Result<RetentionCurve> {
    check_same_shape("retention_curve", pred, gt)?;
    let fg = fg_table(foreground);
    let v = pred.len();
    if order.len() != v {
        return Err(Error::shape("retention_curve", format!("order of length {} for {v} voxels", order.len())));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (fg[a as usize], fg[b as usize]);
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    let mut points = Vec::with_capacity(RETENTION_POINTS);
    let mut replaced = 0usize;
    for k in 0..RETENTION_POINTS {
        let target = k * v / (RETENTION_POINTS - 1);
        while replaced < target {
            let i = order[replaced];
            let (a, b) = (fg[pred.data[i] as usize], fg[gt.data[i] as usize]);
            match (a, b) {
                (true, false) => p -= 1,
                (false, true) => {
                    p += 1;
                    inter += 1;
                }
                _ => {}
            }
            replaced += 1;
        }
        points.push((k as f64 / (RETENTION_POINTS - 1) as f64, 100.0 - dsc_from_counts(inter, p, g)));
    }
    let r_auc = trapezoid(&points);
    Ok(RetentionCurve { points, r_auc })
}
