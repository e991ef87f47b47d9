//! Per-image records, split summaries and their CSV forms.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{dsc_foreground, pearson_r, retention_curve};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::uq::PredictiveResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub dsc: f64,
    pub error: f64,
    pub uq_sum: f64,
    pub retention_curve: Vec<(f64, f64)>,
    pub r_auc: f64,
    pub tumor_ratio: Option<f64>,
}

/// Aggregate over one split. Standard deviations use the population
/// denominator `n`. `pearson_r` (error vs. `uq_sum`) is `None` when
/// undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub split: String,
    pub n_samples: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub pearson_r: Option<f64>,
    pub rauc_mean: f64,
    pub rauc_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores each prediction against its ground truth and aggregates. Records
/// come back sorted by image id.
pub fn evaluate_split(
    method: &str,
    split: &str,
    predictions: &[PredictiveResult],
    gts: &[&LabeledImage],
    foreground: &[u8],
) -> Result<(Vec<EvalRecord>, SummaryRow)> {
    if predictions.len() != gts.len() {
        return Err(Error::shape("evaluate_split", format!("{} predictions for {} images", predictions.len(), gts.len())));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("evaluate_split: no predictions"));
    }
    let mut records = Vec::with_capacity(predictions.len());
    for (p, gt) in predictions.iter().zip(gts) {
        let labels = p.labels()?;
        let dsc = dsc_foreground(&labels, &gt.labels, foreground)?;
        let curve = retention_curve(&labels, &gt.labels, p.uncertainty_map.data(), foreground)?;
        records.push(EvalRecord {
            image_id: gt.id.clone(),
            dsc,
            error: 100.0 - dsc,
            uq_sum: p.uncertainty_map.sum(),
            retention_curve: curve.points,
            r_auc: curve.r_auc,
            tumor_ratio: gt.tumor_ratio,
        });
    }
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let n_samples = predictions.iter().map(|p| p.n_samples).max().unwrap_or(1);
    let summary = summarize(method, split, n_samples, &records)?;
    Ok((records, summary))
}

/// Aggregates existing records.
pub fn summarize(method: &str, split: &str, n_samples: usize, records: &[EvalRecord]) -> Result<SummaryRow> {
    if records.is_empty() {
        return Err(Error::invalid("summarize: no records"));
    }
    let dsc: Vec<f64> = records.iter().map(|r| r.dsc).collect();
    let rauc: Vec<f64> = records.iter().map(|r| r.r_auc).collect();
    let errors: Vec<f64> = records.iter().map(|r| r.error).collect();
    let uq: Vec<f64> = records.iter().map(|r| r.uq_sum).collect();
    let (dsc_mean, dsc_std) = mean_std(&dsc);
    let (rauc_mean, rauc_std) = mean_std(&rauc);
    Ok(SummaryRow {
        method: method.to_string(),
        split: split.to_string(),
        n_samples,
        dsc_mean,
        dsc_std,
        pearson_r: defined(pearson_r(&errors, &uq))?,
        rauc_mean,
        rauc_std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodCorrelation {
    pub ratio_error: Option<f64>,
    pub uq_error: Option<f64>,
    pub uq_ratio: Option<f64>,
    pub n_records: usize,
}

/// Correlations over the pooled in-distribution and OOD records.
pub fn ood_correlation_report(records_id: &[EvalRecord], records_ood: &[EvalRecord]) -> Result<OodCorrelation> {
    let pooled: Vec<&EvalRecord> = records_id.iter().chain(records_ood).collect();
    if pooled.len() < 3 {
        return Err(Error::invalid(format!("ood_correlation_report needs at least 3 records, got {}", pooled.len())));
    }
    let mut ratio = Vec::with_capacity(pooled.len());
    for r in &pooled {
        ratio.push(r.tumor_ratio.ok_or_else(|| Error::invalid(format!("record {} has no tumor ratio", r.image_id)))?);
    }
    let error: Vec<f64> = pooled.iter().map(|r| r.error).collect();
    let uq: Vec<f64> = pooled.iter().map(|r| r.uq_sum).collect();
    Ok(OodCorrelation {
        ratio_error: defined(pearson_r(&ratio, &error))?,
        uq_error: defined(pearson_r(&uq, &error))?,
        uq_ratio: defined(pearson_r(&uq, &ratio))?,
        n_records: pooled.len(),
    })
}

#[derive(Serialize, Deserialize)]
struct RecordRow {
    image_id: String,
    dsc: f64,
    error: f64,
    uq_sum: f64,
    r_auc: f64,
    tumor_ratio: Option<f64>,
}

#[derive(Serialize)]
struct RetentionRow<'a> {
    image_id: &'a str,
    fraction: f64,
    error: f64,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

/// `image_id,dsc,error,uq_sum,r_auc,tumor_ratio`; a missing ratio is blank.
pub fn write_records_csv<W: Write>(w: W, records: &[EvalRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(RecordRow {
            image_id: r.image_id.clone(),
            dsc: r.dsc,
            error: r.error,
            uq_sum: r.uq_sum,
            r_auc: r.r_auc,
            tumor_ratio: r.tumor_ratio,
        })
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads records written by [`write_records_csv`]; retention curves are not
/// part of this file and come back empty.
pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<EvalRecord>> {
    csv::Reader::from_reader(r)
        .deserialize::<RecordRow>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            Ok(EvalRecord {
                image_id: row.image_id,
                dsc: row.dsc,
                error: row.error,
                uq_sum: row.uq_sum,
                retention_curve: Vec::new(),
                r_auc: row.r_auc,
                tumor_ratio: row.tumor_ratio,
            })
        })
        .collect()
}

/// `image_id,fraction,error`, one row per curve point.
pub fn write_retention_csv<W: Write>(w: W, records: &[EvalRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        for &(fraction, error) in &r.retention_curve {
            out.serialize(RetentionRow { image_id: &r.image_id, fraction, error }).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `method,split,n_samples,dsc_mean,dsc_std,pearson_r,rauc_mean,rauc_std`;
/// an undefined correlation is blank.
pub fn write_summary_csv<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_summary_csv<R: Read>(r: R) -> Result<Vec<SummaryRow>> {
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(csv_err)).collect()
}
