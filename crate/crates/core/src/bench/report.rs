//! Summary, scalability and figure emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::metrics::{write_summary_csv, EvalRecord, SummaryRow};
use crate::tensor::Tensor;

use super::ScalabilityRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg];
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::invalid(format!("unknown report format {other:?} (expected csv, json or svg)"))),
        }
    }
}

/// Pooled records of one method, drawn as one retention polyline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSeries {
    pub method: String,
    pub records: Vec<EvalRecord>,
}

/// Writes the report files of `format` into `dir` and returns their paths.
///
/// * csv: `summary.csv` (`method,split,n_samples,dsc_mean,dsc_std,pearson_r,rauc_mean,rauc_std`)
///   and, when rows are given, `scalability.csv`.
/// * json: `report.json` holding summaries, scalability rows and records.
/// * svg: `retention.svg`, one mean retention polyline per series.
///
/// Inputs are checked before anything is written.
pub fn emit_report(
    dir: &Path,
    series: &[RecordSeries],
    summaries: &[SummaryRow],
    scalability: &[ScalabilityRow],
    format: ReportFormat,
) -> Result<Vec<PathBuf>> {
    match format {
        ReportFormat::Csv | ReportFormat::Json if summaries.is_empty() => return Err(Error::invalid("report: no summary rows")),
        ReportFormat::Svg if series.is_empty() => return Err(Error::invalid("report: no methods to plot")),
        _ => {}
    }
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    match format {
        ReportFormat::Csv => {
            let path = dir.join("summary.csv");
            write_summary_csv(fs::File::create(&path)?, summaries)?;
            out.push(path);
            if !scalability.is_empty() {
                let path = dir.join("scalability.csv");
                write_scalability_csv(fs::File::create(&path)?, scalability)?;
                out.push(path);
            }
        }
        ReportFormat::Json => {
            let path = dir.join("report.json");
            let doc = json!({ "summaries": summaries, "scalability": scalability, "records": series });
            fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
            out.push(path);
        }
        ReportFormat::Svg => {
            let svg = retention_svg(series)?;
            let path = dir.join("retention.svg");
            fs::write(&path, svg)?;
            out.push(path);
        }
    }
    Ok(out)
}

pub fn write_scalability_csv<W: std::io::Write>(w: W, rows: &[ScalabilityRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scalability_csv<R: std::io::Read>(r: R) -> Result<Vec<ScalabilityRow>> {
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(|e| Error::Format(format!("csv: {e}")))).collect()
}

/// Pointwise mean of the records' retention curves.
pub fn mean_retention(records: &[EvalRecord]) -> Result<Vec<(f64, f64)>> {
    let first = records.first().ok_or_else(|| Error::invalid("mean_retention: no records"))?;
    let len = first.retention_curve.len();
    if len == 0 {
        return Err(Error::invalid(format!("record {} carries no retention curve", first.image_id)));
    }
    let mut acc = vec![0.0; len];
    for r in records {
        if r.retention_curve.len() != len {
            return Err(Error::shape(
                "mean_retention",
                format!("record {} has {} curve points, expected {len}", r.image_id, r.retention_curve.len()),
            ));
        }
        acc.iter_mut().zip(&r.retention_curve).for_each(|(a, p)| *a += p.1);
    }
    let n = records.len() as f64;
    Ok(first.retention_curve.iter().zip(acc).map(|(p, a)| (p.0, a / n)).collect())
}

const PALETTE: [&str; 10] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Error-retention plot: x is the fraction of voxels replaced by ground
/// truth, y the mean error.
pub fn retention_svg(series: &[RecordSeries]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::invalid("retention_svg: no series"));
    }
    let curves: Vec<Vec<(f64, f64)>> = series.iter().map(|s| mean_retention(&s.records)).collect::<Result<_>>()?;
    let y_max = curves.iter().flatten().map(|p| p.1).fold(0.0f64, f64::max).max(1e-3) * 1.05;
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 180.0, 20.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let px = |x: f64| left + x * pw;
    let py = |y: f64| top + ph - y / y_max * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g id="axes" stroke="black" fill="none"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{f:.1}</text>"#, px(f), top + ph + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, left - 6.0, py(f * y_max) + 4.0, f * y_max);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">fraction of voxels replaced</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">error</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (ser, curve)) in series.iter().zip(&curves).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = curve.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let name = escape(&ser.method);
        let _ = writeln!(
            s,
            r#"<polyline data-method="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            left + pw + 12.0,
            left + pw + 32.0,
            left + pw + 38.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Grayscale raster of an `[H, W]` uncertainty map, one square per voxel,
/// scaled to the map's maximum.
pub fn heatmap_svg(map: &Tensor, title: &str) -> Result<String> {
    if map.ndim() != 2 || map.is_empty() {
        return Err(Error::shape("heatmap_svg", format!("expected a non-empty [H, W] map, got {:?}", map.shape())));
    }
    map.ensure_finite("heatmap_svg")?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let max = map.data().iter().copied().fold(0.0f64, f64::max);
    let cell = (256 / h.max(w)).max(2);
    let (width, height) = (w * cell, h * cell + 20);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12" shape-rendering="crispEdges">"#
    );
    let _ = writeln!(s, r#"<text x="2" y="14">{} (max {max:.3e})</text>"#, escape(title));
    let _ = writeln!(s, r#"<g transform="translate(0 20)">"#);
    for y in 0..h {
        for x in 0..w {
            let v = if max > 0.0 { map.data()[y * w + x] / max } else { 0.0 };
            let g = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(s, r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>"#, x * cell, y * cell);
        }
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}
