//! Configuration-driven experiment runner.
//!
//! A run is a set of jobs, one per (seed, method, fold). Each job trains on
//! its fold, predicts its held-out images at every sample budget and writes
//! the scored records under `jobs/`. Completed jobs are listed in
//! `manifest.json` and skipped on rerun. Reports are built once every job
//! has settled.

pub mod profile;
pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{kfold_split, ood_split, read_dataset_dir, single_split, synth_generate, Fold, LabeledImage, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate_split, foreground_classes, ood_correlation_report, summarize, write_records_csv, write_retention_csv, EvalRecord,
    OodCorrelation, SummaryRow,
};
use crate::model::{SplitDataset, TrainConfig, UNetConfig};
use crate::rng::Rng;
use crate::uq::{image_refs, predict_batch, save_artifacts, train_method, TrainedMethod, UQMethodSpec};

pub use profile::{profile, total_params, ScalabilityRow, BYTES_PER_PARAM, TIMING_REPEATS};
pub use report::{
    emit_report, heatmap_svg, mean_retention, read_scalability_csv, retention_svg, write_scalability_csv, RecordSeries, ReportFormat,
};

pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

const PREDICT_STREAM: u64 = 0x7072_6564;
const PROFILE_STREAM: u64 = 0x7072_6f66;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated images; labels carry tumors when `synth.tumor_prob > 0`.
    Synthetic {
        #[serde(default = "default_synth_n")]
        n: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        synth: SynthConfig,
    },
    /// A directory written by `write_dataset_dir`.
    Directory { path: PathBuf },
}

fn default_synth_n() -> usize {
    40
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Kfold,
    Ood,
}

/// One benchmarked method. `name` defaults to the method tag and must be
/// unique within a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchMethod {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub spec: UQMethodSpec,
}

impl BenchMethod {
    pub fn new(spec: UQMethodSpec) -> Self {
        Self { name: None, spec }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.spec.tag.as_str().to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub dataset: DatasetSource,
    pub experiment: ExperimentKind,
    pub folds: usize,
    /// `(train, val, test)`; k-fold mode uses only the validation share.
    pub fractions: (f64, f64, f64),
    /// Images held out as OOD; `None` holds out `round(n · 50 / 281)`.
    pub ood_holdout: Option<usize>,
    pub methods: Vec<BenchMethod>,
    /// Pass counts `T` tried for sampled methods; others use the first.
    pub sample_budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Zero every wall-clock field so reruns are byte-identical.
    pub deterministic: bool,
    /// Uncertainty heat maps written per job.
    pub heatmaps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic { n: default_synth_n(), seed: 0, synth: SynthConfig::default() },
            experiment: ExperimentKind::Kfold,
            folds: 5,
            fractions: (0.6, 0.2, 0.2),
            ood_holdout: None,
            methods: Vec::new(),
            sample_budgets: vec![4, 30],
            seeds: vec![0],
            unet: UNetConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("bench_out"),
            deterministic: false,
            heatmaps: 1,
        }
    }
}

impl BenchConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("bench config lists no methods"));
        }
        if self.sample_budgets.is_empty() || self.sample_budgets.contains(&0) {
            return Err(Error::invalid("sample budgets must be non-empty and ≥ 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("bench config lists no seeds"));
        }
        if self.experiment == ExperimentKind::Kfold && self.folds < 2 {
            return Err(Error::invalid(format!("k-fold needs at least 2 folds, got {}", self.folds)));
        }
        let mut labels = std::collections::BTreeSet::new();
        for m in &self.methods {
            let label = m.label();
            if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
                return Err(Error::invalid(format!("method name {label:?} must be non-empty and use only [A-Za-z0-9_.-]")));
            }
            if !labels.insert(label.clone()) {
                return Err(Error::invalid(format!("duplicate method name {label:?}")));
            }
            m.spec.validate().map_err(|e| Error::invalid(format!("method {label}: {e}")))?;
        }
        self.unet.validate()?;
        self.train.validate()
    }

    /// Hex SHA-256 of the configuration without its output directory.
    pub fn hash(&self) -> Result<String> {
        let doc = Self { output_dir: PathBuf::new(), ..self.clone() };
        let digest = Sha256::digest(serde_json::to_vec(&doc)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Budgets evaluated for `spec`.
    pub fn budgets_for(&self, spec: &UQMethodSpec) -> Vec<usize> {
        if spec.tag.is_sampled() {
            let mut b = self.sample_budgets.clone();
            b.sort_unstable();
            b.dedup();
            b
        } else {
            vec![self.sample_budgets[0]]
        }
    }

    /// OOD holdout size for `n` images.
    pub fn holdout_for(&self, n: usize) -> usize {
        self.ood_holdout.unwrap_or_else(|| (n as f64 * 50.0 / 281.0).round() as usize)
    }
}

/// Images of `source` and the class count of its labels.
pub fn load_dataset(source: &DatasetSource) -> Result<(Vec<LabeledImage>, usize)> {
    match source {
        DatasetSource::Synthetic { n, seed, synth } => {
            let classes = if synth.tumor_prob > 0.0 { 3 } else { 2 };
            Ok((synth_generate(*n, synth, *seed)?, classes))
        }
        DatasetSource::Directory { path } => {
            let (manifest, images) = read_dataset_dir(path)?;
            Ok((images, manifest.num_classes))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobEntry {
    pub method: String,
    pub seed: u64,
    pub fold: usize,
    pub status: JobStatus,
    pub error: Option<String>,
    pub train_seconds: f64,
    pub n_test: usize,
    pub n_ood: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub config_hash: String,
    pub experiment: ExperimentKind,
    pub seeds: Vec<u64>,
    pub n_images: usize,
    /// Keyed by [`job_key`].
    pub jobs: BTreeMap<String, JobEntry>,
}

impl RunManifest {
    pub fn failures(&self) -> Vec<(&String, &JobEntry)> {
        self.jobs.iter().filter(|(_, j)| j.status == JobStatus::Failed).collect()
    }
}

pub fn job_key(seed: u64, method: &str, fold: usize) -> String {
    format!("seed{seed}/{method}/fold{fold}")
}

/// Training seed of a fold; members add their index on top.
pub fn job_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(1_000_000).wrapping_add(fold as u64 * 1_000)
}

/// Records of one job at one budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRecords {
    pub budget: usize,
    /// Passes behind each prediction.
    pub n_samples: usize,
    /// Held-out in-distribution images.
    pub test: Vec<EvalRecord>,
    /// OOD images; empty in k-fold mode.
    pub ood: Vec<EvalRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub method: String,
    pub seed: u64,
    pub n_samples: usize,
    pub ratio_error: Option<f64>,
    pub uq_error: Option<f64>,
    pub uq_ratio: Option<f64>,
    pub n_records: usize,
}

impl OodRow {
    fn new(method: String, seed: u64, n_samples: usize, c: OodCorrelation) -> Self {
        Self { method, seed, n_samples, ratio_error: c.ratio_error, uq_error: c.uq_error, uq_ratio: c.uq_ratio, n_records: c.n_records }
    }
}

/// Everything a finished run reports.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub manifest: RunManifest,
    pub summaries: Vec<SummaryRow>,
    pub series: Vec<RecordSeries>,
    pub scalability: Vec<ScalabilityRow>,
    pub ood: Vec<OodRow>,
    /// Pooled records by file stem, e.g. `mc_dropout_T4_seed0`.
    pub records: BTreeMap<String, Vec<EvalRecord>>,
}

impl RunReport {
    pub fn all_succeeded(&self) -> bool {
        self.manifest.failures().is_empty()
    }
}

struct Job {
    seed: u64,
    method: usize,
    fold: usize,
    split: Fold,
    ood: Vec<String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// OOD-mode split: the largest-ratio holdout, then one shuffled
/// train/val/test split of the remaining ids.
pub fn plan_ood(cfg: &BenchConfig, items: &[(String, Option<f64>)], seed: u64) -> Result<(Fold, Vec<String>)> {
    let (id_set, ood) = ood_split(items, cfg.holdout_for(items.len()))?;
    Ok((single_split(&id_set, cfg.fractions, seed)?, ood))
}

/// Jobs in seed, method, fold order; split plans go to `splits/`.
fn plan_jobs(cfg: &BenchConfig, images: &[LabeledImage], out: &Path) -> Result<Vec<Job>> {
    let ids: Vec<String> = images.iter().map(|i| i.id.clone()).collect();
    fs::create_dir_all(out.join("splits"))?;
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        let folds: Vec<(Fold, Vec<String>)> = match cfg.experiment {
            ExperimentKind::Kfold => {
                let plan = kfold_split(&ids, cfg.folds, cfg.fractions, seed)?;
                write_json(&out.join("splits").join(format!("seed{seed}.json")), &plan)?;
                plan.folds.into_iter().map(|f| (f, Vec::new())).collect()
            }
            ExperimentKind::Ood => {
                let items: Vec<(String, Option<f64>)> = images.iter().map(|i| (i.id.clone(), i.tumor_ratio)).collect();
                let (fold, ood) = plan_ood(cfg, &items, seed)?;
                write_json(&out.join("splits").join(format!("seed{seed}.json")), &serde_json::json!({ "fold": fold, "ood": ood }))?;
                vec![(fold, ood)]
            }
        };
        for method in 0..cfg.methods.len() {
            for (fold, (split, ood)) in folds.iter().enumerate() {
                jobs.push(Job { seed, method, fold, split: split.clone(), ood: ood.clone() });
            }
        }
    }
    Ok(jobs)
}

fn job_dir(out: &Path, key: &str) -> PathBuf {
    out.join("jobs").join(key)
}

fn pick<'a>(by_id: &HashMap<&str, &'a LabeledImage>, ids: &[String]) -> Result<Vec<&'a LabeledImage>> {
    ids.iter().map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| Error::invalid(format!("split refers to unknown id {id}")))).collect()
}

/// Trains, predicts and scores one job; returns the records and the
/// training time.
fn run_job(cfg: &BenchConfig, job: &Job, by_id: &HashMap<&str, &LabeledImage>, fg: &[u8], dir: &Path) -> Result<(Vec<BudgetRecords>, f64)> {
    let entry = &cfg.methods[job.method];
    let label = entry.label();
    let train = pick(by_id, &job.split.train)?;
    let val = pick(by_id, &job.split.val)?;
    let test = pick(by_id, &job.split.test)?;
    let ood = pick(by_id, &job.ood)?;
    if test.is_empty() {
        return Err(Error::invalid("fold has no test images"));
    }
    let seed = job_seed(job.seed, job.fold);
    let mut trained: TrainedMethod = train_method(&entry.spec, &cfg.unet, &SplitDataset { train, val }, &cfg.train, seed)?;
    let train_seconds: f64 = trained.histories.iter().map(|h| h.train_seconds).sum();
    if cfg.deterministic {
        trained.histories = trained.histories.iter().map(|h| h.canonical()).collect();
    }
    save_artifacts(&dir.join("artifacts"), &trained)?;

    let mut out = Vec::new();
    for budget in cfg.budgets_for(&entry.spec) {
        let spec = UQMethodSpec { num_samples: budget, ..entry.spec.clone() };
        let mut rng = Rng::with_stream(seed, PREDICT_STREAM + budget as u64);
        let preds = predict_batch(&spec, &trained, &image_refs(&test), &mut rng)?;
        let n_samples = preds[0].n_samples;
        let (test_records, _) = evaluate_split(&label, "test", &preds, &test, fg)?;
        for (p, img) in preds.iter().zip(&test).take(cfg.heatmaps) {
            let title = format!("{label} T={budget} {}", img.id);
            fs::write(dir.join(format!("heatmap_T{budget}_{}.svg", img.id)), heatmap_svg(&p.uncertainty_map, &title)?)?;
        }
        let ood_records = if ood.is_empty() {
            Vec::new()
        } else {
            let preds = predict_batch(&spec, &trained, &image_refs(&ood), &mut rng)?;
            evaluate_split(&label, "ood", &preds, &ood, fg)?.0
        };
        out.push(BudgetRecords { budget, n_samples, test: test_records, ood: ood_records });
    }

    if job.fold == 0 {
        let mut rng = Rng::with_stream(seed, PROFILE_STREAM);
        let row = profile(&label, &entry.spec, &trained, test[0], &mut rng)?;
        let row = ScalabilityRow { train_seconds, ..row };
        write_json(&dir.join("scalability.json"), &if cfg.deterministic { row.canonical() } else { row })?;
    }
    write_json(&dir.join("records.json"), &out)?;
    Ok((out, train_seconds))
}

fn load_or_init_manifest(cfg: &BenchConfig, out: &Path, n_images: usize) -> Result<RunManifest> {
    let hash = cfg.hash()?;
    let path = out.join("manifest.json");
    if path.exists() {
        let m: RunManifest = read_json(&path)?;
        if m.config_hash != hash {
            return Err(Error::invalid(format!("{} holds a run with a different configuration (hash {})", out.display(), m.config_hash)));
        }
        return Ok(m);
    }
    Ok(RunManifest {
        software_version: SOFTWARE_VERSION.to_string(),
        config_hash: hash,
        experiment: cfg.experiment,
        seeds: cfg.seeds.clone(),
        n_images,
        jobs: BTreeMap::new(),
    })
}

/// Runs every pending job of `cfg` into `cfg.output_dir`, then writes the
/// pooled records and reports. A failing job is recorded in the manifest and
/// the remaining jobs still run.
pub fn run(cfg: &BenchConfig) -> Result<RunReport> {
    run_with_progress(cfg, &mut |_, _| {})
}

/// [`run`] calling `progress(key, entry)` after each job settles.
pub fn run_with_progress(cfg: &BenchConfig, progress: &mut dyn FnMut(&str, &JobEntry)) -> Result<RunReport> {
    cfg.validate()?;
    let (images, num_classes) = load_dataset(&cfg.dataset)?;
    if num_classes != cfg.unet.num_classes {
        return Err(Error::invalid(format!("dataset has {num_classes} classes, network predicts {}", cfg.unet.num_classes)));
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    write_json(&out.join("config.json"), cfg)?;
    let mut manifest = load_or_init_manifest(cfg, &out, images.len())?;
    let by_id: HashMap<&str, &LabeledImage> = images.iter().map(|i| (i.id.as_str(), i)).collect();
    let fg = foreground_classes(num_classes);
    let jobs = plan_jobs(cfg, &images, &out)?;

    let mut results: HashMap<String, Vec<BudgetRecords>> = HashMap::new();
    for job in &jobs {
        let label = cfg.methods[job.method].label();
        let key = job_key(job.seed, &label, job.fold);
        let dir = job_dir(&out, &key);
        let done = manifest.jobs.get(&key).is_some_and(|j| j.status == JobStatus::Done);
        if done {
            if let Ok(r) = read_json::<Vec<BudgetRecords>>(&dir.join("records.json")) {
                results.insert(key, r);
                continue;
            }
        }
        fs::create_dir_all(&dir)?;
        let outcome = run_job(cfg, job, &by_id, &fg, &dir);
        let mut entry = JobEntry {
            method: label,
            seed: job.seed,
            fold: job.fold,
            status: JobStatus::Done,
            error: None,
            train_seconds: 0.0,
            n_test: job.split.test.len(),
            n_ood: job.ood.len(),
        };
        match outcome {
            Ok((records, seconds)) => {
                entry.train_seconds = if cfg.deterministic { 0.0 } else { seconds };
                results.insert(key.clone(), records);
            }
            Err(e) => {
                entry.status = JobStatus::Failed;
                entry.error = Some(e.to_string());
            }
        }
        progress(&key, &entry);
        manifest.jobs.insert(key, entry);
        write_json(&out.join("manifest.json"), &manifest)?;
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    let report = assemble(cfg, &out, manifest, &results)?;
    write_reports(&report)?;
    Ok(report)
}

fn pooled(seed: u64, label: &str, folds: usize, results: &HashMap<String, Vec<BudgetRecords>>) -> Option<Vec<BudgetRecords>> {
    let per_fold: Vec<&Vec<BudgetRecords>> = (0..folds).map(|k| results.get(&job_key(seed, label, k))).collect::<Option<_>>()?;
    let mut merged = per_fold[0].clone();
    for other in &per_fold[1..] {
        for (m, o) in merged.iter_mut().zip(other.iter()) {
            m.test.extend(o.test.iter().cloned());
            m.ood.extend(o.ood.iter().cloned());
        }
    }
    for m in &mut merged {
        m.test.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        m.ood.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    }
    Some(merged)
}

fn write_record_files(dir: &Path, stem: &str, records: &[EvalRecord]) -> Result<()> {
    write_records_csv(fs::File::create(dir.join(format!("{stem}.csv")))?, records)?;
    write_retention_csv(fs::File::create(dir.join(format!("{stem}_retention.csv")))?, records)
}

/// Pools finished jobs into summaries, series and correlation rows without
/// writing anything. (seed, method) pairs with a missing fold are skipped.
fn assemble(cfg: &BenchConfig, out: &Path, manifest: RunManifest, results: &HashMap<String, Vec<BudgetRecords>>) -> Result<RunReport> {
    let folds = match cfg.experiment {
        ExperimentKind::Kfold => cfg.folds,
        ExperimentKind::Ood => 1,
    };
    let mut summaries = Vec::new();
    let mut ood_rows = Vec::new();
    let mut records = BTreeMap::new();
    let mut series_map: BTreeMap<(usize, usize), RecordSeries> = BTreeMap::new();
    for &seed in &cfg.seeds {
        for (mi, m) in cfg.methods.iter().enumerate() {
            let label = m.label();
            let Some(merged) = pooled(seed, &label, folds, results) else { continue };
            let sampled = m.spec.tag.is_sampled();
            for (bi, b) in merged.into_iter().enumerate() {
                let name = if sampled { format!("{label}_T{}", b.budget) } else { label.clone() };
                let split = match cfg.experiment {
                    ExperimentKind::Kfold => format!("seed{seed}"),
                    ExperimentKind::Ood => format!("id_seed{seed}"),
                };
                summaries.push(summarize(&label, &split, b.n_samples, &b.test)?);
                if cfg.experiment == ExperimentKind::Ood {
                    let os = format!("ood_seed{seed}");
                    summaries.push(summarize(&label, &os, b.n_samples, &b.ood)?);
                    ood_rows.push(OodRow::new(label.clone(), seed, b.n_samples, ood_correlation_report(&b.test, &b.ood)?));
                    records.insert(format!("{name}_{os}"), b.ood);
                }
                let s = series_map.entry((mi, bi)).or_insert_with(|| RecordSeries { method: name.clone(), records: Vec::new() });
                s.records.extend(b.test.iter().cloned());
                records.insert(format!("{name}_{split}"), b.test);
            }
        }
    }
    let series: Vec<RecordSeries> = series_map.into_values().collect();

    let mut scalability = Vec::new();
    for m in &cfg.methods {
        let path = job_dir(out, &job_key(cfg.seeds[0], &m.label(), 0)).join("scalability.json");
        if let Ok(row) = read_json::<ScalabilityRow>(&path) {
            scalability.push(row);
        }
    }
    Ok(RunReport { output_dir: out.to_path_buf(), manifest, summaries, series, scalability, ood: ood_rows, records })
}

/// Writes `records/`, `ood_correlation.csv` and the reports of every
/// format into the run directory.
fn write_reports(report: &RunReport) -> Result<()> {
    let out = &report.output_dir;
    let records_dir = out.join("records");
    fs::create_dir_all(&records_dir)?;
    for (stem, records) in &report.records {
        write_record_files(&records_dir, stem, records)?;
    }
    if !report.summaries.is_empty() {
        for format in ReportFormat::ALL {
            emit_report(out, &report.series, &report.summaries, &report.scalability, format)?;
        }
    }
    if !report.ood.is_empty() {
        let mut w = csv::Writer::from_writer(fs::File::create(out.join("ood_correlation.csv"))?);
        for r in &report.ood {
            w.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Rebuilds the report of an existing run directory from its
/// `config.json`, `manifest.json` and finished job records.
pub fn load_run(dir: &Path) -> Result<RunReport> {
    let cfg: BenchConfig = read_json(&dir.join("config.json"))?;
    let manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
    let mut results = HashMap::new();
    for (key, job) in &manifest.jobs {
        if job.status == JobStatus::Done {
            results.insert(key.clone(), read_json::<Vec<BudgetRecords>>(&job_dir(dir, key).join("records.json"))?);
        }
    }
    assemble(&cfg, dir, manifest, &results)
}
