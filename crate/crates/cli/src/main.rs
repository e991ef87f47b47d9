//! `segbench` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use segbench::bench::{
    emit_report, heatmap_svg, job_seed, load_dataset, load_run, plan_ood, profile, run_with_progress, write_scalability_csv, BenchConfig,
    BenchMethod, DatasetSource, ExperimentKind, JobStatus, ReportFormat,
};
use segbench::data::{single_split, write_dataset_dir, Fold, LabeledImage};
use segbench::metrics::{evaluate_split, foreground_classes, write_records_csv, write_retention_csv, write_summary_csv};
use segbench::model::SplitDataset;
use segbench::uq::{image_refs, load_artifacts, predict_batch, save_artifacts, train_method, PredictiveResult, UQMethodSpec};
use segbench::Rng;

const PREDICT_STREAM: u64 = 0x636c_6970;

#[derive(Parser)]
#[command(name = "segbench", version, about = "Uncertainty quantification benchmark for 2-D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Benchmark configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seeds by this one.
    #[arg(long)]
    seed: Option<u64>,
    /// Zero wall-clock fields so reruns produce identical bytes.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct FromTrain {
    /// Directory written by `train`.
    #[arg(long)]
    from: PathBuf,
    /// Method name; all trained methods when omitted.
    #[arg(long)]
    method: Option<String>,
    /// Stochastic passes, overriding the configured count.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset to a directory.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configured method (or one) on a single split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<String>,
    },
    /// Predict held-out images and write uncertainty maps.
    Predict(FromTrain),
    /// Score held-out predictions: records, retention curves, summary.
    Evaluate(FromTrain),
    /// Parameter, memory and timing profile of trained methods.
    Profile {
        #[command(flatten)]
        from: FromTrain,
        /// csv or json.
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Full k-fold or OOD experiment; resumes an existing output directory.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit the reports of a finished run.
    Report {
        /// Run directory.
        #[arg(long)]
        from: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// csv, json or svg; all three when omitted.
        #[arg(long)]
        format: Option<String>,
    },
}

fn load_config(common: &Common) -> Result<BenchConfig> {
    let mut cfg = match &common.config {
        Some(p) => BenchConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => BenchConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.deterministic |= common.deterministic;
    Ok(cfg)
}

/// What `train` leaves next to the artifacts.
#[derive(Serialize, Deserialize)]
struct TrainSplit {
    seed: u64,
    fold: Fold,
    ood: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn generate_data(common: &Common, out: &Path) -> Result<bool> {
    let mut cfg = load_config(common)?;
    if let (DatasetSource::Synthetic { seed, .. }, Some(s)) = (&mut cfg.dataset, common.seed) {
        *seed = s;
    }
    if !matches!(cfg.dataset, DatasetSource::Synthetic { .. }) {
        bail!("generate-data needs a synthetic dataset source");
    }
    let (images, classes) = load_dataset(&cfg.dataset)?;
    write_dataset_dir(out, &images, classes)?;
    eprintln!("wrote {} images ({classes} classes) to {}", images.len(), out.display());
    Ok(true)
}

fn by_ids<'a>(images: &'a [LabeledImage], ids: &[String]) -> Result<Vec<&'a LabeledImage>> {
    ids.iter().map(|id| images.iter().find(|i| &i.id == id).with_context(|| format!("unknown image id {id}"))).collect()
}

fn selected<'a>(cfg: &'a BenchConfig, method: Option<&str>) -> Result<Vec<&'a BenchMethod>> {
    let all: Vec<&BenchMethod> = cfg.methods.iter().filter(|m| method.is_none_or(|n| m.label() == n)).collect();
    if all.is_empty() {
        bail!("no configured method matches {:?}", method.unwrap_or("<any>"));
    }
    Ok(all)
}

fn train(common: &Common, out: &Path, method: Option<&str>) -> Result<bool> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let (images, _) = load_dataset(&cfg.dataset)?;
    let ids: Vec<String> = images.iter().map(|i| i.id.clone()).collect();
    let (fold, ood) = match cfg.experiment {
        ExperimentKind::Kfold => (single_split(&ids, cfg.fractions, seed)?, Vec::new()),
        ExperimentKind::Ood => {
            let items: Vec<(String, Option<f64>)> = images.iter().map(|i| (i.id.clone(), i.tumor_ratio)).collect();
            plan_ood(&cfg, &items, seed)?
        }
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let data = SplitDataset { train: by_ids(&images, &fold.train)?, val: by_ids(&images, &fold.val)? };
    write_json(&out.join("split.json"), &TrainSplit { seed, fold, ood })?;

    let mut ok = true;
    for m in selected(&cfg, method)? {
        let label = m.label();
        match train_method(&m.spec, &cfg.unet, &data, &cfg.train, job_seed(seed, 0)) {
            Ok(mut trained) => {
                if cfg.deterministic {
                    trained.histories = trained.histories.iter().map(|h| h.canonical()).collect();
                }
                save_artifacts(&out.join(&label), &trained)?;
                let epochs: usize = trained.histories.iter().map(|h| h.epochs.len()).sum();
                eprintln!("{label}: trained ({epochs} epochs)");
            }
            Err(e) => {
                ok = false;
                eprintln!("{label}: failed: {e}");
            }
        }
    }
    Ok(ok)
}

struct Loaded {
    cfg: BenchConfig,
    split: TrainSplit,
    images: Vec<LabeledImage>,
}

fn load_train_dir(dir: &Path) -> Result<Loaded> {
    let cfg: BenchConfig = read_json(&dir.join("config.json"))?;
    let split: TrainSplit = read_json(&dir.join("split.json"))?;
    let (images, _) = load_dataset(&cfg.dataset)?;
    Ok(Loaded { cfg, split, images })
}

/// Predictions of one trained method on the test set and OOD set.
struct MethodPredictions<'a> {
    label: String,
    spec: UQMethodSpec,
    sets: Vec<(&'static str, Vec<&'a LabeledImage>, Vec<PredictiveResult>)>,
}

fn predict_sets<'a>(l: &'a Loaded, args: &FromTrain) -> Result<Vec<std::result::Result<MethodPredictions<'a>, String>>> {
    let mut out = Vec::new();
    for m in selected(&l.cfg, args.method.as_deref())? {
        let label = m.label();
        let spec = UQMethodSpec { num_samples: args.samples.unwrap_or(m.spec.num_samples), ..m.spec.clone() };
        let attempt = (|| -> Result<MethodPredictions<'a>> {
            let trained = load_artifacts(&args.from.join(&label))?;
            let mut rng = Rng::with_stream(l.split.seed, PREDICT_STREAM);
            let mut sets = Vec::new();
            for (name, ids) in [("test", &l.split.fold.test), ("ood", &l.split.ood)] {
                if ids.is_empty() {
                    continue;
                }
                let imgs = by_ids(&l.images, ids)?;
                let preds = predict_batch(&spec, &trained, &image_refs(&imgs), &mut rng)?;
                sets.push((name, imgs, preds));
            }
            Ok(MethodPredictions { label: label.clone(), spec: spec.clone(), sets })
        })();
        out.push(attempt.map_err(|e| format!("{label}: {e:#}")));
    }
    Ok(out)
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    method: &'a str,
    set: &'a str,
    image_id: &'a str,
    n_samples: usize,
    uq_sum: f64,
    inference_seconds: f64,
}

fn predict_cmd(args: &FromTrain) -> Result<bool> {
    let l = load_train_dir(&args.from)?;
    let deterministic = args.deterministic || l.cfg.deterministic;
    fs::create_dir_all(args.out.join("heatmaps"))?;
    let mut w = csv::Writer::from_path(args.out.join("predictions.csv"))?;
    let mut ok = true;
    for res in predict_sets(&l, args)? {
        let mp = match res {
            Ok(mp) => mp,
            Err(e) => {
                ok = false;
                eprintln!("{e}");
                continue;
            }
        };
        for (set, imgs, preds) in &mp.sets {
            for (img, p) in imgs.iter().zip(preds) {
                w.serialize(PredictionRow {
                    method: &mp.label,
                    set,
                    image_id: &img.id,
                    n_samples: p.n_samples,
                    uq_sum: p.uncertainty_map.sum(),
                    inference_seconds: if deterministic { 0.0 } else { p.inference_seconds },
                })?;
                let svg = heatmap_svg(&p.uncertainty_map, &format!("{} {}", mp.label, img.id))?;
                fs::write(args.out.join("heatmaps").join(format!("{}_{}.svg", mp.label, img.id)), svg)?;
            }
        }
        eprintln!("{}: predicted", mp.label);
    }
    w.flush()?;
    Ok(ok)
}

fn evaluate_cmd(args: &FromTrain) -> Result<bool> {
    let l = load_train_dir(&args.from)?;
    let fg = foreground_classes(l.cfg.unet.num_classes);
    fs::create_dir_all(&args.out)?;
    let mut summaries = Vec::new();
    let mut ok = true;
    for res in predict_sets(&l, args)? {
        let mp = match res {
            Ok(mp) => mp,
            Err(e) => {
                ok = false;
                eprintln!("{e}");
                continue;
            }
        };
        for (set, imgs, preds) in &mp.sets {
            let (records, row) = evaluate_split(&mp.label, set, preds, imgs, &fg)?;
            let stem = format!("{}_{set}", mp.label);
            write_records_csv(fs::File::create(args.out.join(format!("{stem}.csv")))?, &records)?;
            write_retention_csv(fs::File::create(args.out.join(format!("{stem}_retention.csv")))?, &records)?;
            eprintln!(
                "{} {set} (T={}): dsc {:.4} ± {:.4}, r-auc {:.4}",
                mp.label, mp.spec.num_samples, row.dsc_mean, row.dsc_std, row.rauc_mean
            );
            summaries.push(row);
        }
    }
    if !summaries.is_empty() {
        write_summary_csv(fs::File::create(args.out.join("summary.csv"))?, &summaries)?;
    }
    Ok(ok)
}

fn profile_cmd(args: &FromTrain, format: &str) -> Result<bool> {
    if !matches!(format, "csv" | "json") {
        bail!("profile writes csv or json, not {format:?}");
    }
    let l = load_train_dir(&args.from)?;
    let deterministic = args.deterministic || l.cfg.deterministic;
    let sample = by_ids(&l.images, &l.split.fold.test)?.into_iter().next().context("split has no test image")?;
    let mut rows = Vec::new();
    let mut ok = true;
    for m in selected(&l.cfg, args.method.as_deref())? {
        let label = m.label();
        let spec = UQMethodSpec { num_samples: args.samples.unwrap_or(m.spec.num_samples), ..m.spec.clone() };
        let row = load_artifacts(&args.from.join(&label)).map_err(anyhow::Error::from).and_then(|t| {
            let mut rng = Rng::with_stream(l.split.seed, PREDICT_STREAM);
            Ok(profile(&label, &spec, &t, sample, &mut rng)?)
        });
        match row {
            Ok(r) => {
                eprintln!("{label}: {} params, {:.3} MB params, {:.3} MB pass", r.total_params, r.params_mb, r.pass_mb);
                rows.push(if deterministic { r.canonical() } else { r });
            }
            Err(e) => {
                ok = false;
                eprintln!("{label}: {e:#}");
            }
        }
    }
    fs::create_dir_all(&args.out)?;
    if format == "csv" {
        write_scalability_csv(fs::File::create(args.out.join("scalability.csv"))?, &rows)?;
    } else {
        write_json(&args.out.join("scalability.json"), &rows)?;
    }
    Ok(ok)
}

fn run_cmd(common: &Common, out: Option<&Path>) -> Result<bool> {
    let mut cfg = load_config(common)?;
    if let Some(out) = out {
        cfg.output_dir = out.to_path_buf();
    }
    let report = run_with_progress(&cfg, &mut |key, job| match job.status {
        JobStatus::Done => eprintln!("{key}: done"),
        JobStatus::Failed => eprintln!("{key}: failed: {}", job.error.as_deref().unwrap_or("")),
    })?;
    for r in &report.summaries {
        eprintln!("{} {} T={}: dsc {:.4} ± {:.4}, r-auc {:.4}", r.method, r.split, r.n_samples, r.dsc_mean, r.dsc_std, r.rauc_mean);
    }
    let failures = report.manifest.failures();
    if !failures.is_empty() {
        eprintln!("{} of {} jobs failed", failures.len(), report.manifest.jobs.len());
    }
    eprintln!("results in {}", report.output_dir.display());
    Ok(failures.is_empty())
}

fn report_cmd(from: &Path, out: Option<&Path>, format: Option<&str>) -> Result<bool> {
    let formats = match format {
        Some(f) => vec![f.parse::<ReportFormat>()?],
        None => ReportFormat::ALL.to_vec(),
    };
    let report = load_run(from)?;
    let out = out.unwrap_or(from);
    for f in formats {
        for p in emit_report(out, &report.series, &report.summaries, &report.scalability, f)? {
            eprintln!("wrote {}", p.display());
        }
    }
    Ok(report.all_succeeded())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::GenerateData { common, out } => generate_data(common, out),
        Command::Train { common, out, method } => train(common, out, method.as_deref()),
        Command::Predict(args) => predict_cmd(args),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::Profile { from, format } => profile_cmd(from, format),
        Command::Run { common, out } => run_cmd(common, out.as_deref()),
        Command::Report { from, out, format } => report_cmd(from, out.as_deref(), format.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
