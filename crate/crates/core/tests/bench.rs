use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use segbench::bench::{
    emit_report, heatmap_svg, load_run, plan_ood, profile, read_scalability_csv, retention_svg, run, run_with_progress, total_params,
    BenchConfig, BenchMethod, DatasetSource, ExperimentKind, JobStatus, RecordSeries, ReportFormat, ScalabilityRow,
};
use segbench::data::{synth_generate, SynthConfig};
use segbench::metrics::{read_records_csv, read_summary_csv, EvalRecord, SummaryRow};
use segbench::model::{SplitDataset, TrainConfig, UNetConfig};
use segbench::uq::{train_method, MethodTag, SwagConfig, UQMethodSpec};
use segbench::{Rng, Tensor};

fn small_synth() -> SynthConfig {
    SynthConfig { size: 16, organ_radius: (3.0, 6.0), tumor_radius: (1.0, 2.0), distractors: 1, ..Default::default() }
}

fn small_config(out: &Path) -> BenchConfig {
    BenchConfig {
        dataset: DatasetSource::Synthetic { n: 10, seed: 3, synth: small_synth() },
        folds: 2,
        methods: vec![BenchMethod::new(UQMethodSpec::new(MethodTag::Base)), BenchMethod::new(UQMethodSpec::new(MethodTag::McDropout))],
        sample_budgets: vec![2, 3],
        unet: UNetConfig { encoder_channels: vec![4, 8], residual_units_per_level: 1, ..Default::default() },
        train: TrainConfig { lr: 3e-3, batch_size: 4, max_epochs: 2, patience: 2, ..Default::default() },
        output_dir: out.to_path_buf(),
        deterministic: true,
        ..Default::default()
    }
}

fn assert_same_tree(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in a {
        assert!(v == &b[k], "{k} differs");
    }
}

/// Every file below `dir` except `config.json`, which records the output path.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.json" {
                out.insert(p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn deterministic_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&small_config(a.path())).unwrap();
    run(&small_config(b.path())).unwrap();
    assert!(ra.all_succeeded());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_same_tree(&ta, &tb);
    for f in ["summary.csv", "scalability.csv", "report.json", "retention.svg", "manifest.json"] {
        assert!(ta.contains_key(f), "missing {f}");
    }
}

#[test]
fn kfold_pools_every_image_exactly_once() {
    let dir = tempfile::tempdir().unwrap();
    let report = run(&small_config(dir.path())).unwrap();
    // base once, mc_dropout at two budgets
    assert_eq!(report.summaries.len(), 3);
    assert_eq!(report.series.len(), 3);
    for s in &report.series {
        let ids: Vec<&str> = s.records.iter().map(|r| r.image_id.as_str()).collect();
        let mut unique = ids.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(ids.len(), 10);
        assert_eq!(unique.len(), 10);
    }
    let mc: Vec<&SummaryRow> = report.summaries.iter().filter(|r| r.method == "mc_dropout").collect();
    assert_eq!(mc.iter().map(|r| r.n_samples).collect::<Vec<_>>(), vec![2, 3]);
    let records = read_records_csv(fs::File::open(dir.path().join("records/mc_dropout_T3_seed0.csv")).unwrap()).unwrap();
    assert_eq!(records.len(), 10);
    let on_disk = read_summary_csv(fs::File::open(dir.path().join("summary.csv")).unwrap()).unwrap();
    assert_eq!(on_disk, report.summaries);
    let loaded = load_run(dir.path()).unwrap();
    assert_eq!(loaded.summaries, report.summaries);
    assert_eq!(loaded.series, report.series);
    assert_eq!(loaded.scalability, report.scalability);
    let heatmaps = fs::read_dir(dir.path().join("jobs/seed0/base/fold0"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("heatmap"))
        .count();
    assert_eq!(heatmaps, 1);
}

#[test]
fn rerun_skips_completed_jobs_and_reproduces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run(&cfg).unwrap();
    let before = tree(dir.path());

    let mut calls = 0;
    run_with_progress(&cfg, &mut |_, _| calls += 1).unwrap();
    assert_eq!(calls, 0);

    // forget one job: only it reruns
    let path = dir.path().join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    manifest["jobs"].as_object_mut().unwrap().remove("seed0/mc_dropout/fold1");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    fs::remove_file(dir.path().join("summary.csv")).unwrap();
    let mut keys = Vec::new();
    run_with_progress(&cfg, &mut |k, _| keys.push(k.to_string())).unwrap();
    assert_eq!(keys, vec!["seed0/mc_dropout/fold1"]);
    assert_same_tree(&tree(dir.path()), &before);
}

#[test]
fn rerun_with_other_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run(&cfg).unwrap();
    let other = BenchConfig { sample_budgets: vec![5], ..cfg };
    assert!(run(&other).is_err());
}

#[test]
fn failed_method_is_recorded_and_others_finish() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    // collection starts after the last epoch, so no snapshot is taken
    let swa = UQMethodSpec { tag: MethodTag::Swa, swag: SwagConfig { start_epoch: Some(50), ..Default::default() }, ..Default::default() };
    cfg.methods = vec![BenchMethod::new(swa), BenchMethod::new(UQMethodSpec::new(MethodTag::Base))];
    let report = run(&cfg).unwrap();
    assert!(!report.all_succeeded());
    let failures = report.manifest.failures();
    assert_eq!(failures.len(), 2);
    assert!(failures.iter().all(|(_, j)| j.method == "swa" && j.error.as_deref().is_some_and(|e| e.contains("snapshots"))));
    assert_eq!(report.summaries.len(), 1);
    assert_eq!(report.summaries[0].method, "base");
    assert!(report.manifest.jobs.values().filter(|j| j.method == "base").all(|j| j.status == JobStatus::Done));
}

#[test]
fn ood_mode_reports_both_sets_and_correlations() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.experiment = ExperimentKind::Ood;
    cfg.dataset = DatasetSource::Synthetic { n: 14, seed: 4, synth: SynthConfig { tumor_prob: 1.0, ..small_synth() } };
    cfg.unet.num_classes = 3;
    cfg.ood_holdout = Some(4);
    cfg.methods.truncate(1);
    let report = run(&cfg).unwrap();
    assert!(report.all_succeeded());
    let splits: Vec<&str> = report.summaries.iter().map(|r| r.split.as_str()).collect();
    assert_eq!(splits, vec!["id_seed0", "ood_seed0"]);
    // 10 in-distribution ids: test = round(0.2 · 10)
    assert_eq!(report.series[0].records.len(), 2);
    assert_eq!(report.ood.len(), 1);
    assert_eq!(report.ood[0].n_records, 6);
    assert!(dir.path().join("ood_correlation.csv").exists());
}

#[test]
fn ood_plan_on_281_cases() {
    let items: Vec<(String, Option<f64>)> = (0..281).map(|i| (format!("case{i:03}"), Some(((i * 37) % 281) as f64 / 281.0))).collect();
    let cfg = BenchConfig { experiment: ExperimentKind::Ood, ood_holdout: Some(50), ..Default::default() };
    let (fold, ood) = plan_ood(&cfg, &items, 0).unwrap();
    assert_eq!(ood.len(), 50);
    assert_eq!(fold.test.len(), 46);
    assert_eq!(fold.val.len() + fold.train.len() + fold.test.len(), 231);
    // default holdout scales the same rule
    assert_eq!(BenchConfig::default().holdout_for(281), 50);
}

#[test]
fn config_json_defaults_and_validation() {
    let cfg =
        BenchConfig::from_json(r#"{ "methods": [ { "tag": "mc_dropout", "name": "mc", "dropout_p": 0.2 }, { "tag": "ensemble" } ] }"#)
            .unwrap();
    assert_eq!(cfg.sample_budgets, vec![4, 30]);
    assert_eq!(cfg.methods[0].label(), "mc");
    assert_eq!(cfg.methods[0].spec.dropout_p, 0.2);
    assert_eq!(cfg.methods[1].label(), "ensemble");
    assert_eq!(cfg.methods[1].spec.num_members, 4);
    cfg.validate().unwrap();
    let back = BenchConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    assert_eq!(BenchConfig { output_dir: "elsewhere".into(), ..cfg.clone() }.hash().unwrap(), cfg.hash().unwrap());

    assert!(BenchConfig { methods: vec![], ..cfg.clone() }.validate().is_err());
    assert!(BenchConfig { sample_budgets: vec![4, 0], ..cfg.clone() }.validate().is_err());
    assert!(BenchConfig { sample_budgets: vec![], ..cfg.clone() }.validate().is_err());
    let dup = vec![cfg.methods[1].clone(), cfg.methods[1].clone()];
    assert!(BenchConfig { methods: dup, ..cfg.clone() }.validate().is_err());
    assert!(BenchConfig::from_json(r#"{ "experiment": "loo" }"#).is_err());
}

fn record(id: &str, dsc: f64, curve: &[f64]) -> EvalRecord {
    let n = curve.len() - 1;
    EvalRecord {
        image_id: id.into(),
        dsc,
        error: 1.0 - dsc,
        uq_sum: 2.0 * (1.0 - dsc),
        retention_curve: curve.iter().enumerate().map(|(i, &e)| (i as f64 / n as f64, e)).collect(),
        r_auc: curve.iter().sum::<f64>() / curve.len() as f64,
        tumor_ratio: None,
    }
}

fn summary(method: &str) -> SummaryRow {
    SummaryRow {
        method: method.into(),
        split: "seed0".into(),
        n_samples: 4,
        dsc_mean: 0.812_345_678_912_345,
        dsc_std: 0.1 / 3.0,
        pearson_r: None,
        rauc_mean: 1e-7 / 7.0,
        rauc_std: 0.0,
    }
}

#[test]
fn empty_inputs_error_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    for f in ReportFormat::ALL {
        assert!(emit_report(dir.path(), &[], &[], &[], f).is_err());
    }
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    assert!("xlsx".parse::<ReportFormat>().is_err());
    assert_eq!("svg".parse::<ReportFormat>().unwrap(), ReportFormat::Svg);
}

#[test]
fn csv_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![summary("base"), SummaryRow { pearson_r: Some(-0.123_456_789), ..summary("ensemble") }];
    let scal = vec![ScalabilityRow {
        method: "base".into(),
        train_epochs: 12,
        train_epochs_per_member: 12.0,
        train_seconds: 1.5,
        inference_seconds_per_sample: 0.001,
        total_params: 1234,
        params_mb: 0.009872,
        pass_mb: 0.5,
    }];
    let files = emit_report(dir.path(), &[], &rows, &scal, ReportFormat::Csv).unwrap();
    assert_eq!(files.len(), 2);
    let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(text.starts_with("method,split,n_samples,dsc_mean,dsc_std,pearson_r,rauc_mean,rauc_std\n"));
    let back = read_summary_csv(text.as_bytes()).unwrap();
    for (a, b) in back.iter().zip(&rows) {
        assert_eq!((&a.method, &a.split, a.n_samples), (&b.method, &b.split, b.n_samples));
        for (x, y) in [(a.dsc_mean, b.dsc_mean), (a.dsc_std, b.dsc_std), (a.rauc_mean, b.rauc_mean), (a.rauc_std, b.rauc_std)] {
            assert!((x - y).abs() <= 1e-9);
        }
        assert_eq!(a.pearson_r.is_some(), b.pearson_r.is_some());
        if let (Some(x), Some(y)) = (a.pearson_r, b.pearson_r) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
    assert_eq!(read_scalability_csv(fs::File::open(dir.path().join("scalability.csv")).unwrap()).unwrap(), scal);

    emit_report(dir.path(), &[], &rows, &scal, ReportFormat::Json).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(doc["summaries"].as_array().unwrap().len(), 2);
}

#[test]
fn retention_svg_has_one_polyline_per_method() {
    let series: Vec<RecordSeries> = ["base", "mc_dropout", "a<b&c"]
        .iter()
        .map(|m| RecordSeries {
            method: m.to_string(),
            records: vec![record("x", 0.8, &[0.2, 0.1, 0.0]), record("y", 0.6, &[0.4, 0.2, 0.0])],
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    emit_report(dir.path(), &series, &[], &[], ReportFormat::Svg).unwrap();
    let text = fs::read_to_string(dir.path().join("retention.svg")).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let lines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2].attribute("data-method"), Some("a<b&c"));
    assert_eq!(lines[0].attribute("points").unwrap().split(' ').count(), 3);
    let labels: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
    assert!(labels.iter().any(|t| t.contains("fraction")));
    assert!(labels.contains(&"error"));
    assert_eq!(retention_svg(&series).unwrap(), text);

    let ragged =
        vec![RecordSeries { method: "m".into(), records: vec![record("x", 0.8, &[0.2, 0.0]), record("y", 0.6, &[0.4, 0.2, 0.0])] }];
    assert!(retention_svg(&ragged).is_err());
}

#[test]
fn heatmap_is_well_formed_raster() {
    let map = Tensor::from_fn(&[3, 5], |i| i as f64 / 14.0);
    let text = heatmap_svg(&map, "m & n").unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let rects: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("rect")).collect();
    assert_eq!(rects.len(), 15);
    assert_eq!(rects[14].attribute("fill"), Some("rgb(0,0,0)"));
    assert_eq!(rects[0].attribute("fill"), Some("rgb(255,255,255)"));
    assert!(heatmap_svg(&Tensor::zeros(&[2, 2, 2]), "bad").is_err());
    heatmap_svg(&Tensor::zeros(&[2, 2]), "flat").unwrap();
}

fn profile_of(tag: MethodTag, unet: &UNetConfig) -> ScalabilityRow {
    let images = synth_generate(6, &small_synth(), 9).unwrap();
    let refs: Vec<_> = images.iter().collect();
    let data = SplitDataset { train: refs[..4].to_vec(), val: refs[4..5].to_vec() };
    let tc = TrainConfig { max_epochs: 1, patience: 1, batch_size: 4, ..Default::default() };
    let spec = UQMethodSpec::new(tag);
    let trained = train_method(&spec, unet, &data, &tc, 0).unwrap();
    let row = profile(tag.as_str(), &spec, &trained, refs[5], &mut Rng::new(0)).unwrap();
    assert_eq!(row.total_params, total_params(&trained));
    row
}

#[test]
fn profile_parameter_examples() {
    let unet = UNetConfig::default();
    let base = profile_of(MethodTag::Base, &unet);
    let ens = profile_of(MethodTag::Ensemble, &unet);
    let mc = profile_of(MethodTag::McDropout, &unet);
    let be = profile_of(MethodTag::BatchEnsemble, &unet);
    assert_eq!(ens.total_params, 4 * base.total_params);
    assert_eq!(mc.total_params, base.total_params);
    assert!((be.total_params as f64 / base.total_params as f64) < 1.05);
    assert_eq!(ens.train_epochs, 4);
    assert_eq!(ens.train_epochs_per_member, 1.0);
    for r in [&base, &ens, &mc, &be] {
        assert_eq!(r.params_mb, r.total_params as f64 * 8.0 / 1e6);
        assert!(r.pass_mb > 0.0 && r.inference_seconds_per_sample > 0.0 && r.train_seconds >= 0.0);
    }
    // one network per forward/backward
    assert_eq!(ens.pass_mb, base.pass_mb);
    assert!(be.pass_mb > base.pass_mb);
}
