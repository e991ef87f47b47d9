use proptest::prelude::*;
use segbench::data::{LabelMap, LabeledImage};
use segbench::metrics::{self, dsc_foreground, pearson_r, retention_curve, retention_order, retention_with_order, EvalRecord};
use segbench::uq::{MethodTag, PredictiveResult};
use segbench::{Error, Rng, Tensor};

fn random_map(rng: &mut Rng, n: usize, classes: usize) -> LabelMap {
    LabelMap::new(1, n, (0..n).map(|_| rng.below(classes) as u8).collect()).unwrap()
}

/// Rebuilds the prediction from scratch at every fraction.
fn brute_force_curve(pred: &LabelMap, gt: &LabelMap, unc: &[f64], fg: &[u8]) -> Vec<(f64, f64)> {
    let v = pred.len();
    let mut idx: Vec<usize> = (0..v).collect();
    // Stable sort keeps ascending index order among equal uncertainties.
    idx.sort_by(|&a, &b| unc[b].partial_cmp(&unc[a]).unwrap());
    (0..=100)
        .map(|k| {
            let f = k as f64 / 100.0;
            let n_replace = (k * v) / 100;
            let mut p = pred.clone();
            for &i in &idx[..n_replace] {
                p.data[i] = gt.data[i];
            }
            let inside = |c: u8| fg.contains(&c);
            let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
            for i in 0..v {
                let (a, b) = (inside(p.data[i]), inside(gt.data[i]));
                ps += a as u8 as f64;
                gs += b as u8 as f64;
                inter += (a && b) as u8 as f64;
            }
            let dsc = if ps + gs == 0.0 { 100.0 } else { 100.0 * 2.0 * inter / (ps + gs) };
            (f, 100.0 - dsc)
        })
        .collect()
}

#[test]
fn retention_matches_brute_force_on_8x8() {
    let mut rng = Rng::new(21);
    for trial in 0..50 {
        let pred = LabelMap::new(8, 8, (0..64).map(|_| rng.below(3) as u8).collect()).unwrap();
        let gt = LabelMap::new(8, 8, (0..64).map(|_| rng.below(3) as u8).collect()).unwrap();
        // Coarse values force plenty of ties.
        let unc: Vec<f64> = (0..64).map(|_| rng.below(5) as f64 * 0.25).collect();
        let curve = retention_curve(&pred, &gt, &unc, &[1, 2]).unwrap();
        let oracle = brute_force_curve(&pred, &gt, &unc, &[1, 2]);
        for (a, b) in curve.points.iter().zip(&oracle) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-12, "trial {trial}: {a:?} vs {b:?}");
        }
    }
}

#[test]
fn pearson_matches_textbook_oracle() {
    let xs = [1.0, 2.0, 3.0, 4.0];
    let ys = [1.0, 3.0, 2.0, 5.0];
    let n = 4.0;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n).sqrt();
    assert!((pearson_r(&xs, &ys).unwrap() - cov / (sx * sy)).abs() < 1e-12);
}

#[test]
fn uq_sum_is_permutation_invariant_but_curve_is_not() {
    let pred = LabelMap::new(1, 6, vec![1, 1, 0, 0, 1, 0]).unwrap();
    let gt = LabelMap::new(1, 6, vec![1, 0, 0, 1, 1, 0]).unwrap();
    let unc = [0.9, 0.8, 0.1, 0.7, 0.2, 0.0];
    let perm = [0.0, 0.1, 0.9, 0.2, 0.8, 0.7];
    assert_eq!(unc.iter().sum::<f64>(), perm.iter().sum::<f64>());
    let a = retention_curve(&pred, &gt, &unc, &[1]).unwrap();
    let b = retention_curve(&pred, &gt, &perm, &[1]).unwrap();
    assert_ne!(a.points, b.points);
    assert!(a.r_auc < b.r_auc);
}

fn image(id: &str, labels: LabelMap, ratio: Option<f64>) -> LabeledImage {
    let (h, w) = (labels.height, labels.width);
    LabeledImage { id: id.into(), image: Tensor::zeros(&[1, h, w]), labels, tumor_ratio: ratio }
}

fn prediction(labels: LabelMap, unc: Vec<f64>) -> PredictiveResult {
    let (h, w) = (labels.height, labels.width);
    let s = h * w;
    let probs = Tensor::from_fn(&[2, h, w], |i| if labels.data[i % s] as usize == i / s { 0.9 } else { 0.1 });
    PredictiveResult {
        method: MethodTag::Base,
        mean_probs: probs,
        uncertainty_map: Tensor::new(vec![h, w], unc).unwrap(),
        samples: None,
        n_samples: 1,
        inference_seconds: 0.0,
    }
}

#[test]
fn evaluate_split_summary_matches_hand_rolled_oracle() {
    let mut rng = Rng::new(8);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for i in 0..10 {
        let gt = random_map(&mut rng, 30, 2);
        let pred = random_map(&mut rng, 30, 2);
        let unc: Vec<f64> = (0..30).map(|_| rng.uniform()).collect();
        preds.push(prediction(pred, unc));
        gts.push(image(&format!("im{}", 9 - i), gt, None));
    }
    let refs: Vec<&LabeledImage> = gts.iter().collect();
    let (records, summary) = metrics::evaluate_split("base", "fold0", &preds, &refs, &[1]).unwrap();
    assert!(records.windows(2).all(|w| w[0].image_id < w[1].image_id));

    let dsc: Vec<f64> = preds.iter().zip(&gts).map(|(p, g)| dsc_foreground(&p.labels().unwrap(), &g.labels, &[1]).unwrap()).collect();
    let mean = dsc.iter().sum::<f64>() / 10.0;
    let std = (dsc.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 10.0).sqrt();
    assert!((summary.dsc_mean - mean).abs() < 1e-12);
    assert!((summary.dsc_std - std).abs() < 1e-12);
    let rauc: Vec<f64> = records.iter().map(|r| r.r_auc).collect();
    let rm = rauc.iter().sum::<f64>() / 10.0;
    assert!((summary.rauc_mean - rm).abs() < 1e-12);
    let errors: Vec<f64> = records.iter().map(|r| r.error).collect();
    let uq: Vec<f64> = records.iter().map(|r| r.uq_sum).collect();
    assert_eq!(summary.pearson_r, Some(pearson_r(&errors, &uq).unwrap()));
    for r in &records {
        assert!((r.r_auc - metrics::trapezoid(&r.retention_curve)).abs() < 1e-12);
        assert_eq!(r.retention_curve.last(), Some(&(1.0, 0.0)));
    }
}

#[test]
fn evaluate_split_degenerate_cases() {
    let gt = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
    let im = image("a", gt.clone(), None);
    let (_, one) = metrics::evaluate_split("m", "s", &[prediction(gt.clone(), vec![0.0; 4])], &[&im], &[1]).unwrap();
    assert_eq!((one.dsc_std, one.rauc_std), (0.0, 0.0));

    let im2 = image("b", gt.clone(), None);
    let preds = vec![prediction(gt.clone(), vec![0.1; 4]), prediction(gt.clone(), vec![0.3; 4])];
    let (_, perfect) = metrics::evaluate_split("m", "s", &preds, &[&im, &im2], &[1]).unwrap();
    assert_eq!(perfect.dsc_mean, 100.0);
    assert_eq!(perfect.pearson_r, None);
    assert!(metrics::evaluate_split("m", "s", &preds, &[&im], &[1]).is_err());
}

fn record(id: &str, error: f64, uq: f64, ratio: Option<f64>) -> EvalRecord {
    EvalRecord { image_id: id.into(), dsc: 100.0 - error, error, uq_sum: uq, retention_curve: vec![], r_auc: 0.0, tumor_ratio: ratio }
}

#[test]
fn ood_report_columns() {
    let id: Vec<EvalRecord> = (0..4).map(|i| record(&format!("i{i}"), i as f64, (i * i) as f64, Some(i as f64))).collect();
    let ood: Vec<EvalRecord> = (4..7).map(|i| record(&format!("o{i}"), i as f64, (7 - i) as f64, Some(i as f64))).collect();
    let rep = metrics::ood_correlation_report(&id, &ood).unwrap();
    assert!((rep.ratio_error.unwrap() - 1.0).abs() < 1e-12);
    let all: Vec<&EvalRecord> = id.iter().chain(&ood).collect();
    let err: Vec<f64> = all.iter().map(|r| r.error).collect();
    let uq: Vec<f64> = all.iter().map(|r| r.uq_sum).collect();
    let ratio: Vec<f64> = all.iter().map(|r| r.tumor_ratio.unwrap()).collect();
    assert_eq!(rep.uq_error, Some(pearson_r(&uq, &err).unwrap()));
    assert_eq!(rep.uq_ratio, Some(pearson_r(&uq, &ratio).unwrap()));

    let flat: Vec<EvalRecord> = (0..4).map(|i| record(&format!("c{i}"), i as f64, 2.0, Some(i as f64 * 0.5))).collect();
    let rep = metrics::ood_correlation_report(&flat, &[]).unwrap();
    assert_eq!((rep.uq_error, rep.uq_ratio), (None, None));
    assert!(rep.ratio_error.is_some());

    let missing = vec![record("x", 1.0, 1.0, None), record("y", 2.0, 1.0, Some(0.1)), record("z", 3.0, 1.0, Some(0.2))];
    assert!(metrics::ood_correlation_report(&missing, &[]).is_err());
}

#[test]
fn csv_round_trip() {
    let records = vec![record("a", 3.5, 12.25, Some(0.125)), record("b", 0.0, 0.0, None)];
    let mut buf = Vec::new();
    metrics::write_records_csv(&mut buf, &records).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("image_id,dsc,error,uq_sum,r_auc,tumor_ratio\n"));
    assert!(text.contains("b,100.0,0.0,0.0,0.0,\n"));
    assert_eq!(metrics::read_records_csv(&buf[..]).unwrap(), records);

    let mut withcurve = records[0].clone();
    withcurve.retention_curve = vec![(0.0, 3.5), (1.0, 0.0)];
    let mut side = Vec::new();
    metrics::write_retention_csv(&mut side, &[withcurve]).unwrap();
    assert_eq!(String::from_utf8(side).unwrap(), "image_id,fraction,error\na,0.0,3.5\na,1.0,0.0\n");
}

#[test]
fn undefined_correlation_is_an_error_not_nan() {
    assert!(matches!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
}

proptest! {
    #[test]
    fn dsc_symmetric_and_bounded(seed in any::<u64>(), n in 1usize..80) {
        let mut rng = Rng::new(seed);
        let a = random_map(&mut rng, n, 3);
        let b = random_map(&mut rng, n, 3);
        let d = dsc_foreground(&a, &b, &[1, 2]).unwrap();
        prop_assert_eq!(d, dsc_foreground(&b, &a, &[1, 2]).unwrap());
        prop_assert!((0.0..=100.0).contains(&d));
    }

    /// Moving the misclassified voxels to the front (keeping their relative
    /// order) never raises the curve. Orderings that permute the misclassified
    /// voxels among themselves are not comparable this way: under DSC, dropping
    /// a lone false positive before fixing a false negative leaves the error
    /// at 100.
    #[test]
    fn wrong_first_order_is_optimal_and_monotone(seed in any::<u64>(), n in 2usize..120) {
        let mut rng = Rng::new(seed);
        let gt = random_map(&mut rng, n, 2);
        let pred = random_map(&mut rng, n, 2);
        let wrong = |i: &usize| pred.data[*i] != gt.data[*i];
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..5 {
            rng.shuffle(&mut order);
            let other = retention_with_order(&pred, &gt, &order, &[1]).unwrap();
            let (mut front, back): (Vec<usize>, Vec<usize>) = order.iter().partition(|i| wrong(i));
            front.extend(back);
            let best = retention_with_order(&pred, &gt, &front, &[1]).unwrap();
            prop_assert!(best.points.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12));
            for (b, o) in best.points.iter().zip(&other.points) {
                prop_assert!(b.1 <= o.1 + 1e-12);
            }
            prop_assert!(best.r_auc <= other.r_auc + 1e-9);
        }
        // The oracle uncertainty map visits misclassified voxels by ascending
        // index; compare it with random orders that keep that sequence.
        let oracle_unc: Vec<f64> = (0..n).map(|i| wrong(&i) as u8 as f64).collect();
        let by_unc = retention_curve(&pred, &gt, &oracle_unc, &[1]).unwrap();
        rng.shuffle(&mut order);
        let mut wrong_sorted = (0..n).filter(|i| wrong(i));
        let other: Vec<usize> = order.iter().map(|i| if wrong(i) { wrong_sorted.next().unwrap() } else { *i }).collect();
        prop_assert!(by_unc.r_auc <= retention_with_order(&pred, &gt, &other, &[1]).unwrap().r_auc + 1e-9);
    }

    #[test]
    fn retention_depends_on_ranking_only(seed in any::<u64>(), n in 2usize..100) {
        let mut rng = Rng::new(seed);
        let gt = random_map(&mut rng, n, 3);
        let pred = random_map(&mut rng, n, 3);
        let unc: Vec<f64> = (0..n).map(|_| rng.below(7) as f64 / 7.0).collect();
        let warped: Vec<f64> = unc.iter().map(|u| (3.0 * u).exp() + u.powi(3)).collect();
        let a = retention_curve(&pred, &gt, &unc, &[1, 2]).unwrap();
        let b = retention_curve(&pred, &gt, &warped, &[1, 2]).unwrap();
        prop_assert_eq!(retention_order(&unc), retention_order(&warped));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rauc_zero_iff_no_error(seed in any::<u64>(), n in 1usize..60, perfect in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let gt = random_map(&mut rng, n, 2);
        let pred = if perfect { gt.clone() } else { random_map(&mut rng, n, 2) };
        let unc: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let c = retention_curve(&pred, &gt, &unc, &[1]).unwrap();
        let raw = 100.0 - dsc_foreground(&pred, &gt, &[1]).unwrap();
        prop_assert_eq!(c.r_auc == 0.0, raw == 0.0);
    }
}
