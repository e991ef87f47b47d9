use proptest::prelude::*;
use segbench::data::nifti::{self, NiftiDtype, NiftiError, NiftiWriteOptions};
use segbench::data::{self, kfold_split, normalize_intensity, ood_split, sample_patches, single_split, LabelMap, LabeledImage, SplitPlan};
use segbench::{Error, Rng, Tensor};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("case_{i:04}")).collect()
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

#[test]
fn kfold_exact_division() {
    let plan = kfold_split(&ids(10), 5, (0.7, 0.1, 0.2), 3).unwrap();
    assert!(plan.folds.iter().all(|f| f.test.len() == 2 && f.val.len() == 1 && f.train.len() == 7));
}

#[test]
fn split_plan_json_round_trip() {
    let plan = kfold_split(&ids(23), 5, (0.7, 0.1, 0.2), 8).unwrap();
    assert_eq!(SplitPlan::from_json(&plan.to_json().unwrap()).unwrap(), plan);
}

#[test]
fn ood_split_of_281_cases_holds_out_50() {
    let items: Vec<(String, Option<f64>)> =
        ids(281).into_iter().enumerate().map(|(i, id)| (id, Some(((i * 37) % 281) as f64 / 281.0))).collect();
    let (id_set, ood) = ood_split(&items, 50).unwrap();
    assert_eq!((id_set.len(), ood.len()), (231, 50));
    let fold = single_split(&id_set, (0.7, 0.1, 0.2), 0).unwrap();
    assert_eq!((fold.train.len(), fold.val.len(), fold.test.len()), (162, 23, 46));
}

proptest! {
    #[test]
    fn kfold_tests_partition_ids(n in 5usize..120, seed in any::<u64>()) {
        let all = ids(n);
        let plan = kfold_split(&all, 5, (0.7, 0.1, 0.2), seed).unwrap();
        let tests: Vec<String> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
        prop_assert_eq!(sorted(tests), all.clone());
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in &plan.folds {
            let mut joined = f.train.clone();
            joined.extend(f.val.clone());
            joined.extend(f.test.clone());
            prop_assert_eq!(sorted(joined), all.clone());
            prop_assert_eq!(f.val.len(), (0.1 * n as f64).round() as usize);
        }
    }

    #[test]
    fn ood_split_orders_and_covers(ratios in prop::collection::vec(0.0f64..1.0, 2..60), k in 0usize..60) {
        let n = ratios.len();
        let k = k % n;
        let items: Vec<(String, Option<f64>)> = ids(n).into_iter().zip(ratios.iter().map(|&r| Some(r))).collect();
        let (id_set, ood) = ood_split(&items, k).unwrap();
        prop_assert_eq!(ood.len(), k);
        let mut all = id_set.clone();
        all.extend(ood.clone());
        prop_assert_eq!(sorted(all), ids(n));
        let ratio = |id: &String| items.iter().find(|(i, _)| i == id).unwrap().1.unwrap();
        if k > 0 {
            let min_ood = ood.iter().map(ratio).fold(f64::INFINITY, f64::min);
            let max_id = id_set.iter().map(ratio).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_ood >= max_id);
        }
    }

    #[test]
    fn normalize_is_idempotent(v in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let t = Tensor::new(vec![v.len()], v).unwrap();
        let once = normalize_intensity(&t);
        prop_assert!(once.data().iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(normalize_intensity(&once), once);
    }
}

#[test]
fn patches_stay_in_bounds_over_many_draws() {
    let (h, w) = (13, 21);
    let item = LabeledImage {
        id: "p".into(),
        image: Tensor::zeros(&[1, h, w]),
        labels: LabelMap::new(h, w, vec![0; h * w]).unwrap(),
        tumor_ratio: None,
    };
    let mut rng = Rng::new(77);
    let patches = sample_patches(&item, 8, &mut rng, 10_000).unwrap();
    let (mut seen_top, mut seen_left) = (vec![false; h - 7], vec![false; w - 7]);
    for p in &patches {
        assert!(p.top + 8 <= h && p.left + 8 <= w);
        seen_top[p.top] = true;
        seen_left[p.left] = true;
    }
    assert!(seen_top.iter().all(|&s| s) && seen_left.iter().all(|&s| s));
}

#[test]
fn nifti_float32_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let vol = Tensor::from_fn(&[4, 4, 4], |i| ((i as f64 * 0.37).sin() * 100.0) as f32 as f64);
    let opts = NiftiWriteOptions { spacing: vec![0.8, 0.8, 2.5], ..Default::default() };
    for name in ["v.nii", "v.nii.gz"] {
        let p = dir.path().join(name);
        nifti::write_nifti(&p, &vol, &opts).unwrap();
        let back = nifti::read_nifti(&p).unwrap();
        assert_eq!(back.volume, vol);
        assert_eq!(back.spacing, vec![0.8f32 as f64, 0.8f32 as f64, 2.5]);
    }
}

#[test]
fn nifti_int16_scaling() {
    let raw = Tensor::from_fn(&[2, 3, 5], |i| i as f64 - 12.0);
    let opts = NiftiWriteOptions { dtype: NiftiDtype::I16, slope: 2.0, inter: 1.0, ..Default::default() };
    let back = nifti::parse_nifti(&nifti::encode_nifti(&raw, &opts).unwrap()).unwrap();
    assert_eq!(back.volume, raw.map(|v| 2.0 * v + 1.0));

    let u8s = Tensor::from_fn(&[3, 3], |i| (i * 20) as f64);
    let opts = NiftiWriteOptions { dtype: NiftiDtype::U8, ..Default::default() };
    assert_eq!(nifti::parse_nifti(&nifti::encode_nifti(&u8s, &opts).unwrap()).unwrap().volume, u8s);
}

#[test]
fn nifti_errors_are_distinct() {
    let good = nifti::encode_nifti(&Tensor::ones(&[2, 2, 2]), &NiftiWriteOptions::default()).unwrap();

    let mut detached = good.clone();
    detached[344..348].copy_from_slice(b"ni1\0");
    assert!(matches!(nifti::parse_nifti(&detached), Err(Error::Nifti(NiftiError::UnsupportedVariant))));

    let mut bad = good.clone();
    bad[344..348].copy_from_slice(b"abcd");
    assert!(matches!(nifti::parse_nifti(&bad), Err(Error::Nifti(NiftiError::BadMagic(_)))));

    let mut dtype = good.clone();
    dtype[70..72].copy_from_slice(&64i16.to_le_bytes());
    assert!(matches!(nifti::parse_nifti(&dtype), Err(Error::Nifti(NiftiError::UnsupportedDatatype(64)))));

    assert!(matches!(nifti::parse_nifti(&good[..good.len() - 3]), Err(Error::Nifti(NiftiError::Truncated { .. }))));
}

#[test]
fn dataset_dir_reads_nifti_volumes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::create_dir_all(dir.path().join("labels")).unwrap();
    let vol = Tensor::from_fn(&[3, 4, 4], |i| i as f64 * 10.0);
    let lab = Tensor::from_fn(&[3, 4, 4], |i| (i % 2) as f64);
    nifti::write_nifti(&dir.path().join("images/a.nii.gz"), &vol, &NiftiWriteOptions::default()).unwrap();
    nifti::write_nifti(&dir.path().join("labels/a.nii.gz"), &lab, &NiftiWriteOptions { dtype: NiftiDtype::U8, ..Default::default() })
        .unwrap();
    let manifest = data::DatasetManifest { num_classes: 2, ids: vec!["a".into()], tumor_ratios: vec![None] };
    std::fs::write(dir.path().join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    let (_, items) = data::read_dataset_dir(dir.path()).unwrap();
    assert_eq!(items[0].image.shape(), &[1, 4, 4]);
    assert_eq!(items[0].image.data()[0], 0.0);
    assert_eq!(items[0].image.data()[15], 1.0);
    assert_eq!(items[0].labels.data[..4], [0, 1, 0, 1]);
}
