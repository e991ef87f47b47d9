//! K-fold and out-of-distribution split planning.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn check_fractions(fractions: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    Ok(())
}

/// Shuffles `ids` once; fold `k` tests on the `k`-th contiguous chunk (chunk
/// sizes differ by at most one, larger chunks first). From the remainder,
/// starting right after the test chunk and wrapping around, the first
/// `round(val_fraction · n)` ids validate and the rest train.
pub fn kfold_split(ids: &[String], folds: usize, fractions: (f64, f64, f64), seed: u64) -> Result<SplitPlan> {
    check_fractions(fractions)?;
    let n = ids.len();
    if folds == 0 || n < folds {
        return Err(Error::invalid(format!("{folds} folds need at least {folds} ids, got {n}")));
    }
    let mut order = ids.to_vec();
    Rng::new(seed).shuffle(&mut order);

    let n_val = (fractions.1 * n as f64).round() as usize;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = n / folds + usize::from(k < n % folds);
        let test = order[start..start + len].to_vec();
        let rest: Vec<String> = order[start + len..].iter().chain(&order[..start]).cloned().collect();
        if n_val > rest.len() {
            return Err(Error::invalid(format!("validation size {n_val} exceeds the {} non-test ids", rest.len())));
        }
        out.push(Fold { val: rest[..n_val].to_vec(), train: rest[n_val..].to_vec(), test });
        start += len;
    }
    Ok(SplitPlan { seed, folds: out })
}

/// A single shuffled train/val/test split with
/// `test = round(f_test · n)`, `val = round(f_val · n)`, train = rest.
pub fn single_split(ids: &[String], fractions: (f64, f64, f64), seed: u64) -> Result<Fold> {
    check_fractions(fractions)?;
    let n = ids.len();
    let n_test = (fractions.2 * n as f64).round() as usize;
    let n_val = (fractions.1 * n as f64).round() as usize;
    if n_test + n_val > n {
        return Err(Error::invalid(format!("cannot split {n} ids into {n_test} test and {n_val} val")));
    }
    let mut order = ids.to_vec();
    Rng::new(seed).shuffle(&mut order);
    Ok(Fold { test: order[..n_test].to_vec(), val: order[n_test..n_test + n_val].to_vec(), train: order[n_test + n_val..].to_vec() })
}

/// Holds out the `holdout_n` instances with the largest ratio (ties broken
/// by id ascending). Returns `(id_set, ood_set)`, each sorted by id.
pub fn ood_split(items: &[(String, Option<f64>)], holdout_n: usize) -> Result<(Vec<String>, Vec<String>)> {
    if holdout_n >= items.len() {
        return Err(Error::invalid(format!("holdout {holdout_n} must be smaller than the dataset size {}", items.len())));
    }
    let mut ranked = Vec::with_capacity(items.len());
    for (id, ratio) in items {
        let r = ratio.ok_or_else(|| Error::invalid(format!("instance {id} has no tumor ratio")))?;
        ranked.push((id.as_str(), r));
    }
    let unique: BTreeSet<&str> = ranked.iter().map(|(id, _)| *id).collect();
    if unique.len() != ranked.len() {
        return Err(Error::invalid("ood_split: duplicate ids"));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut ood: Vec<String> = ranked[..holdout_n].iter().map(|(id, _)| id.to_string()).collect();
    let mut id_set: Vec<String> = ranked[holdout_n..].iter().map(|(id, _)| id.to_string()).collect();
    ood.sort();
    id_set.sort();
    Ok((id_set, ood))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i:03}")).collect()
    }

    #[test]
    fn spleen_sized_chunks() {
        let plan = kfold_split(&ids(41), 5, (0.7, 0.1, 0.2), 1).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![9, 8, 8, 8, 8]);
        for f in &plan.folds {
            assert_eq!(f.val.len(), 4);
            assert_eq!(f.train.len() + f.val.len() + f.test.len(), 41);
        }
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(kfold_split(&ids(10), 5, (0.7, 0.2, 0.2), 0).is_err());
        assert!(single_split(&ids(10), (0.5, 0.1, 0.3), 0).is_err());
    }

    #[test]
    fn ood_holdout_all_but_one() {
        let items: Vec<(String, Option<f64>)> =
            ids(6).into_iter().zip([0.5, 0.1, 0.9, 0.3, 0.05, 0.7]).map(|(i, r)| (i, Some(r))).collect();
        let (id_set, ood) = ood_split(&items, 5).unwrap();
        assert_eq!(id_set, vec!["id004".to_string()]);
        assert_eq!(ood.len(), 5);
        let missing = vec![("a".to_string(), None)];
        assert!(ood_split(&missing, 0).is_err());
    }

    #[test]
    fn ood_ties_break_by_id() {
        let items: Vec<(String, Option<f64>)> = ids(4).into_iter().map(|i| (i, Some(0.5))).collect();
        let (id_set, ood) = ood_split(&items, 2).unwrap();
        assert_eq!(ood, vec!["id000".to_string(), "id001".to_string()]);
        assert_eq!(id_set, vec!["id002".to_string(), "id003".to_string()]);
    }
}
