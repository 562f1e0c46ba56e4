use std::collections::HashSet;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Patient-level train/validation/test split. Records are grouped by id, so
/// an id never lands in two splits. Sizes are `round(f·n)` for train and
/// validation, the remainder for test.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let mut ids: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for r in &ds.records {
        if seen.insert(r.id.as_str()) {
            ids.push(r.id.as_str());
        }
    }
    let n = ids.len();
    let mut rng = Rng::substream(seed, "split");
    rng.shuffle(&mut ids);
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Data(format!(
            "split of {n} patients gives an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let train: HashSet<&str> = ids[..n_train].iter().copied().collect();
    let val: HashSet<&str> = ids[n_train..n_train + n_val].iter().copied().collect();
    let pick = |set: &dyn Fn(&str) -> bool| {
        ds.with_records(ds.records.iter().filter(|r| set(&r.id)).cloned().collect())
    };
    Ok((
        pick(&|id| train.contains(id)),
        pick(&|id| val.contains(id)),
        pick(&|id| !train.contains(id) && !val.contains(id)),
    ))
}

/// Keeps the labels of a random `fraction` of records (at least one per
/// class when both exist) and drops the rest of the records.
pub fn subsample_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "label fraction {fraction} must be in (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(ds.clone());
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = Rng::substream(seed, "label-budget");
    rng.shuffle(&mut idx);
    let k = ((fraction * ds.len() as f64).round() as usize)
        .max(2)
        .min(ds.len());
    let mut keep: Vec<usize> = idx[..k].to_vec();
    for class in [0u8, 1] {
        if !keep.iter().any(|&i| ds.records[i].label == Some(class)) {
            if let Some(&i) = idx[k..]
                .iter()
                .find(|&&i| ds.records[i].label == Some(class))
            {
                keep.push(i);
            }
        }
    }
    keep.sort_unstable();
    Ok(ds.with_records(keep.into_iter().map(|i| ds.records[i].clone()).collect()))
}
