use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Standard deviations below this are treated as zero.
const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    /// Degenerate feature: its std was replaced by 1.
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticStats {
    pub mean: f64,
    pub std: f64,
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub features: Vec<FeatureStats>,
    pub statics: Vec<StaticStats>,
}

pub enum StatsSource<'a> {
    /// Estimate statistics from this dataset (the training split).
    Fit,
    /// Reuse statistics fitted elsewhere.
    Apply(&'a NormStats),
}

/// Population mean/std with the degenerate-std rule applied.
fn moments(sum: f64, sum_sq_dev: f64, n: usize) -> (f64, f64, bool) {
    if n == 0 {
        return (0.0, 1.0, true);
    }
    let mean = sum / n as f64;
    let std = (sum_sq_dev / n as f64).sqrt();
    if std < DEGENERATE_STD {
        (mean, 1.0, true)
    } else {
        (mean, std, false)
    }
}

fn fit(ds: &Dataset) -> NormStats {
    let nf = ds.num_features();
    let mut sums = vec![0.0; nf];
    let mut counts = vec![0usize; nf];
    for r in &ds.records {
        for t in &r.triplets {
            sums[t.feature] += t.value;
            counts[t.feature] += 1;
        }
    }
    let means: Vec<f64> = (0..nf)
        .map(|f| {
            if counts[f] > 0 {
                sums[f] / counts[f] as f64
            } else {
                0.0
            }
        })
        .collect();
    let mut sq = vec![0.0; nf];
    for r in &ds.records {
        for t in &r.triplets {
            let d = t.value - means[t.feature];
            sq[t.feature] += d * d;
        }
    }
    let features = (0..nf)
        .map(|f| {
            let (mean, std, constant) = moments(sums[f], sq[f], counts[f]);
            FeatureStats {
                name: ds.vocab[f].clone(),
                mean,
                std,
                constant,
            }
        })
        .collect();

    let d = ds.static_dim;
    let n = ds.records.len();
    let statics = (0..d)
        .map(|j| {
            let sum: f64 = ds.records.iter().map(|r| r.statics[j]).sum();
            let mean = if n > 0 { sum / n as f64 } else { 0.0 };
            let sq: f64 = ds
                .records
                .iter()
                .map(|r| (r.statics[j] - mean).powi(2))
                .sum();
            let (mean, std, constant) = moments(sum, sq, n);
            StaticStats {
                mean,
                std,
                constant,
            }
        })
        .collect();
    NormStats { features, statics }
}

/// Standardizes triplet values per feature and statics per dimension.
/// Forecast targets are standardized with the same per-feature statistics.
pub fn normalize(ds: &Dataset, source: StatsSource<'_>) -> Result<(Dataset, NormStats)> {
    let stats = match source {
        StatsSource::Fit => fit(ds),
        StatsSource::Apply(s) => align(ds, s)?,
    };
    let mut out = ds.clone();
    for r in &mut out.records {
        for t in &mut r.triplets {
            let s = &stats.features[t.feature];
            t.value = (t.value - s.mean) / s.std;
        }
        for (x, s) in r.statics.iter_mut().zip(&stats.statics) {
            *x = (*x - s.mean) / s.std;
        }
        if let Some(f) = &mut r.forecast {
            for (j, (v, &m)) in f.values.iter_mut().zip(&f.mask).enumerate() {
                if m {
                    let s = &stats.features[j];
                    *v = (*v - s.mean) / s.std;
                }
            }
        }
    }
    out.stats = Some(stats.clone());
    Ok((out, stats))
}

/// Reorders `stats` to this dataset's vocabulary; every feature must be covered.
fn align(ds: &Dataset, stats: &NormStats) -> Result<NormStats> {
    let features = ds
        .vocab
        .iter()
        .map(|name| {
            stats
                .features
                .iter()
                .find(|f| &f.name == name)
                .cloned()
                .ok_or_else(|| Error::Data(format!("normalization stats missing feature {name:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if stats.statics.len() != ds.static_dim {
        return Err(Error::Data(format!(
            "normalization stats cover {} static dims, dataset has {}",
            stats.statics.len(),
            ds.static_dim
        )));
    }
    Ok(NormStats {
        features,
        statics: stats.statics.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PatientRecord, Triplet};

    fn record(id: &str, statics: Vec<f64>, triplets: &[(f64, usize, f64)]) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            statics,
            triplets: triplets
                .iter()
                .map(|&(time, feature, value)| Triplet {
                    time,
                    feature,
                    value,
                })
                .collect(),
            label: None,
            forecast: None,
        }
    }

    fn dataset() -> Dataset {
        let mut ds = Dataset::new(vec!["a".into(), "c".into()], 1);
        ds.records = vec![
            record("p1", vec![3.0], &[(0.0, 0, 0.0), (1.0, 1, 5.0)]),
            record("p2", vec![5.0], &[(0.0, 0, 2.0), (2.0, 1, 5.0)]),
        ];
        ds
    }

    #[test]
    fn two_values_map_to_minus_one_and_one() {
        let (out, stats) = normalize(&dataset(), StatsSource::Fit).unwrap();
        assert_eq!(stats.features[0].mean, 1.0);
        assert_eq!(stats.features[0].std, 1.0);
        assert_eq!(out.records[0].triplets[0].value, -1.0);
        assert_eq!(out.records[1].triplets[0].value, 1.0);
        assert_eq!(out.records[0].statics[0], -1.0);
    }

    #[test]
    fn constant_feature_becomes_zero_and_is_flagged() {
        let (out, stats) = normalize(&dataset(), StatsSource::Fit).unwrap();
        assert!(stats.features[1].constant);
        assert_eq!(stats.features[1].std, 1.0);
        assert!(out.records.iter().all(|r| r.triplets[1].value == 0.0));
    }

    #[test]
    fn apply_requires_every_feature() {
        let (_, mut stats) = normalize(&dataset(), StatsSource::Fit).unwrap();
        stats.features.pop();
        assert!(normalize(&dataset(), StatsSource::Apply(&stats)).is_err());
    }

    #[test]
    fn refit_on_normalized_output_is_standard() {
        let mut ds = dataset();
        ds.records[0].triplets.push(Triplet {
            time: 3.0,
            feature: 0,
            value: 7.5,
        });
        let (once, _) = normalize(&ds, StatsSource::Fit).unwrap();
        let (_, again) = normalize(&once, StatsSource::Fit).unwrap();
        assert!(again.features[0].mean.abs() < 1e-9);
        assert!((again.features[0].std - 1.0).abs() < 1e-9);
        assert!((again.statics[0].std - 1.0).abs() < 1e-9);
    }
}
