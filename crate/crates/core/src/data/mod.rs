//! Triplet-form datasets: types, JSONL ingestion, normalization, forecast
//! windowing, splitting and the synthetic generator.

mod jsonl;
mod normalize;
mod split;
mod synth;
mod windows;

pub(crate) use jsonl::read_json;
pub use jsonl::{load_jsonl, read_records, save_jsonl, write_records, LoadReport};
pub use normalize::{normalize, FeatureStats, NormStats, StaticStats, StatsSource};
pub use split::{split, subsample_labels};
pub use synth::{generate, generate_with_truth, PlantedTruth, SignalMode, SyntheticSpec};
pub use windows::{make_forecast_instances, truncate_to_window};

use crate::error::{Error, Result};

/// One `(time, feature, value)` observation. `time` is in hours since
/// admission and `feature` indexes the dataset vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub time: f64,
    pub feature: usize,
    pub value: f64,
}

/// Forecast mask and targets for one window; `values[j]` is meaningful only
/// where `mask[j]` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastTarget {
    pub mask: Vec<bool>,
    pub values: Vec<f64>,
}

impl ForecastTarget {
    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub statics: Vec<f64>,
    /// Sorted by time; ties keep their input order.
    pub triplets: Vec<Triplet>,
    pub label: Option<u8>,
    pub forecast: Option<ForecastTarget>,
}

impl PatientRecord {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub(crate) fn sort_triplets(&mut self) -> bool {
        let sorted = self.triplets.windows(2).all(|w| w[0].time <= w[1].time);
        if !sorted {
            // stable: equal times keep input order
            self.triplets.sort_by(|a, b| a.time.total_cmp(&b.time));
        }
        !sorted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<PatientRecord>,
    pub vocab: Vec<String>,
    pub static_dim: usize,
    /// Normalization applied to this dataset, if any.
    pub stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(vocab: Vec<String>, static_dim: usize) -> Self {
        Self {
            records: Vec::new(),
            vocab,
            static_dim,
            stats: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.vocab.len()
    }

    pub fn with_records(&self, records: Vec<PatientRecord>) -> Self {
        Self {
            records,
            vocab: self.vocab.clone(),
            static_dim: self.static_dim,
            stats: self.stats.clone(),
        }
    }

    pub fn labels(&self) -> Option<Vec<u8>> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Checks every record invariant against the vocabulary and static width.
    pub fn validate(&self) -> Result<()> {
        let nf = self.vocab.len();
        for r in &self.records {
            if r.statics.len() != self.static_dim {
                return Err(Error::Data(format!(
                    "record {}: static vector has {} entries, expected {}",
                    r.id,
                    r.statics.len(),
                    self.static_dim
                )));
            }
            if r.triplets.is_empty() {
                return Err(Error::Data(format!("record {} has no triplets", r.id)));
            }
            for (i, t) in r.triplets.iter().enumerate() {
                if !(t.time >= 0.0 && t.time.is_finite()) {
                    return Err(Error::Data(format!(
                        "record {}: triplet {i} has time {}",
                        r.id, t.time
                    )));
                }
                if t.feature >= nf {
                    return Err(Error::Data(format!(
                        "record {}: triplet {i} feature index {} out of range",
                        r.id, t.feature
                    )));
                }
                if !t.value.is_finite() {
                    return Err(Error::Data(format!(
                        "record {}: triplet {i} value is not finite",
                        r.id
                    )));
                }
            }
            if r.triplets.windows(2).any(|w| w[0].time > w[1].time) {
                return Err(Error::Data(format!(
                    "record {}: triplets not sorted by time",
                    r.id
                )));
            }
            if let Some(f) = &r.forecast {
                if f.mask.len() != nf || f.values.len() != nf {
                    return Err(Error::Data(format!(
                        "record {}: forecast vectors must have length {nf}",
                        r.id
                    )));
                }
                if f.mask
                    .iter()
                    .zip(&f.values)
                    .any(|(&m, v)| m && !v.is_finite())
                {
                    return Err(Error::Data(format!(
                        "record {}: observed forecast value not finite",
                        r.id
                    )));
                }
            }
        }
        Ok(())
    }
}
