//! Observation/forecast windowing for self-supervised pretraining.

use super::{Dataset, ForecastTarget, PatientRecord, Triplet};
use crate::error::{Error, Result};

/// Slides an observation window of `w_obs` hours over each record with the
/// given stride and attaches the forecast mask/targets of the following
/// `w_fc` hours.
///
/// Window starts are `0, stride, 2·stride, …`; the first window is always
/// emitted, later ones while the observation window still ends at or before
/// the record's last event. Input times are re-based to the window start.
/// The target of a feature seen several times in the forecast window is its
/// last value. Windows without input triplets are dropped. Instance ids are
/// `"{record id}@{window index}"` and carry no label.
pub fn make_forecast_instances(
    ds: &Dataset,
    w_obs: f64,
    w_fc: f64,
    stride: f64,
) -> Result<Dataset> {
    if !(w_obs > 0.0 && w_fc > 0.0 && stride > 0.0) {
        return Err(Error::Config(format!(
            "window lengths and stride must be positive (w_obs={w_obs}, w_fc={w_fc}, stride={stride})"
        )));
    }
    let nf = ds.num_features();
    let mut out = Vec::new();
    for r in &ds.records {
        let last = r.triplets.last().map_or(0.0, |t| t.time);
        let mut k = 0usize;
        loop {
            let t0 = k as f64 * stride;
            if k > 0 && t0 + w_obs > last {
                break;
            }
            let obs_end = t0 + w_obs;
            let fc_end = obs_end + w_fc;
            let inputs: Vec<Triplet> = r
                .triplets
                .iter()
                .filter(|t| t.time >= t0 && t.time < obs_end)
                .map(|t| Triplet {
                    time: t.time - t0,
                    ..*t
                })
                .collect();
            if !inputs.is_empty() {
                let mut mask = vec![false; nf];
                let mut values = vec![0.0; nf];
                // triplets are time-sorted, so later writes are later observations
                for t in r
                    .triplets
                    .iter()
                    .filter(|t| t.time >= obs_end && t.time < fc_end)
                {
                    mask[t.feature] = true;
                    values[t.feature] = t.value;
                }
                out.push(PatientRecord {
                    id: format!("{}@{k}", r.id),
                    statics: r.statics.clone(),
                    triplets: inputs,
                    label: None,
                    forecast: Some(ForecastTarget { mask, values }),
                });
            }
            k += 1;
        }
    }
    Ok(ds.with_records(out))
}

/// Keeps only triplets with `time < w_obs`; records left empty are dropped.
pub fn truncate_to_window(ds: &Dataset, w_obs: f64) -> Dataset {
    let records = ds
        .records
        .iter()
        .filter_map(|r| {
            let triplets: Vec<Triplet> = r
                .triplets
                .iter()
                .copied()
                .filter(|t| t.time < w_obs)
                .collect();
            (!triplets.is_empty()).then(|| PatientRecord {
                triplets,
                ..r.clone()
            })
        })
        .collect();
    ds.with_records(records)
}
