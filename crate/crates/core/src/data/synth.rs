//! Synthetic irregular EHR-like data with a plantable label signal.
//!
//! Each feature follows a latent Ornstein–Uhlenbeck trajectory (the
//! continuous-time AR(1)) sampled at Poisson event times over
//! `[0, w_obs + w_fc + follow_up)`. Labels are a threshold rule on the designated
//! feature's observed values inside the observation window:
//!
//! * `Separable`: mean over the final 25% of the window.
//! * `LongRange`: mean over the first 10% of the window. The designated
//!   feature reverts quickly and has no per-patient offset, so later values
//!   carry no information about the label.
//! * `None`: labels independent of the data.
//!
//! The threshold is set at a population quantile so that, after label
//! noise, about 20% of patients are positive.

use super::{Dataset, PatientRecord, Triplet};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const TARGET_PREVALENCE: f64 = 0.20;
const PREVALENCE_BAND: (f64, f64) = (0.15, 0.25);
const OBS_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalMode {
    Separable,
    LongRange,
    None,
}

impl std::str::FromStr for SignalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Self::Separable),
            "long_range" => Ok(Self::LongRange),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!(
                "unknown signal mode {s:?} (separable|long_range|none)"
            ))),
        }
    }
}

impl std::fmt::Display for SignalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Separable => "separable",
            Self::LongRange => "long_range",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub n_features: usize,
    pub static_dim: usize,
    /// Expected number of triplets inside the observation window.
    pub mean_seq_len: f64,
    pub w_obs: f64,
    pub w_fc: f64,
    /// Extra hours each record runs past the forecast window, so that
    /// sliding forecast windows find more than one instance per patient.
    pub follow_up: f64,
    pub mode: SignalMode,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            n_features: 10,
            static_dim: 4,
            mean_seq_len: 40.0,
            w_obs: 48.0,
            w_fc: 2.0,
            follow_up: 0.0,
            mode: SignalMode::Separable,
            label_noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.n_features == 0 {
            return Err(Error::Config(
                "n_patients and n_features must be positive".into(),
            ));
        }
        if !(self.w_obs > 0.0 && self.w_fc > 0.0) {
            return Err(Error::Config(format!(
                "window lengths must be positive (w_obs={}, w_fc={})",
                self.w_obs, self.w_fc
            )));
        }
        if !(self.follow_up >= 0.0 && self.follow_up.is_finite()) {
            return Err(Error::Config(format!(
                "follow_up {} must be non-negative",
                self.follow_up
            )));
        }
        if !(self.mean_seq_len > 0.0 && self.mean_seq_len.is_finite()) {
            return Err(Error::Config(format!(
                "mean_seq_len {} must be positive",
                self.mean_seq_len
            )));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label noise {} must be in [0, 0.5)",
                self.label_noise
            )));
        }
        Ok(())
    }

    /// Time interval whose planted-feature values decide the label.
    pub fn label_interval(&self) -> (f64, f64) {
        match self.mode {
            SignalMode::LongRange => (0.0, 0.1 * self.w_obs),
            _ => (0.75 * self.w_obs, self.w_obs),
        }
    }
}

/// Ground truth of the planted rule: `label = mean(values of feature in
/// interval) > threshold`, before label noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    pub feature: usize,
    pub interval: (f64, f64),
    pub threshold: f64,
}

impl PlantedTruth {
    /// Mean of the planted feature over the label interval, if observed there.
    pub fn statistic(&self, record: &PatientRecord) -> Option<f64> {
        let vals: Vec<f64> = record
            .triplets
            .iter()
            .filter(|t| {
                t.feature == self.feature && t.time >= self.interval.0 && t.time < self.interval.1
            })
            .map(|t| t.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn rule(&self, record: &PatientRecord) -> Option<u8> {
        self.statistic(record).map(|s| u8::from(s > self.threshold))
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_with_truth(spec).map(|(ds, _)| ds)
}

struct FeatureProcess {
    rate: f64,
    reversion: f64,
    offset: f64,
    scale: f64,
    patient_mean_sd: f64,
}

pub fn generate_with_truth(spec: &SyntheticSpec) -> Result<(Dataset, PlantedTruth)> {
    spec.validate()?;
    let nf = spec.n_features;
    let horizon = spec.w_obs + spec.w_fc + spec.follow_up;
    let planted = 0usize;

    let mut frng = Rng::substream(spec.seed, "synth-features");
    let weights: Vec<f64> = (0..nf).map(|_| frng.uniform_range(0.5, 1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    let processes: Vec<FeatureProcess> = (0..nf)
        .map(|f| {
            let reversion = frng.uniform_range(0.02, 0.2);
            let offset = frng.uniform_range(20.0, 120.0);
            let scale = frng.uniform_range(2.0, 15.0);
            let mut p = FeatureProcess {
                rate: spec.mean_seq_len / spec.w_obs * weights[f] / wsum,
                reversion,
                offset,
                scale,
                patient_mean_sd: 1.0,
            };
            if f == planted {
                p.patient_mean_sd = 0.0;
                p.reversion = match spec.mode {
                    SignalMode::LongRange => 2.0,
                    _ => 0.1,
                };
            }
            p
        })
        .collect();

    let interval = spec.label_interval();
    let mut prng = Rng::substream(spec.seed, "synth-patients");
    let mut records = Vec::with_capacity(spec.n_patients);
    for k in 0..spec.n_patients {
        let statics: Vec<f64> = (0..spec.static_dim).map(|_| prng.normal()).collect();
        let mut triplets = Vec::new();
        for (f, p) in processes.iter().enumerate() {
            let mut times = Vec::new();
            let mut t = prng.exponential(p.rate);
            while t < horizon {
                times.push(t);
                t += prng.exponential(p.rate);
            }
            if f == planted && spec.mode != SignalMode::None {
                let (lo, hi) = interval;
                if !times.iter().any(|&t| t >= lo && t < hi) {
                    times.push(prng.uniform_range(lo, hi));
                    times.sort_by(f64::total_cmp);
                }
            }
            let mu = p.patient_mean_sd * prng.normal();
            let mut x = mu + prng.normal();
            let mut prev = 0.0;
            for &t in &times {
                let decay = (-p.reversion * (t - prev)).exp();
                x = mu + (x - mu) * decay + (1.0 - decay * decay).sqrt() * prng.normal();
                prev = t;
                let value = p.offset + p.scale * (x + OBS_NOISE * prng.normal());
                triplets.push(Triplet {
                    time: t,
                    feature: f,
                    value,
                });
            }
        }
        triplets.sort_by(|a, b| a.time.total_cmp(&b.time));
        if triplets.is_empty() {
            // a record needs one event; give it an observation of the planted feature
            triplets.push(Triplet {
                time: prng.uniform_range(0.0, spec.w_obs),
                feature: planted,
                value: processes[planted].offset + processes[planted].scale * prng.normal(),
            });
        }
        records.push(PatientRecord {
            id: format!("p{k:05}"),
            statics,
            triplets,
            label: None,
            forecast: None,
        });
    }

    let mut truth = PlantedTruth {
        feature: planted,
        interval,
        threshold: f64::NAN,
    };
    let n = records.len();
    let mut lrng = Rng::substream(spec.seed, "synth-labels");
    let mut labels: Vec<u8> = match spec.mode {
        SignalMode::None => (0..n)
            .map(|_| u8::from(lrng.bernoulli(TARGET_PREVALENCE)))
            .collect(),
        _ => {
            let stats: Vec<f64> = records
                .iter()
                .map(|r| {
                    truth
                        .statistic(r)
                        .expect("planted feature observed in label interval")
                })
                .collect();
            let base = (TARGET_PREVALENCE - spec.label_noise) / (1.0 - 2.0 * spec.label_noise);
            let positives = (base * n as f64).round() as usize;
            if positives == 0 || positives >= n {
                return Err(Error::Infeasible(format!(
                    "{n} patients cannot hold a {:.0}% positive rate",
                    100.0 * TARGET_PREVALENCE
                )));
            }
            let mut sorted = stats.clone();
            sorted.sort_by(f64::total_cmp);
            truth.threshold = 0.5 * (sorted[n - positives - 1] + sorted[n - positives]);
            stats
                .iter()
                .map(|&s| u8::from(s > truth.threshold))
                .collect()
        }
    };
    if spec.mode != SignalMode::None && spec.label_noise > 0.0 {
        for y in &mut labels {
            if lrng.bernoulli(spec.label_noise) {
                *y = 1 - *y;
            }
        }
    }
    let rate = labels.iter().map(|&y| f64::from(y)).sum::<f64>() / n as f64;
    if !(PREVALENCE_BAND.0..=PREVALENCE_BAND.1).contains(&rate) {
        return Err(Error::Infeasible(format!(
            "positive rate {rate:.3} over {n} patients falls outside [{}, {}]; use more patients or less label noise",
            PREVALENCE_BAND.0, PREVALENCE_BAND.1
        )));
    }
    for (r, y) in records.iter_mut().zip(labels) {
        r.label = Some(y);
    }

    let mut ds = Dataset::new(
        (0..nf).map(|f| format!("f{f:02}")).collect(),
        spec.static_dim,
    );
    ds.records = records;
    Ok((ds, truth))
}
