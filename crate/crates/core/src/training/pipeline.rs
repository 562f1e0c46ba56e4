//! The full experiment: split, normalize on the training split, pretrain on
//! forecast windows, fine-tune on the observation window, evaluate.

use super::{evaluate, finetune, pretrain, Evaluation, History, TrainConfig};
use crate::data::{
    make_forecast_instances, normalize, split, subsample_labels, truncate_to_window, Dataset,
    NormStats, StatsSource,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    /// Architecture template; feature and static counts come from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub w_obs: f64,
    pub w_fc: f64,
    pub split: [f64; 3],
    /// Share of training labels kept for fine-tuning.
    pub label_fraction: f64,
    /// Permute labels across the whole dataset before splitting (a
    /// no-signal control).
    pub shuffle_labels: bool,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(1, 0),
            train: TrainConfig::default(),
            pretrain_epochs: 20,
            finetune_epochs: 30,
            w_obs: 48.0,
            w_fc: 2.0,
            split: [0.6, 0.2, 0.2],
            label_fraction: 1.0,
            shuffle_labels: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub model: Model,
    pub stats: NormStats,
    pub pretrain: History,
    pub finetune: History,
    pub val: Evaluation,
    pub test: Evaluation,
    /// Normalized, windowed test split the test metrics were computed on.
    pub test_set: Dataset,
}

fn shuffle_labels(ds: &mut Dataset, rng: &mut Rng) {
    let mut labels: Vec<Option<u8>> = ds.records.iter().map(|r| r.label).collect();
    rng.shuffle(&mut labels);
    for (r, y) in ds.records.iter_mut().zip(labels) {
        r.label = y;
    }
}

/// Normalized splits of one dataset, still spanning the forecast window.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub stats: NormStats,
}

/// Splits by `seed` (after the label shuffle of the control, if enabled)
/// and normalizes every split with `stats`, or with statistics fitted on
/// the training split when `stats` is `None`.
pub fn prepare(
    ds: &Dataset,
    exp: &Experiment,
    seed: u64,
    stats: Option<&NormStats>,
) -> Result<Prepared> {
    if ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let shuffled;
    let ds = if exp.shuffle_labels {
        let mut d = ds.clone();
        shuffle_labels(&mut d, &mut Rng::substream(seed, "label-shuffle"));
        shuffled = d;
        &shuffled
    } else {
        ds
    };
    let (train, val, test) = split(ds, exp.split, seed)?;
    let (train, stats) = match stats {
        Some(s) => normalize(&train, StatsSource::Apply(s))?,
        None => normalize(&train, StatsSource::Fit)?,
    };
    let (val, _) = normalize(&val, StatsSource::Apply(&stats))?;
    let (test, _) = normalize(&test, StatsSource::Apply(&stats))?;
    Ok(Prepared {
        train,
        val,
        test,
        stats,
    })
}

/// A fresh model shaped for `ds`.
pub fn init_model(ds: &Dataset, exp: &Experiment, seed: u64) -> Result<Model> {
    let mut cfg = exp.model.clone();
    cfg.n_features = ds.num_features();
    cfg.static_dim = ds.static_dim;
    Model::new(cfg, seed)
}

fn stage_config(exp: &Experiment, seed: u64, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        seed,
        max_epochs,
        ..exp.train.clone()
    }
}

/// Forecast pretraining on windows slid over the training and validation
/// records with stride `w_fc`.
pub fn pretrain_stage(
    model: &mut Model,
    prep: &Prepared,
    exp: &Experiment,
    seed: u64,
) -> Result<History> {
    let train = make_forecast_instances(&prep.train, exp.w_obs, exp.w_fc, exp.w_fc)?;
    let val = make_forecast_instances(&prep.val, exp.w_obs, exp.w_fc, exp.w_fc)?;
    pretrain(
        model,
        &train,
        &val,
        &stage_config(exp, seed, exp.pretrain_epochs),
    )
}

/// Observation-window views of the splits used for the outcome task.
#[derive(Debug, Clone)]
pub struct TaskSets {
    /// Subsampled to the label budget.
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn task_sets(prep: &Prepared, exp: &Experiment, seed: u64) -> Result<TaskSets> {
    Ok(TaskSets {
        train: subsample_labels(
            &truncate_to_window(&prep.train, exp.w_obs),
            exp.label_fraction,
            seed,
        )?,
        val: truncate_to_window(&prep.val, exp.w_obs),
        test: truncate_to_window(&prep.test, exp.w_obs),
    })
}

pub fn finetune_stage(
    model: &mut Model,
    sets: &TaskSets,
    exp: &Experiment,
    seed: u64,
) -> Result<History> {
    finetune(
        model,
        &sets.train,
        &sets.val,
        &stage_config(exp, seed, exp.finetune_epochs),
    )
}

/// `epoch,split,loss,auroc,auprc`, one row per named evaluation. `epoch` is
/// the fine-tuning epoch the weights come from; empty when unknown.
pub fn metrics_csv(epoch: Option<usize>, rows: &[(&str, &Evaluation)]) -> String {
    let epoch = epoch.map(|e| e.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,split,loss,auroc,auprc\n");
    for (name, e) in rows {
        s.push_str(&format!(
            "{epoch},{name},{},{},{}\n",
            e.loss, e.auroc, e.auprc
        ));
    }
    s
}

/// Runs the experiment on raw (unnormalized) records spanning the
/// observation and forecast windows. `seed` drives the split, the label
/// budget, initialization and batching.
pub fn run_pipeline(ds: &Dataset, exp: &Experiment, seed: u64) -> Result<PipelineResult> {
    let prep = prepare(ds, exp, seed, None)?;
    let mut model = init_model(ds, exp, seed)?;
    let pretrain_history = pretrain_stage(&mut model, &prep, exp, seed)?;
    let sets = task_sets(&prep, exp, seed)?;
    let finetune_history = finetune_stage(&mut model, &sets, exp, seed)?;
    let val = evaluate(&model, &sets.val)?;
    let test = evaluate(&model, &sets.test)?;
    Ok(PipelineResult {
        model,
        stats: prep.stats,
        pretrain: pretrain_history,
        finetune: finetune_history,
        val,
        test,
        test_set: sets.test,
    })
}

impl PipelineResult {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(
            self.finetune.best_epoch,
            &[("val", &self.val), ("test", &self.test)],
        )
    }
}
