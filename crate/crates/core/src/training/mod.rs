//! Masked-forecast pretraining, supervised fine-tuning, evaluation metrics,
//! checkpoints and the ablation runner.
//!
//! A batch is processed as one tape per record, each borrowing the shared
//! parameter store. Per-record gradients are summed in record order, so the
//! result does not depend on how the records were spread across threads.

mod ablation;
mod checkpoint;
mod metrics;
mod pipeline;

pub use ablation::{ablation_csv, run_ablation, table_label, AblationRow, TABLE_ROWS};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, TensorEntry, CHECKPOINT_FORMAT,
};
pub use metrics::{auprc, auroc, log_loss};
pub use pipeline::{
    finetune_stage, init_model, metrics_csv, prepare, pretrain_stage, run_pipeline, task_sets,
    Experiment, PipelineResult, Prepared, TaskSets,
};

use std::time::Instant;

use crate::data::{Dataset, ForecastTarget, PatientRecord};
use crate::error::{Error, Result};
use crate::model::{Model, Network};
use crate::numerics::{adam_step, AdamConfig, Gradients, Rng, Tape, Tensor, Var};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Divide the forecast loss by the number of observed targets in the
    /// batch instead of the number of records.
    pub per_entry_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 30,
            patience: 10,
            adam: AdamConfig::default(),
            seed: 0,
            per_entry_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size and patience must be at least 1".into(),
            ));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.adam.lr
            )));
        }
        Ok(())
    }
}

/// Summary of one epoch. Pretraining leaves the ranking metrics unset.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc: Option<f64>,
    pub val_auprc: Option<f64>,
    /// Seconds since training started; kept out of the CSV.
    pub elapsed: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub stopped_early: bool,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl History {
    /// `epoch,split,loss,auroc,auprc`, one train and one val row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,auroc,auprc\n");
        for e in &self.epochs {
            s.push_str(&format!("{},train,{},,\n", e.epoch, e.train_loss));
            s.push_str(&format!(
                "{},val,{},{},{}\n",
                e.epoch,
                e.val_loss,
                fmt_opt(e.val_auroc),
                fmt_opt(e.val_auprc)
            ));
        }
        s
    }
}

/// Eq. 14 over a batch of predictions:
/// `(1/N′) Σ_k Σ_j m_j^k (X̃_j^k − X_j^k)²`, or divided by the number of
/// observed entries when `per_entry` is set (0 when nothing is observed).
pub fn forecast_loss(
    preds: &[Vec<f64>],
    targets: &[&ForecastTarget],
    per_entry: bool,
) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut s = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != t.mask.len() || t.values.len() != t.mask.len() {
            return Err(Error::contract(
                "prediction, mask and target lengths differ",
            ));
        }
        for j in 0..p.len() {
            if t.mask[j] {
                let d = p[j] - t.values[j];
                s += d * d;
            }
        }
    }
    let denom = forecast_denominator(targets, per_entry);
    Ok(if denom == 0.0 { 0.0 } else { s / denom })
}

fn forecast_denominator(targets: &[&ForecastTarget], per_entry: bool) -> f64 {
    if per_entry {
        targets.iter().map(|t| t.observed()).sum::<usize>() as f64
    } else {
        targets.len() as f64
    }
}

fn target_of(r: &PatientRecord) -> Result<&ForecastTarget> {
    r.forecast
        .as_ref()
        .ok_or_else(|| Error::Data(format!("record {} has no forecast target", r.id)))
}

/// One record's share of the batch forecast loss, recorded on `tape`.
pub fn record_forecast_loss(
    tape: &mut Tape,
    net: &Network,
    record: &PatientRecord,
    scale: f64,
) -> Result<Var> {
    let target = target_of(record)?;
    let enc = net.encode(tape, record)?;
    let pred = net.forecast(tape, &enc);
    let mask: Vec<f64> = target
        .mask
        .iter()
        .map(|&m| f64::from(u8::from(m)))
        .collect();
    Ok(tape.masked_squared_error(pred, &target.values, &mask, scale))
}

/// One record's share of the batch cross-entropy.
pub fn record_task_loss(
    tape: &mut Tape,
    net: &Network,
    record: &PatientRecord,
    scale: f64,
) -> Result<Var> {
    let y = record
        .label
        .ok_or_else(|| Error::Data(format!("record {} has no label", record.id)))?;
    let enc = net.encode(tape, record)?;
    let logit = net.logit(tape, &enc);
    Ok(tape.bce_with_logits(logit, f64::from(y), scale))
}

/// Summed loss and gradients over `records`, reduced in record order.
pub fn batch_gradients<F>(
    model: &Model,
    records: &[&PatientRecord],
    loss: F,
) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Tape, &Network, &PatientRecord) -> Result<Var> + Sync + Send,
{
    let per: Vec<Result<(f64, Gradients)>> = par::map(records, |r| {
        model.check_record(r)?;
        let mut tape = Tape::new(&model.store);
        let l = loss(&mut tape, &model.net, r)?;
        let value = tape.value(l).item();
        Ok((value, tape.backward(l)?))
    });
    let mut total = 0.0;
    let mut grads = Gradients::empty(model.store.len());
    for item in per {
        let (l, g) = item?;
        total += l;
        grads.add(&g);
    }
    Ok((total, grads))
}

fn apply(
    model: &mut Model,
    grads: &Gradients,
    adam: &AdamConfig,
    step: u64,
    what: &str,
) -> Result<()> {
    if grads.non_finite || grads.iter().any(|(_, g)| !g.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite gradient during {what} at step {step}"
        )));
    }
    grads.accumulate_into(&mut model.store);
    adam_step(&mut model.store, adam, step)
}

fn batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Eq. 14 over a whole dataset treated as one batch.
pub fn evaluate_forecast(model: &Model, ds: &Dataset, per_entry: bool) -> Result<f64> {
    let preds: Vec<Result<Vec<f64>>> = par::map(&ds.records, |r| Ok(model.run(r)?.forecast));
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let targets = ds
        .records
        .iter()
        .map(target_of)
        .collect::<Result<Vec<_>>>()?;
    forecast_loss(&preds, &targets, per_entry)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub probabilities: Vec<f64>,
}

/// Probabilities for every record, in dataset order.
pub fn predict_all(model: &Model, ds: &Dataset) -> Result<Vec<f64>> {
    par::map(&ds.records, |r| model.predict(r))
        .into_iter()
        .collect()
}

pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Evaluation> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Data("evaluation needs a label on every record".into()))?;
    let probs = predict_all(model, ds)?;
    Ok(Evaluation {
        loss: log_loss(&probs, &labels),
        auroc: auroc(&probs, &labels)?,
        auprc: auprc(&probs, &labels)?,
        probabilities: probs,
    })
}

/// Self-supervised forecasting. Stops after `patience` epochs without a
/// lower validation loss and restores the best weights. With the
/// `no_pretrain` ablation the model is returned untouched.
pub fn pretrain(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if model.config.ablation.no_pretrain {
        return Ok(History::default());
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(
            "pretraining needs non-empty train and validation sets".into(),
        ));
    }
    let targets: Vec<&ForecastTarget> =
        train.records.iter().map(target_of).collect::<Result<_>>()?;
    val.records
        .iter()
        .map(target_of)
        .collect::<Result<Vec<_>>>()?;

    model.store.reset_moments();
    let mut rng = Rng::substream(cfg.seed, "batching-pretrain");
    let start = Instant::now();
    let mut history = History::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let mut train_loss = 0.0;
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            let bt: Vec<&ForecastTarget> = batch.iter().map(|&i| targets[i]).collect();
            let denom = forecast_denominator(&bt, cfg.per_entry_loss);
            if denom == 0.0 {
                continue;
            }
            let recs: Vec<&PatientRecord> = batch.iter().map(|&i| &train.records[i]).collect();
            let (loss, grads) = batch_gradients(model, &recs, |tape, net, r| {
                record_forecast_loss(tape, net, r, 1.0 / denom)
            })?;
            train_loss += loss * batch.len() as f64 / train.len() as f64;
            step += 1;
            apply(model, &grads, &cfg.adam, step, "pretraining")?;
        }
        let val_loss = evaluate_forecast(model, val, cfg.per_entry_loss)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_auroc: None,
            val_auprc: None,
            elapsed: start.elapsed().as_secs_f64(),
        });
        log::info!("pretrain epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.store.snapshot()));
            history.best_epoch = Some(epoch);
            history.best_metric = Some(val_loss);
        } else if epoch - history.best_epoch.unwrap_or(0) >= cfg.patience {
            history.stopped_early = true;
            break;
        }
    }
    if let Some((_, snap)) = best {
        model.store.restore(&snap);
    }
    Ok(history)
}

fn check_labels(ds: &Dataset, what: &str) -> Result<Vec<u8>> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Data(format!("every {what} record needs a label")))?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateLabels(format!(
            "{what} labels are all {}",
            if pos == 0 { 0 } else { 1 }
        )));
    }
    Ok(labels)
}

/// Supervised fine-tuning of every weight with binary cross-entropy. Stops
/// after `patience` epochs without a higher validation AUROC and restores
/// the best weights.
pub fn finetune(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    check_labels(train, "training")?;
    check_labels(val, "validation")?;

    model.store.reset_moments();
    let mut rng = Rng::substream(cfg.seed, "batching-finetune");
    let start = Instant::now();
    let mut history = History::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let mut train_loss = 0.0;
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            let recs: Vec<&PatientRecord> = batch.iter().map(|&i| &train.records[i]).collect();
            let scale = 1.0 / recs.len() as f64;
            let (loss, grads) = batch_gradients(model, &recs, |tape, net, r| {
                record_task_loss(tape, net, r, scale)
            })?;
            train_loss += loss * batch.len() as f64 / train.len() as f64;
            step += 1;
            apply(model, &grads, &cfg.adam, step, "fine-tuning")?;
        }
        let ev = evaluate(model, val)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss: ev.loss,
            val_auroc: Some(ev.auroc),
            val_auprc: Some(ev.auprc),
            elapsed: start.elapsed().as_secs_f64(),
        });
        log::info!(
            "finetune epoch {epoch}: train {train_loss:.5} val {:.5} auroc {:.4} auprc {:.4}",
            ev.loss,
            ev.auroc,
            ev.auprc
        );
        if best.as_ref().is_none_or(|(b, _)| ev.auroc > *b) {
            best = Some((ev.auroc, model.store.snapshot()));
            history.best_epoch = Some(epoch);
            history.best_metric = Some(ev.auroc);
        } else if epoch - history.best_epoch.unwrap_or(0) >= cfg.patience {
            history.stopped_early = true;
            break;
        }
    }
    if let Some((_, snap)) = best {
        model.store.restore(&snap);
    }
    Ok(history)
}
