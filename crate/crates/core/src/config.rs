//! Flat `key = value` run configuration covering the synthetic generator,
//! the architecture, training and the experiment protocol.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! signal = long_range
//! ablation = no_mamba,no_fusion
//! split = 0.6,0.2,0.2
//! ```
//!
//! Unknown or repeated keys are errors. [`RunConfig::to_text`] writes every
//! key in a fixed order with floats in shortest round-trip form, so parsing
//! the echo gives back an identical configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::training::Experiment;

pub const ECHO_FILE: &str = "run_config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Drives splitting, label budgets, initialization and batching.
    pub seed: u64,
    /// Worker threads; 0 leaves the choice to the thread pool.
    pub threads: usize,
    /// Seeds per ablation row (`seed`, `seed + 1`, ...).
    pub n_seeds: usize,
    pub synth: SyntheticSpec,
    pub experiment: Experiment,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        let mut experiment = Experiment::default();
        experiment.model.n_features = synth.n_features;
        experiment.model.static_dim = synth.static_dim;
        experiment.w_obs = synth.w_obs;
        experiment.w_fc = synth.w_fc;
        Self {
            seed: 0,
            threads: 0,
            n_seeds: 5,
            synth,
            experiment,
        }
    }
}

pub const KEYS: [&str; 39] = [
    "seed",
    "threads",
    "n_seeds",
    "n_patients",
    "n_features",
    "static_dim",
    "mean_seq_len",
    "w_obs",
    "w_fc",
    "follow_up",
    "signal",
    "label_noise",
    "data_seed",
    "tau",
    "d",
    "d_a",
    "state_dim",
    "conv_width",
    "expansion",
    "n_blocks",
    "layers_per_block",
    "attn_layers",
    "heads",
    "ssm_mode",
    "time_scale",
    "causal_attention",
    "ablation",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "patience",
    "per_entry_loss",
    "pretrain_epochs",
    "finetune_epochs",
    "split",
    "label_fraction",
    "shuffle_labels",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_split(value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| parse("split", p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("split = {value:?}: expected three fractions")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.experiment.model;
        let t = &mut self.experiment.train;
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "n_seeds" => self.n_seeds = parse(key, v)?,
            "n_patients" => s.n_patients = parse(key, v)?,
            "n_features" => {
                s.n_features = parse(key, v)?;
                m.n_features = s.n_features;
            }
            "static_dim" => {
                s.static_dim = parse(key, v)?;
                m.static_dim = s.static_dim;
            }
            "mean_seq_len" => s.mean_seq_len = parse(key, v)?,
            "w_obs" => {
                s.w_obs = parse(key, v)?;
                self.experiment.w_obs = s.w_obs;
            }
            "w_fc" => {
                s.w_fc = parse(key, v)?;
                self.experiment.w_fc = s.w_fc;
            }
            "follow_up" => s.follow_up = parse(key, v)?,
            "signal" => s.mode = parse(key, v)?,
            "label_noise" => s.label_noise = parse(key, v)?,
            "data_seed" => s.seed = parse(key, v)?,
            "tau" => m.tau = parse(key, v)?,
            "d" => m.d = parse(key, v)?,
            "d_a" => m.d_a = parse(key, v)?,
            "state_dim" => m.state_dim = parse(key, v)?,
            "conv_width" => m.conv_width = parse(key, v)?,
            "expansion" => m.expansion = parse(key, v)?,
            "n_blocks" => m.n_blocks = parse(key, v)?,
            "layers_per_block" => m.layers_per_block = parse(key, v)?,
            "attn_layers" => m.attn_layers = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "ssm_mode" => m.ssm_mode = parse(key, v)?,
            "time_scale" => m.time_scale = parse(key, v)?,
            "causal_attention" => m.causal_attention = parse(key, v)?,
            "ablation" => m.ablation = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.adam.lr = parse(key, v)?,
            "beta1" => t.adam.beta1 = parse(key, v)?,
            "beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "per_entry_loss" => t.per_entry_loss = parse(key, v)?,
            "pretrain_epochs" => self.experiment.pretrain_epochs = parse(key, v)?,
            "finetune_epochs" => self.experiment.finetune_epochs = parse(key, v)?,
            "split" => self.experiment.split = parse_split(v)?,
            "label_fraction" => self.experiment.label_fraction = parse(key, v)?,
            "shuffle_labels" => self.experiment.shuffle_labels = parse(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?} (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.experiment.model;
        let t = &self.experiment.train;
        let s = &self.synth;
        let e = &self.experiment;
        Some(match key {
            "seed" => self.seed.to_string(),
            "threads" => self.threads.to_string(),
            "n_seeds" => self.n_seeds.to_string(),
            "n_patients" => s.n_patients.to_string(),
            "n_features" => s.n_features.to_string(),
            "static_dim" => s.static_dim.to_string(),
            "mean_seq_len" => s.mean_seq_len.to_string(),
            "w_obs" => e.w_obs.to_string(),
            "w_fc" => e.w_fc.to_string(),
            "follow_up" => s.follow_up.to_string(),
            "signal" => s.mode.to_string(),
            "label_noise" => s.label_noise.to_string(),
            "data_seed" => s.seed.to_string(),
            "tau" => m.tau.to_string(),
            "d" => m.d.to_string(),
            "d_a" => m.d_a.to_string(),
            "state_dim" => m.state_dim.to_string(),
            "conv_width" => m.conv_width.to_string(),
            "expansion" => m.expansion.to_string(),
            "n_blocks" => m.n_blocks.to_string(),
            "layers_per_block" => m.layers_per_block.to_string(),
            "attn_layers" => m.attn_layers.to_string(),
            "heads" => m.heads.to_string(),
            "ssm_mode" => m.ssm_mode.to_string(),
            "time_scale" => m.time_scale.to_string(),
            "causal_attention" => m.causal_attention.to_string(),
            "ablation" => m.ablation.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "patience" => t.patience.to_string(),
            "per_entry_loss" => t.per_entry_loss.to_string(),
            "pretrain_epochs" => e.pretrain_epochs.to_string(),
            "finetune_epochs" => e.finetune_epochs.to_string(),
            "split" => e.split.map(|f| f.to_string()).join(","),
            "label_fraction" => e.label_fraction.to_string(),
            "shuffle_labels" => e.shuffle_labels.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    i + 1
                ))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} given twice", i + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every key has a value")))
            .collect()
    }

    /// Writes the resolved configuration to `dir/run_config.txt`.
    pub fn echo(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(ECHO_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.experiment.model.validate()?;
        self.experiment.train.validate()?;
        let e = &self.experiment;
        if e.split.iter().any(|f| !(0.0..=1.0).contains(f))
            || (e.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split {:?} must be fractions summing to 1",
                e.split
            )));
        }
        if !(e.label_fraction > 0.0 && e.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction {} must be in (0, 1]",
                e.label_fraction
            )));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be positive".into()));
        }
        Ok(())
    }
}
