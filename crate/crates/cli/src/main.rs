//! `hymate` command-line driver.
//!
//! Settings resolve in this order, later wins: built-in defaults, the
//! `--config` file, `--set key=value` overrides, then the dedicated flags
//! (`--seed`, `--threads`, `--w-obs`, `--w-fc`, `--mode`, `--ablate`).
//! Every command that writes files echoes the resolved configuration to
//! `run_config.txt` in its output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, Parser, Subcommand};

use hymate::config::RunConfig;
use hymate::data::{generate, load_jsonl, normalize, save_jsonl, split, Dataset, StatsSource};
use hymate::error::Error;
use hymate::interpret::{explain_global, explain_temporal, write_explanations, write_importance};
use hymate::model::{Ablation, Model};
use hymate::ssm::SsmMode;
use hymate::training::{
    ablation_csv, evaluate, finetune_stage, init_model, load_checkpoint, metrics_csv, prepare,
    pretrain_stage, run_ablation, save_checkpoint, task_sets, Experiment, TABLE_ROWS,
};

#[derive(Parser, Debug)]
#[command(name = "hymate", version, about = "Hybrid Mamba/Transformer encoder for irregular EHR triplets")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, visible_alias = "spec", global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Master seed; also seeds the synthetic generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Observation window length in hours.
    #[arg(long, global = true)]
    w_obs: Option<f64>,
    /// Forecast window length in hours.
    #[arg(long, global = true)]
    w_fc: Option<f64>,
    /// SSM mode.
    #[arg(long, global = true, value_name = "lti|selective")]
    mode: Option<SsmMode>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset: data.jsonl, vocab.json, stats.json.
    Gen,
    /// Self-supervised forecast pretraining.
    Pretrain {
        #[command(flatten)]
        io: DataIo,
    },
    /// Fine-tune on the outcome, from a checkpoint or from scratch.
    Finetune {
        #[command(flatten)]
        io: DataIo,
        /// Comma-separated ablation flags for a fresh model.
        #[arg(long, value_name = "FLAGS")]
        ablate: Option<Ablation>,
    },
    /// Validation and test metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        io: CheckpointIo,
    },
    /// Per-triplet attention weights of the test records and a global
    /// variable ranking.
    Explain {
        #[command(flatten)]
        io: CheckpointIo,
    },
    /// Full pipeline per ablation and seed; writes ablation.csv.
    Ablate {
        /// JSONL data; generated from the configuration when absent.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Ablation setting to compare with the full model; repeatable.
        /// Defaults to every table row.
        #[arg(long, value_name = "FLAGS")]
        ablate: Vec<Ablation>,
    },
    /// Run the oracle suite and print PASS/FAIL per check.
    Verify,
}

#[derive(Args, Debug)]
struct DataIo {
    /// data.jsonl, or a directory holding it.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Checkpoint to start from.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckpointIo {
    /// data.jsonl, or a directory holding it.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
}

fn resolve(common: &Common) -> hymate::error::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
        cfg.set("data_seed", &s.to_string())?;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(w) = common.w_obs {
        cfg.set("w_obs", &w.to_string())?;
    }
    if let Some(w) = common.w_fc {
        cfg.set("w_fc", &w.to_string())?;
    }
    if let Some(m) = common.mode {
        cfg.experiment.model.ssm_mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("data.jsonl")
    } else {
        path.to_path_buf()
    }
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    let file = data_file(path);
    let (ds, report) = load_jsonl(&file).with_context(|| format!("loading {}", file.display()))?;
    if report.unsorted_records > 0 {
        log::warn!(
            "{} of {} records were out of time order and were sorted",
            report.unsorted_records,
            report.records
        );
    }
    Ok(ds)
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.echo(dir)?;
    Ok(())
}

fn write(path: PathBuf, text: String) -> anyhow::Result<()> {
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    prepare_out(out, cfg)?;
    let mut ds = generate(&cfg.synth)?;
    // stats.json holds the training-split statistics the pipeline will fit
    let (train, _, _) = split(&ds, cfg.experiment.split, cfg.seed)?;
    let (_, stats) = normalize(&train, StatsSource::Fit)?;
    ds.stats = Some(stats);
    let path = save_jsonl(&ds, out)?;
    println!("wrote {} records to {}", ds.len(), path.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig, io: &DataIo, out: &Path) -> anyhow::Result<()> {
    let ds = load_data(&io.data)?;
    let exp = &cfg.experiment;
    let (mut model, stats) = match &io.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => (init_model(&ds, exp, cfg.seed)?, None),
    };
    prepare_out(out, cfg)?;
    let prep = prepare(&ds, exp, cfg.seed, stats.as_ref())?;
    let history = pretrain_stage(&mut model, &prep, exp, cfg.seed)?;
    write(out.join("pretrain_history.csv"), history.to_csv())?;
    save_checkpoint(&model, Some(&prep.stats), out.join("checkpoint.json"))?;
    println!(
        "pretrained {} epochs (best {:?}, val loss {:?})",
        history.epochs.len(),
        history.best_epoch,
        history.best_metric
    );
    Ok(())
}

fn finetune(
    cfg: &RunConfig,
    io: &DataIo,
    ablate: Option<Ablation>,
    out: &Path,
) -> anyhow::Result<()> {
    let ds = load_data(&io.data)?;
    let mut exp = cfg.experiment.clone();
    if let Some(a) = ablate {
        exp.model.ablation = a;
    }
    let (mut model, stats) = match &io.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => (init_model(&ds, &exp, cfg.seed)?, None),
    };
    prepare_out(out, cfg)?;
    let prep = prepare(&ds, &exp, cfg.seed, stats.as_ref())?;
    let sets = task_sets(&prep, &exp, cfg.seed)?;
    let history = finetune_stage(&mut model, &sets, &exp, cfg.seed)?;
    let val = evaluate(&model, &sets.val)?;
    let test = evaluate(&model, &sets.test)?;
    write(out.join("finetune_history.csv"), history.to_csv())?;
    write(
        out.join("metrics.csv"),
        metrics_csv(history.best_epoch, &[("val", &val), ("test", &test)]),
    )?;
    save_checkpoint(&model, Some(&prep.stats), out.join("checkpoint.json"))?;
    println!("val auroc {:.4}, test auroc {:.4}", val.auroc, test.auroc);
    Ok(())
}

fn checkpoint_sets(
    cfg: &RunConfig,
    io: &CheckpointIo,
) -> anyhow::Result<(Model, hymate::training::TaskSets, Vec<String>)> {
    let ds = load_data(&io.data)?;
    let (model, stats) = load_checkpoint(&io.checkpoint)?;
    if stats.is_none() {
        bail!(
            "{} carries no normalization statistics",
            io.checkpoint.display()
        );
    }
    let prep = prepare(&ds, &cfg.experiment, cfg.seed, stats.as_ref())?;
    let sets = task_sets(&prep, &cfg.experiment, cfg.seed)?;
    Ok((model, sets, ds.vocab))
}

fn eval(cfg: &RunConfig, io: &CheckpointIo, out: &Path) -> anyhow::Result<()> {
    let (model, sets, _) = checkpoint_sets(cfg, io)?;
    prepare_out(out, cfg)?;
    let val = evaluate(&model, &sets.val)?;
    let test = evaluate(&model, &sets.test)?;
    write(
        out.join("metrics.csv"),
        metrics_csv(None, &[("val", &val), ("test", &test)]),
    )?;
    let mut preds = String::from("record_id,probability,label\n");
    for (r, p) in sets.test.records.iter().zip(&test.probabilities) {
        let y = r.label.map(|y| y.to_string()).unwrap_or_default();
        preds.push_str(&format!("{},{p},{y}\n", r.id));
    }
    write(out.join("predictions.csv"), preds)?;
    println!(
        "val auroc {:.4} auprc {:.4}; test auroc {:.4} auprc {:.4}",
        val.auroc, val.auprc, test.auroc, test.auprc
    );
    Ok(())
}

fn explain(cfg: &RunConfig, io: &CheckpointIo, out: &Path) -> anyhow::Result<()> {
    let (model, sets, vocab) = checkpoint_sets(cfg, io)?;
    prepare_out(out, cfg)?;
    let explanations = sets
        .test
        .records
        .iter()
        .map(|r| explain_temporal(&model, r, &vocab))
        .collect::<hymate::error::Result<Vec<_>>>()?;
    write_explanations(&explanations, out.join("explain.csv"))?;
    let importance = explain_global(&model, &vocab)?;
    write_importance(&importance, out.join("importance.csv"))?;
    for (name, score) in importance.ranking.iter().take(5) {
        println!("{name}\t{score:.4}");
    }
    Ok(())
}

fn ablate(
    cfg: &RunConfig,
    data: Option<&Path>,
    settings: &[Ablation],
    out: &Path,
) -> anyhow::Result<()> {
    let ds = match data {
        Some(p) => load_data(p)?,
        None => generate(&cfg.synth)?,
    };
    let settings: Vec<Ablation> = if settings.is_empty() {
        TABLE_ROWS
            .iter()
            .map(|(_, flags)| flags.parse())
            .collect::<hymate::error::Result<_>>()?
    } else {
        settings.to_vec()
    };
    prepare_out(out, cfg)?;
    let seeds: Vec<u64> = (0..cfg.n_seeds as u64).map(|i| cfg.seed + i).collect();
    let exp: &Experiment = &cfg.experiment;
    let rows = run_ablation(&ds, exp, &settings, &seeds)?;
    let csv = ablation_csv(&rows);
    write(out.join("ablation.csv"), csv.clone())?;
    print!("{csv}");
    Ok(())
}

fn verify(cfg: &RunConfig) -> anyhow::Result<bool> {
    let checks = hymate::verify::run_all(cfg.seed)?;
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(true)
    } else {
        eprintln!("failing checks: {}", failed.join(", "));
        Ok(false)
    }
}

fn run(cli: Cli, cfg: RunConfig) -> anyhow::Result<bool> {
    let out = cli.common.out.as_path();
    match &cli.cmd {
        Cmd::Gen => gen(&cfg, out)?,
        Cmd::Pretrain { io } => pretrain(&cfg, io, out)?,
        Cmd::Finetune { io, ablate } => finetune(&cfg, io, *ablate, out)?,
        Cmd::Eval { io } => eval(&cfg, io, out)?,
        Cmd::Explain { io } => explain(&cfg, io, out)?,
        Cmd::Ablate { data, ablate: a } => ablate(&cfg, data.as_deref(), a, out)?,
        Cmd::Verify => return verify(&cfg),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match resolve(&cli.common) {
        Ok(c) => c,
        // clap prints the message with usage and exits with status 2
        Err(e) => Cli::command()
            .error(clap::error::ErrorKind::ValueValidation, e)
            .exit(),
    };
    let threads = cfg.threads;
    match hymate::par::with_threads(threads, move || run(cli, cfg)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
