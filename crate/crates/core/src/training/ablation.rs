use super::pipeline::{run_pipeline, Experiment};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Ablation;

/// Ablation table row labels and the flag each one switches on; the last
/// row is the full model.
pub const TABLE_ROWS: [(&str, &str); 6] = [
    ("w/o Input embedding", "no_input_embedding"),
    ("w/o Self-Attention layer", "no_self_attention"),
    ("w/o Attention fusion", "no_fusion"),
    ("w/o Self-supervised Pretraining", "no_pretrain"),
    ("w/o Mamba blocks", "no_mamba"),
    ("HyMaTE (full)", "none"),
];

/// Row label for a flag set; combinations without a table row use their
/// flag list.
pub fn table_label(ablation: &Ablation) -> String {
    let flags = ablation.to_string();
    TABLE_ROWS
        .iter()
        .find(|(_, f)| *f == flags)
        .map_or(flags, |(label, _)| label.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub ablation: Ablation,
    /// Test AUROC per seed, in seed order.
    pub aurocs: Vec<f64>,
}

impl AblationRow {
    pub fn is_baseline(&self) -> bool {
        self.ablation.is_full()
    }

    pub fn mean(&self) -> f64 {
        self.aurocs.iter().sum::<f64>() / self.aurocs.len() as f64
    }

    /// Sample standard deviation.
    pub fn sd(&self) -> f64 {
        let n = self.aurocs.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.aurocs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Runs the pipeline for every flag set and seed; the full model is added
/// when absent. Rows come back in the order given, full model last.
pub fn run_ablation(
    ds: &Dataset,
    exp: &Experiment,
    settings: &[Ablation],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.len() < 2 {
        return Err(Error::Config("an ablation needs at least two seeds".into()));
    }
    let mut settings: Vec<Ablation> = settings.iter().copied().filter(|a| !a.is_full()).collect();
    settings.push(Ablation::default());
    settings
        .into_iter()
        .map(|ablation| {
            let mut e = exp.clone();
            e.model.ablation = ablation;
            let aurocs = seeds
                .iter()
                .map(|&s| {
                    let r = run_pipeline(ds, &e, s)?;
                    log::info!(
                        "ablation {ablation} seed {s}: test auroc {:.4}",
                        r.test.auroc
                    );
                    Ok(r.test.auroc)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(AblationRow {
                label: table_label(&ablation),
                ablation,
                aurocs,
            })
        })
        .collect()
}

/// `ablation,flags,baseline,auroc_mean,auroc_sd,n_seeds`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("ablation,flags,baseline,auroc_mean,auroc_sd,n_seeds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            r.ablation.to_string().replace(',', ";"),
            r.is_baseline(),
            r.mean(),
            r.sd(),
            r.aurocs.len()
        ));
    }
    s
}
