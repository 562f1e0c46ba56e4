//! Reading a trained model: per-triplet pooling weights for one record and
//! a global ranking of input variables from the task head.
//!
//! Global scores are a heuristic. The head sees `[z^d ; z^T]`, not the
//! inputs, so each variable is scored by how its first-order pathway lines
//! up with the head weights:
//!
//! * temporal feature `f`: `|Σ_c w_o[d + c] · W̄[f][c]|`, where `W̄[f]` is the
//!   feature's row of the embedding table (or its one-hot column of the
//!   linear embedding when that is in use);
//! * static input `j`: `|Σ_k w_o[k] · ∂z^d_k/∂s_j|` at `s = 0`.

use std::path::Path;

use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::model::{Embedder, Model};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalRow {
    pub t: f64,
    pub feature: String,
    pub value: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalExplanation {
    pub record_id: String,
    /// Ordered by time; simultaneous triplets keep record order.
    pub rows: Vec<TemporalRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalImportance {
    /// `(name, score)`, descending by score, ties by name.
    pub ranking: Vec<(String, f64)>,
}

impl GlobalImportance {
    pub fn score(&self, name: &str) -> Option<f64> {
        self.ranking
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
    }

    pub fn rank(&self, name: &str) -> Option<usize> {
        self.ranking.iter().position(|(n, _)| n == name)
    }
}

pub fn static_name(j: usize) -> String {
    format!("static_{j}")
}

fn feature_name(vocab: &[String], f: usize) -> String {
    vocab
        .get(f)
        .cloned()
        .unwrap_or_else(|| format!("feature_{f}"))
}

/// Pooling weights of one record, joined to its triplets.
pub fn explain_temporal(
    model: &Model,
    record: &PatientRecord,
    vocab: &[String],
) -> Result<TemporalExplanation> {
    if record.triplets.is_empty() {
        return Err(Error::Data(format!(
            "record {} has no triplets to explain",
            record.id
        )));
    }
    let out = model.run(record)?;
    let mut rows: Vec<TemporalRow> = record
        .triplets
        .iter()
        .zip(&out.alphas)
        .map(|(t, &alpha)| TemporalRow {
            t: t.time,
            feature: feature_name(vocab, t.feature),
            value: t.value,
            alpha,
        })
        .collect();
    rows.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(TemporalExplanation {
        record_id: record.id.clone(),
        rows,
    })
}

pub fn explain_global(model: &Model, vocab: &[String]) -> Result<GlobalImportance> {
    let cfg = &model.config;
    let store = &model.store;
    let w_o = store
        .get("head.task.w")
        .filter(|w| w.shape() == [1, cfg.d_e()])
        .ok_or_else(|| Error::Data("model has no task head to attribute".into()))?
        .data();
    let (w_static, w_temporal) = w_o.split_at(cfg.d);

    let mut ranking = Vec::with_capacity(cfg.n_features + cfg.static_dim);
    for f in 0..cfg.n_features {
        let row: Vec<f64> = match &model.net.embed {
            Embedder::Triplet(e) => store.value(e.feature_table).row(f).to_vec(),
            Embedder::Linear(l) => {
                let w = store.value(l.map.w);
                (0..cfg.tau).map(|c| w.row(c)[1 + f]).collect()
            }
        };
        let s: f64 = w_temporal.iter().zip(&row).map(|(a, b)| a * b).sum();
        ranking.push((feature_name(vocab, f), s.abs()));
    }

    if cfg.static_dim > 0 {
        let jac = static_jacobian(model)?;
        for j in 0..cfg.static_dim {
            let s: f64 = (0..cfg.d).map(|k| w_static[k] * jac.row(k)[j]).sum();
            ranking.push((static_name(j), s.abs()));
        }
    }
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(GlobalImportance { ranking })
}

/// `∂z^d/∂s` at `s = 0`, `d × D`.
fn static_jacobian(model: &Model) -> Result<Tensor> {
    let st = &model.net.statics;
    let store = &model.store;
    let (d, dim) = (model.config.d, model.config.static_dim);
    let w1 = store.value(st.hidden.w);
    let w2 = store.value(st.out.w);
    let bias = |b: Option<crate::numerics::ParamId>, n: usize| {
        b.map_or(vec![0.0; n], |id| store.value(id).data().to_vec())
    };
    // at s = 0 the hidden pre-activation is just the bias
    let h: Vec<f64> = bias(st.hidden.b, w1.rows())
        .iter()
        .map(|b| b.tanh())
        .collect();
    let b2 = bias(st.out.b, d);
    let mut jac = vec![0.0; d * dim];
    for k in 0..d {
        let pre = crate::numerics::dot(w2.row(k), &h) + b2[k];
        let outer = 1.0 - pre.tanh().powi(2);
        for j in 0..dim {
            let inner: f64 = (0..w1.rows())
                .map(|m| w2.row(k)[m] * (1.0 - h[m] * h[m]) * w1.row(m)[j])
                .sum();
            jac[k * dim + j] = outer * inner;
        }
    }
    Tensor::matrix(d, dim, jac)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// `record_id,t,feature,value,alpha` for every explanation, header first.
pub fn write_explanations(
    explanations: &[TemporalExplanation],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["record_id", "t", "feature", "value", "alpha"])
        .map_err(|e| csv_error(path, e))?;
    for ex in explanations {
        for r in &ex.rows {
            w.write_record([
                ex.record_id.clone(),
                r.t.to_string(),
                r.feature.clone(),
                r.value.to_string(),
                r.alpha.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `variable,score`, in ranking order.
pub fn write_importance(importance: &GlobalImportance, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["variable", "score"])
        .map_err(|e| csv_error(path, e))?;
    for (name, score) in &importance.ranking {
        w.write_record([name.clone(), score.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Triplet;
    use crate::model::ModelConfig;

    fn record(n: usize) -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            statics: vec![0.3, -0.2],
            triplets: (0..n)
                .map(|i| Triplet {
                    time: i as f64,
                    feature: i % 3,
                    value: 0.1 * i as f64,
                })
                .collect(),
            label: None,
            forecast: None,
        }
    }

    fn vocab() -> Vec<String> {
        vec!["hr".into(), "map".into(), "spo2".into()]
    }

    #[test]
    fn single_triplet_gets_all_the_weight() {
        let model = Model::new(ModelConfig::new(3, 2), 1).unwrap();
        let ex = explain_temporal(&model, &record(1), &vocab()).unwrap();
        assert_eq!(ex.rows.len(), 1);
        assert!((ex.rows[0].alpha - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alphas_match_the_forward_pass() {
        let model = Model::new(ModelConfig::new(3, 2), 1).unwrap();
        let rec = record(7);
        let ex = explain_temporal(&model, &rec, &vocab()).unwrap();
        let alphas: Vec<f64> = ex.rows.iter().map(|r| r.alpha).collect();
        assert_eq!(alphas, model.run(&rec).unwrap().alphas);
        assert!((alphas.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_record_is_an_error() {
        let model = Model::new(ModelConfig::new(3, 2), 1).unwrap();
        assert!(explain_temporal(&model, &record(0), &vocab()).is_err());
    }

    #[test]
    fn zero_head_ties_resolve_by_name() {
        let mut model = Model::new(ModelConfig::new(3, 2), 1).unwrap();
        let id = model.store.id("head.task.w").unwrap();
        model.store.value_mut(id).fill(0.0);
        let g = explain_global(&model, &vocab()).unwrap();
        let names: Vec<&str> = g.ranking.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["hr", "map", "spo2", "static_0", "static_1"]);
        assert!(g.ranking.iter().all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn temporal_score_is_the_head_projected_table_row() {
        let model = Model::new(ModelConfig::new(3, 2), 4).unwrap();
        let g = explain_global(&model, &vocab()).unwrap();
        let w = model.store.get("head.task.w").unwrap().data();
        let table = model.store.get("embed.feature_table").unwrap();
        let d = model.config.d;
        let want: f64 = (0..model.config.tau)
            .map(|c| w[d + c] * table.row(1)[c])
            .sum();
        assert!((g.score("map").unwrap() - want.abs()).abs() < 1e-15);
    }

    #[test]
    fn static_jacobian_matches_finite_differences() {
        let model = Model::new(ModelConfig::new(3, 2), 9).unwrap();
        let jac = static_jacobian(&model).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut sp = vec![0.0; 2];
            let mut sm = vec![0.0; 2];
            sp[j] = h;
            sm[j] = -h;
            let zp = model.net.statics.embed(&model.store, &sp).unwrap();
            let zm = model.net.statics.embed(&model.store, &sm).unwrap();
            for k in 0..model.config.d {
                let fd = (zp.data()[k] - zm.data()[k]) / (2.0 * h);
                assert!((fd - jac.row(k)[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn linear_embedding_is_supported() {
        let mut cfg = ModelConfig::new(3, 0);
        cfg.ablation.no_input_embedding = true;
        let model = Model::new(cfg, 2).unwrap();
        let g = explain_global(&model, &vocab()).unwrap();
        assert_eq!(g.ranking.len(), 3);
    }

    #[test]
    fn csv_files_have_headers() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig::new(3, 2), 1).unwrap();
        let ex = explain_temporal(&model, &record(4), &vocab()).unwrap();
        write_explanations(&[ex], dir.path().join("explain.csv")).unwrap();
        write_importance(
            &explain_global(&model, &vocab()).unwrap(),
            dir.path().join("importance.csv"),
        )
        .unwrap();
        let e = std::fs::read_to_string(dir.path().join("explain.csv")).unwrap();
        assert!(e.starts_with("record_id,t,feature,value,alpha\np,0,hr,0,"));
        assert_eq!(e.lines().count(), 5);
        let i = std::fs::read_to_string(dir.path().join("importance.csv")).unwrap();
        assert!(i.starts_with("variable,score\n"));
        assert_eq!(i.lines().count(), 6);
    }
}
