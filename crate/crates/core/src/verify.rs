//! Self-checks behind the `verify` command: gradient checks, scan/kernel
//! agreement, discretization limits, causality, pooling contracts, masked
//! loss invariance and metric oracles.

use std::fmt;

use crate::attention::{FusionAttention, SelfAttentionLayer};
use crate::data::{ForecastTarget, PatientRecord, Triplet};
use crate::embedding::{LinearTripletEmbedding, StaticEmbedding, TripletEmbedding};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::numerics::{
    check_gradients, GradCheckOptions, GradReport, ParameterStore, Rng, Tape, Tensor, Var,
};
use crate::ssm::{
    causal_conv, ssm_kernel, zoh_discretize, MambaConfig, MambaEncoder, SsmLayer, SsmMode,
};
use crate::training::{auprc, auroc, record_forecast_loss, record_task_loss};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const SCAN_TOLERANCE: f64 = 1e-8;
pub const ZOH_TOLERANCE: f64 = 1e-10;
pub const CAUSAL_TOLERANCE: f64 = 1e-12;
pub const METRIC_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn bound(name: &str, value: f64, limit: f64, what: &str) -> Self {
        Self {
            name: name.to_string(),
            passed: value < limit,
            detail: format!("{what} {value:.3e} (limit {limit:.0e})"),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Six triplets over three features with statics, label and forecast target.
pub fn toy_record() -> PatientRecord {
    let triplets = [
        (0.5, 0, 0.3),
        (1.0, 2, -1.1),
        (3.0, 1, 0.7),
        (3.0, 0, 1.4),
        (9.5, 2, -0.2),
        (20.0, 1, 0.9),
    ]
    .iter()
    .map(|&(time, feature, value)| Triplet {
        time,
        feature,
        value,
    })
    .collect();
    PatientRecord {
        id: "toy".into(),
        statics: vec![0.4, -1.2],
        triplets,
        label: Some(1),
        forecast: Some(ForecastTarget {
            mask: vec![true, false, true],
            values: vec![0.8, 0.0, -0.5],
        }),
    }
}

fn grad_check(name: &str, report: GradReport) -> Check {
    let mut c = Check::bound(name, report.max_rel_err, GRAD_TOLERANCE, "max rel err");
    c.passed = report.passed && report.max_rel_err < GRAD_TOLERANCE;
    c.detail = match report.failure {
        Some(f) => format!("{} ({f})", c.detail),
        None => format!(
            "{} over {} coords, worst {}",
            c.detail, report.coords_checked, report.worst_name
        ),
    };
    c
}

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_parts(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect())
}

/// `Σ w ⊙ tanh(y)` with a fixed random `w`, so every output coordinate
/// carries its own weight.
fn probe_loss(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let (r, c) = (tape.value(y).rows(), tape.value(y).cols());
    let w = random_tensor(&mut Rng::substream(seed, "probe"), r, c);
    let w = tape.constant(w);
    let t = tape.tanh(y);
    let p = tape.mul(t, w);
    tape.sum(p)
}

/// Moves SSM steps from their small initial values into `[0.1, 1]`, where
/// the `A` gradients are large enough for finite differences to resolve.
fn spread_steps(store: &mut ParameterStore, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id);
        let raw = if name.ends_with(".log_dt") {
            |d: f64| d.ln()
        } else if name.ends_with(".dt_proj.b") {
            |d: f64| d.exp_m1().ln()
        } else {
            continue;
        };
        for v in store.value_mut(id).data_mut() {
            *v = raw(rng.uniform_range(0.1, 1.0));
        }
    }
}

/// Gradient checks of every layer type and of the full model on the toy
/// record, in both SSM modes.
pub fn gradient_checks(seed: u64) -> Result<Vec<Check>> {
    // round-off dominates the central difference below this step on the
    // smaller gradients of the selective scan
    let opts = GradCheckOptions {
        seed,
        step: 1e-4,
        ..GradCheckOptions::default()
    };
    let rec = toy_record();
    let tau = 4;
    let mut out = Vec::new();

    let mut store = ParameterStore::new();
    let mut rng = Rng::substream(seed, "verify-grad");
    let emb = TripletEmbedding::new(&mut store, &mut rng, 3, tau, 24.0)?;
    let r = check_gradients(
        &mut store,
        |t| {
            let e = emb.forward(t, &rec.triplets)?;
            Ok(probe_loss(t, e, seed))
        },
        &opts,
    )?;
    out.push(grad_check("gradient/triplet_embedding", r));

    let mut store = ParameterStore::new();
    let lin = LinearTripletEmbedding::new(&mut store, &mut rng, 3, tau, 24.0)?;
    let r = check_gradients(
        &mut store,
        |t| {
            let e = lin.forward(t, &rec.triplets)?;
            Ok(probe_loss(t, e, seed))
        },
        &opts,
    )?;
    out.push(grad_check("gradient/linear_embedding", r));

    let mut store = ParameterStore::new();
    let st = StaticEmbedding::new(&mut store, &mut rng, 2, 3)?;
    let r = check_gradients(
        &mut store,
        |t| {
            let z = st.forward(t, &rec.statics)?;
            Ok(probe_loss(t, z, seed))
        },
        &opts,
    )?;
    out.push(grad_check("gradient/static_embedding", r));

    let x = random_tensor(&mut rng, rec.triplets.len(), tau);
    for mode in [SsmMode::Lti, SsmMode::Selective] {
        let mut store = ParameterStore::new();
        let cfg = MambaConfig {
            tau,
            expansion: 2,
            state_dim: 3,
            conv_width: 3,
            mode,
        };
        let enc = MambaEncoder::new(&mut store, &mut rng, 1, 2, &cfg)?;
        spread_steps(&mut store, &mut rng);
        let r = check_gradients(
            &mut store,
            |t| {
                let xv = t.constant(x.clone());
                let y = enc.forward(t, xv)?;
                Ok(probe_loss(t, y, seed))
            },
            &opts,
        )?;
        out.push(grad_check(&format!("gradient/mamba_{mode}"), r));
    }

    let mut store = ParameterStore::new();
    let layer = SelfAttentionLayer::new(&mut store, &mut rng, "attn.0", tau, 2, false)?;
    let r = check_gradients(
        &mut store,
        |t| {
            let xv = t.constant(x.clone());
            let y = layer.forward(t, xv)?;
            Ok(probe_loss(t, y, seed))
        },
        &opts,
    )?;
    out.push(grad_check("gradient/self_attention", r));

    let mut store = ParameterStore::new();
    let fusion = FusionAttention::new(&mut store, &mut rng, tau, 3)?;
    let r = check_gradients(
        &mut store,
        |t| {
            let xv = t.constant(x.clone());
            let p = fusion.forward(t, xv)?;
            Ok(probe_loss(t, p.z, seed))
        },
        &opts,
    )?;
    out.push(grad_check("gradient/fusion", r));

    for mode in [SsmMode::Lti, SsmMode::Selective] {
        let mut cfg = ModelConfig::new(3, 2);
        cfg.tau = tau;
        cfg.d = 3;
        cfg.d_a = 3;
        cfg.state_dim = 3;
        cfg.heads = 2;
        cfg.time_scale = 24.0;
        cfg.ssm_mode = mode;
        let mut model = Model::new(cfg, seed)?;
        spread_steps(&mut model.store, &mut rng);
        let net = model.net.clone();
        let r = check_gradients(
            &mut model.store,
            |t| record_task_loss(t, &net, &rec, 1.0),
            &opts,
        )?;
        out.push(grad_check(&format!("gradient/model_task_{mode}"), r));
        let r = check_gradients(
            &mut model.store,
            |t| record_forecast_loss(t, &net, &rec, 1.0),
            &opts,
        )?;
        out.push(grad_check(&format!("gradient/model_forecast_{mode}"), r));
    }
    Ok(out)
}

/// Recurrent scan of a random LTI layer against the causal convolution with
/// its kernel, over `trials` random shapes (`n ≤ 256`, `τ ≤ 8`, `ψ ≤ 16`).
pub fn scan_kernel_equivalence(seed: u64, trials: usize) -> Result<Check> {
    let mut rng = Rng::substream(seed, "verify-scan");
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = 1 + rng.below(256);
        let tau = 1 + rng.below(8);
        let psi = 1 + rng.below(16);
        let mut store = ParameterStore::new();
        let layer = SsmLayer::new(&mut store, &mut rng, "ssm", tau, psi, SsmMode::Lti)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            for v in store.value_mut(id).data_mut() {
                *v = if name.ends_with("a_log") {
                    rng.uniform_range(-2.0, 2.0)
                } else if name.ends_with("log_dt") {
                    rng.uniform_range(1e-3f64.ln(), 0.0)
                } else {
                    rng.normal()
                };
            }
        }
        let u = random_tensor(&mut rng, n, tau);
        let scanned = {
            let mut tape = Tape::new(&store);
            let x = tape.constant(u.clone());
            let y = layer.forward(&mut tape, x);
            tape.value(y).clone()
        };
        for k in 0..tau {
            let ch = layer
                .lti_channel(&store, k)
                .expect("an LTI layer has per-channel systems");
            let col: Vec<f64> = (0..n).map(|t| u.row(t)[k]).collect();
            let conv = causal_conv(&col, &ssm_kernel(&ch, SsmMode::Lti, n)?);
            for t in 0..n {
                worst = worst.max((conv[t] - scanned.row(t)[k]).abs());
            }
        }
    }
    Ok(Check::bound(
        &format!("scan_kernel_equivalence ({trials} configs)"),
        worst,
        SCAN_TOLERANCE,
        "max abs dev",
    ))
}

/// `A → 0` gives `B̄ = ΔB`; `Δ → 0` gives `Ā → 1`, `B̄ → 0`.
pub fn zoh_limits() -> Result<Check> {
    let mut worst: f64 = 0.0;
    let b = [1.0, -2.5, 0.3];
    for &delta in &[1e-3, 0.1, 1.0, 2.0] {
        for &a in &[0.0, -1e-15, -1e-12] {
            let (abar, bbar) = zoh_discretize(&[a; 3], &b, delta)?;
            for j in 0..3 {
                worst = worst
                    .max((bbar[j] - delta * b[j]).abs())
                    .max((abar[j] - 1.0).abs());
            }
        }
    }
    for &a in &[-0.5, -3.0, -16.0] {
        let (abar, bbar) = zoh_discretize(&[a; 3], &b, 1e-12)?;
        for j in 0..3 {
            worst = worst.max((abar[j] - 1.0).abs()).max(bbar[j].abs());
        }
    }
    Ok(Check::bound("zoh_limits", worst, ZOH_TOLERANCE, "max abs dev"))
}

/// Perturbs each position of a random input to a two-block encoder and
/// measures the largest change at earlier positions.
pub fn causality(seed: u64, mode: SsmMode) -> Result<Check> {
    let mut rng = Rng::substream(seed, "verify-causal");
    let mut store = ParameterStore::new();
    let cfg = MambaConfig {
        tau: 6,
        expansion: 2,
        state_dim: 4,
        conv_width: 4,
        mode,
    };
    let enc = MambaEncoder::new(&mut store, &mut rng, 2, 1, &cfg)?;
    let n = 24;
    let e = random_tensor(&mut rng, n, cfg.tau);
    let base = enc.encode(&store, &e)?;
    let mut worst: f64 = 0.0;
    for j in 0..n {
        let mut moved = e.clone();
        moved
            .row_mut(j)
            .iter_mut()
            .for_each(|x| *x += rng.normal());
        let out = enc.encode(&store, &moved)?;
        for t in 0..j {
            for (a, b) in out.row(t).iter().zip(base.row(t)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(Check::bound(
        &format!("causality_{mode}"),
        worst,
        CAUSAL_TOLERANCE,
        "max change before the perturbed position",
    ))
}

/// Fusion pooling over `trials` random inputs: weights are a distribution,
/// invariant to shifting the scores, and `z^T` is a convex combination.
pub fn fusion_contracts(seed: u64, trials: usize) -> Result<Check> {
    let mut rng = Rng::substream(seed, "verify-fusion");
    let mut violations = Vec::new();
    let (mut sum_dev, mut shift_dev, mut bound_dev): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for trial in 0..trials {
        let n = 1 + rng.below(40);
        let tau = 1 + rng.below(8);
        let d_a = 1 + rng.below(8);
        let scale = rng.uniform_range(0.1, 10.0);
        let mut store = ParameterStore::new();
        let fusion = FusionAttention::new(&mut store, &mut rng, tau, d_a)?;
        let c = random_tensor(&mut rng, n, tau).map(|v| scale * v);
        let shift = rng.uniform_range(-50.0, 50.0);

        let mut tape = Tape::new(&store);
        let cv = tape.constant(c.clone());
        let pooled = fusion.forward(&mut tape, cv)?;
        let scores = fusion.scores(&mut tape, cv);
        let k = tape.constant(Tensor::filled(&[n, 1], shift));
        let moved = tape.add(scores, k);
        let shifted = tape.softmax(moved);
        let alphas = tape.value(pooled.alphas).data();
        let z = tape.value(pooled.z).data();

        if alphas.iter().any(|&a| a < 0.0) {
            violations.push(format!("trial {trial}: negative weight"));
        }
        sum_dev = sum_dev.max((alphas.iter().sum::<f64>() - 1.0).abs());
        for (a, b) in alphas.iter().zip(tape.value(shifted).data()) {
            shift_dev = shift_dev.max((a - b).abs());
        }
        for (j, &zj) in z.iter().enumerate() {
            let col = (0..n).map(|i| c.row(i)[j]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            // one rounding step of slack per summand
            let slack = 1e-15 * n as f64 * hi.abs().max(lo.abs());
            bound_dev = bound_dev.max((lo - zj - slack).max(zj - hi - slack).max(0.0));
        }
    }
    let passed = violations.is_empty() && sum_dev < 1e-6 && shift_dev < 1e-9 && bound_dev == 0.0;
    Ok(Check {
        name: format!("fusion_contracts ({trials} trials)"),
        passed,
        detail: format!(
            "|sum-1| {sum_dev:.1e} (limit 1e-6), shift dev {shift_dev:.1e} (limit 1e-9), bound excess {bound_dev:.1e}{}",
            violations
                .first()
                .map(|v| format!(", {v}"))
                .unwrap_or_default()
        ),
    })
}

/// Perturbs masked predictions and targets and requires a bit-identical
/// loss and unchanged gradients, for the loss alone and through the model.
pub fn masked_loss(seed: u64) -> Result<Check> {
    let mut rng = Rng::substream(seed, "verify-mask");
    let nf = 7;
    let mask: Vec<f64> = (0..nf).map(|j| f64::from(u8::from(j % 3 != 1))).collect();
    let target: Vec<f64> = (0..nf).map(|_| rng.normal()).collect();
    let pred = random_tensor(&mut rng, 1, nf);

    let run = |store: &ParameterStore, target: &[f64]| -> Result<(u64, Vec<u64>)> {
        let mut tape = Tape::new(store);
        let id = store.id("pred").expect("pred is registered");
        let p = tape.param(id);
        let l = tape.masked_squared_error(p, target, &mask, 0.25);
        let g = tape.backward(l)?;
        let bits = g
            .get(id)
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .unwrap_or_default();
        Ok((tape.value(l).item().to_bits(), bits))
    };
    let mut store = ParameterStore::new();
    let id = store.insert("pred", pred)?;
    let base = run(&store, &target)?;
    let mut same = true;
    for j in (0..nf).filter(|&j| mask[j] == 0.0) {
        let mut t = target.clone();
        t[j] += 100.0 * rng.normal();
        same &= run(&store, &t)? == base;
        let old = store.value(id).data()[j];
        store.value_mut(id).data_mut()[j] = old + 100.0 * rng.normal();
        same &= run(&store, &target)? == base;
        store.value_mut(id).data_mut()[j] = old;
    }

    // through the whole model: masked targets must not reach any gradient
    let mut rec = toy_record();
    let model = Model::new(ModelConfig::new(3, 2), seed)?;
    let through = |rec: &PatientRecord| -> Result<(u64, Vec<Vec<u64>>)> {
        let mut tape = Tape::new(&model.store);
        let l = record_forecast_loss(&mut tape, &model.net, rec, 1.0)?;
        let g = tape.backward(l)?;
        let grads = model
            .store
            .ids()
            .map(|id| {
                g.get(id)
                    .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
                    .unwrap_or_default()
            })
            .collect();
        Ok((tape.value(l).item().to_bits(), grads))
    };
    let base = through(&rec)?;
    if let Some(target) = rec.forecast.as_mut() {
        for (v, &m) in target.values.iter_mut().zip(&target.mask) {
            if !m {
                *v += 1e6;
            }
        }
    }
    same &= through(&rec)? == base;
    Ok(Check {
        name: "masked_loss".into(),
        passed: same,
        detail: if same {
            "loss bits and gradients unchanged".into()
        } else {
            "a masked entry changed the loss or a gradient".into()
        },
    })
}

/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` by counting every pair.
pub fn auroc_by_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Average precision by sweeping every distinct score as a threshold
/// (`score ≥ threshold` is predicted positive).
pub fn auprc_by_sweep(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for th in thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (s, &y) in scores.iter().zip(labels) {
            if *s >= th {
                if y == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

/// Library metrics against the brute-force oracles on `trials` random
/// instances with heavy ties.
pub fn metric_oracles(seed: u64, trials: usize) -> Result<Check> {
    let mut rng = Rng::substream(seed, "verify-metrics");
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < trials {
        let n = 2 + rng.below(99);
        let levels = 1 + rng.below(12);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.below(levels) as f64 / levels as f64)
            .collect();
        let p = rng.uniform_range(0.05, 0.95);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(p))).collect();
        let pos = labels.iter().filter(|&&y| y == 1).count();
        if pos == 0 || pos == n {
            continue;
        }
        worst = worst
            .max((auroc(&scores, &labels)? - auroc_by_pairs(&scores, &labels)).abs())
            .max((auprc(&scores, &labels)? - auprc_by_sweep(&scores, &labels)).abs());
        done += 1;
    }
    Ok(Check::bound(
        &format!("metric_oracles ({trials} instances)"),
        worst,
        METRIC_TOLERANCE,
        "max abs dev",
    ))
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = gradient_checks(seed)?;
    out.push(scan_kernel_equivalence(seed, 50)?);
    out.push(zoh_limits()?);
    out.push(causality(seed, SsmMode::Lti)?);
    out.push(causality(seed, SsmMode::Selective)?);
    out.push(fusion_contracts(seed, 1000)?);
    out.push(masked_loss(seed)?);
    out.push(metric_oracles(seed, 200)?);
    Ok(out)
}
