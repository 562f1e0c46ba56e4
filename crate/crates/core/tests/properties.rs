use proptest::prelude::*;

use hymate::attention::FusionAttention;
use hymate::config::{RunConfig, KEYS};
use hymate::data::{
    generate, load_jsonl, make_forecast_instances, normalize, save_jsonl, split, PatientRecord, SignalMode, StatsSource, SyntheticSpec, Triplet,
};
use hymate::model::{Model, ModelConfig};
use hymate::numerics::{ParameterStore, Rng, Tape, Tensor};
use hymate::ssm::{causal_conv, ssm_kernel, ssm_scan, ChannelSsm, SsmMode};
use hymate::training::{auprc, auroc, load_checkpoint, save_checkpoint};

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..8).prop_map(f64::from), n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
    })
}

fn spec(n_patients: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_patients,
        n_features: 5,
        static_dim: 2,
        mean_seq_len: 12.0,
        seed,
        ..SyntheticSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auroc_is_unchanged_by_monotone_rescoring((s, y) in scores_and_labels(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let moved: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
        prop_assert!((auroc(&s, &y).unwrap() - auroc(&moved, &y).unwrap()).abs() < 1e-12);
        prop_assert!((auprc(&s, &y).unwrap() - auprc(&moved, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn flipping_labels_mirrors_auroc((s, y) in scores_and_labels()) {
        let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let sum = auroc(&s, &y).unwrap() + auroc(&s, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auprc_is_one_for_a_perfect_ranking(pos in 1usize..30, neg in 1usize..30) {
        let s: Vec<f64> = (0..pos + neg).map(|i| -(i as f64)).collect();
        let y: Vec<u8> = (0..pos + neg).map(|i| u8::from(i < pos)).collect();
        prop_assert_eq!(auroc(&s, &y).unwrap(), 1.0);
        prop_assert!((auprc(&s, &y).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lti_scan_matches_its_kernel(
        u in prop::collection::vec(-3.0f64..3.0, 1..120),
        a_log in prop::collection::vec(-2.0f64..2.0, 1..6),
        seed in any::<u64>(),
        log_dt in -6.0f64..0.0,
    ) {
        let mut rng = Rng::new(seed);
        let p = a_log.len();
        let ch = ChannelSsm {
            a_log,
            b: (0..p).map(|_| rng.normal()).collect(),
            c: (0..p).map(|_| rng.normal()).collect(),
            log_dt,
            w_dt: 0.0,
            b_dt: 0.0,
        };
        let scan = ssm_scan(&u, &ch, SsmMode::Lti).unwrap();
        let conv = causal_conv(&u, &ssm_kernel(&ch, SsmMode::Lti, u.len()).unwrap());
        for (a, b) in scan.iter().zip(&conv) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_weights_form_a_distribution(n in 1usize..30, tau in 1usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut store = ParameterStore::new();
        let fusion = FusionAttention::new(&mut store, &mut rng, tau, 4).unwrap();
        let c = Tensor::matrix(n, tau, (0..n * tau).map(|_| 5.0 * rng.normal()).collect()).unwrap();
        let mut tape = Tape::new(&store);
        let cv = tape.constant(c);
        let pooled = fusion.forward(&mut tape, cv).unwrap();
        let alphas = tape.value(pooled.alphas).data();
        prop_assert!(alphas.iter().all(|&a| a >= 0.0));
        prop_assert!((alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_partitions_patients(seed in any::<u64>(), train in 0.3f64..0.7) {
        let ds = generate(&spec(60, 1)).unwrap();
        let val = (1.0 - train) / 2.0;
        let (a, b, c) = split(&ds, [train, val, 1.0 - train - val], seed).unwrap();
        let mut ids: Vec<&str> = a.records.iter()
            .chain(&b.records)
            .chain(&c.records)
            .map(|r| r.id.as_str())
            .collect();
        ids.sort_unstable();
        let mut all: Vec<&str> = ds.records.iter().map(|r| r.id.as_str()).collect();
        all.sort_unstable();
        prop_assert_eq!(ids, all);
    }

    #[test]
    fn forecast_windows_stay_inside_their_bounds(w_obs in 2.0f64..30.0, w_fc in 0.5f64..6.0, stride in 1.0f64..12.0) {
        let ds = generate(&spec(20, 3)).unwrap();
        let inst = make_forecast_instances(&ds, w_obs, w_fc, stride).unwrap();
        for r in &inst.records {
            prop_assert!(!r.triplets.is_empty());
            prop_assert!(r.triplets.iter().all(|t| t.time >= 0.0 && t.time < w_obs));
            prop_assert!(r.triplets.windows(2).all(|w| w[0].time <= w[1].time));
            let f = r.forecast.as_ref().unwrap();
            prop_assert_eq!(f.mask.len(), ds.num_features());
            prop_assert!(f.values.iter().zip(&f.mask).all(|(&v, &m)| m || v == 0.0));
        }
    }

    #[test]
    fn config_keys_round_trip_through_text(seed in any::<u64>(), lr in 1e-5f64..1.0, pe in 0usize..50) {
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("lr", &lr.to_string()).unwrap();
        cfg.set("pretrain_epochs", &pe.to_string()).unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        for key in KEYS {
            prop_assert_eq!(cfg.get(key), back.get(key), "key {}", key);
        }
        prop_assert_eq!(back.to_text(), cfg.to_text());
    }
}

#[test]
fn generator_is_deterministic_and_sorted() {
    for mode in [SignalMode::Separable, SignalMode::LongRange] {
        let s = SyntheticSpec {
            mode,
            ..spec(80, 5)
        };
        let a = generate(&s).unwrap();
        assert_eq!(a, generate(&s).unwrap());
        for r in &a.records {
            assert!(r.triplets.windows(2).all(|w| w[0].time <= w[1].time));
            assert_eq!(r.statics.len(), 2);
        }
    }
}

#[test]
fn jsonl_round_trip_keeps_records_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = generate(&spec(40, 2)).unwrap();
    let (_, stats) = normalize(&ds, StatsSource::Fit).unwrap();
    ds.stats = Some(stats);
    let path = save_jsonl(&ds, dir.path()).unwrap();
    let (back, report) = load_jsonl(&path).unwrap();
    assert_eq!(report.records, ds.len());
    assert_eq!(back.vocab, ds.vocab);
    assert_eq!(back.stats, ds.stats);
    assert_eq!(back.records, ds.records);
}

#[test]
fn normalized_training_split_is_standardized() {
    let ds = generate(&spec(200, 4)).unwrap();
    let (norm, _) = normalize(&ds, StatsSource::Fit).unwrap();
    for f in 0..ds.num_features() {
        let v: Vec<f64> = norm
            .records
            .iter()
            .flat_map(|r| r.triplets.iter())
            .filter(|t| t.feature == f)
            .map(|t| t.value)
            .collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        assert!(m.abs() < 1e-9, "feature {f} mean {m}");
    }
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(ModelConfig::new(5, 2), 8).unwrap();
    let rec = PatientRecord {
        id: "x".into(),
        statics: vec![0.1, 0.2],
        triplets: (0..9)
            .map(|i| Triplet {
                time: i as f64 * 0.7,
                feature: i % 5,
                value: (i as f64).sin(),
            })
            .collect(),
        label: None,
        forecast: None,
    };
    let path = dir.path().join("ck.json");
    save_checkpoint(&model, None, &path).unwrap();
    let (back, stats) = load_checkpoint(&path).unwrap();
    assert!(stats.is_none());
    assert_eq!(
        model.predict(&rec).unwrap().to_bits(),
        back.predict(&rec).unwrap().to_bits()
    );
}
