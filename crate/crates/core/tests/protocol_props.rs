use std::collections::{BTreeMap, BTreeSet};

use fusehead::data::cache::{decode_cache, encode_cache};
use fusehead::data::synth::{synth_generate, Profile, SynthConfig};
use fusehead::data::{validate_cache, Backbone, CacheRecord, ManifestRow, Split};
use fusehead::eval::{self, MetricsReport};
use fusehead::fusion::{Ear, FusionVariant, Prep};
use fusehead::head::{HeadConfig, Severity};
use fusehead::model::ModelConfig;
use fusehead::seqcore::{ParamStore, Tensor};
use fusehead::training::{
    aggregate, clip_gradients, grouped_kfold, train_fold, uniform_score_average, Prediction, TrainConfig,
};
use ndarray::Array2;
use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

fn brute_rmse(p: &[f64], t: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += (p[i] - t[i]) * (p[i] - t[i]);
    }
    (acc / p.len() as f64).sqrt()
}

fn brute_mae(p: &[f64], t: &[f64]) -> f64 {
    p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
}

/// Raw-moment form, algebraically distinct from the centered sums used by
/// the library.
fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn paired(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| (vec(0.0f64..100.0, n), vec(0.0f64..100.0, n)))
}

proptest! {
    #![proptest_config(config(200))]

    #[test]
    fn metrics_match_brute_force((p, t) in paired(2..300)) {
        let r = eval::rmse(&p, &t).unwrap();
        let m = eval::mae(&p, &t).unwrap();
        prop_assert!((r - brute_rmse(&p, &t)).abs() <= 1e-9);
        prop_assert!((m - brute_mae(&p, &t)).abs() <= 1e-9);
        prop_assert!(r >= m);
        let c = eval::pearson(&p, &t).unwrap();
        prop_assert!(!c.degenerate);
        prop_assert!((c.value - brute_pearson(&p, &t)).abs() <= 1e-9);
    }

    #[test]
    fn pearson_ignores_positive_affine_maps((p, t) in paired(2..200), a in 0.01f64..50.0, b in -100.0f64..100.0) {
        let base = eval::pearson(&p, &t).unwrap().value;
        let moved: Vec<f64> = p.iter().map(|x| a * x + b).collect();
        prop_assert!((eval::pearson(&moved, &t).unwrap().value - base).abs() <= 1e-9);
        prop_assert!((eval::pearson(&p, &moved.iter().map(|x| x / a).collect::<Vec<_>>()).unwrap().value
            - eval::pearson(&p, &p).unwrap().value).abs() <= 1e-9);
    }

    #[test]
    fn group_reports_partition_the_items(seed in any::<u64>(), n in 1usize..200) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<ManifestRow> = (0..n).map(|i| ManifestRow {
            utterance_id: format!("U{i}"),
            scene_token: format!("S{}", i / 3),
            severity: Severity::ALL[r.gen_range(0..3)],
            system_id: format!("E{:03}", r.gen_range(1..10)),
            label: r.gen_range(0.0..100.0),
            split: Split::Dev,
        }).collect();
        let refs: Vec<&ManifestRow> = rows.iter().collect();
        let preds: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..100.0)).collect();
        let sev = eval::severity_report(&preds, &refs).unwrap();
        let sys = eval::system_groups(&preds, &refs).unwrap();
        prop_assert_eq!(sev.groups.iter().map(|(_, m)| m.n).sum::<usize>(), n);
        prop_assert_eq!(sys.groups.iter().map(|(_, m)| m.n).sum::<usize>(), n);
        for (_, m) in sev.groups.iter().chain(&sys.groups).filter(|(_, m)| m.n > 0) {
            prop_assert!(m.rmse >= m.mae);
        }
    }

    #[test]
    fn folds_are_token_disjoint_and_balanced(tokens in vec("[a-e]{1,3}", 1..120), folds in 2usize..8, seed in any::<u64>()) {
        let unique: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
        let plan = grouped_kfold(tokens.iter().map(String::as_str), folds, seed);
        if unique.len() < folds {
            prop_assert!(plan.is_err());
            return Ok(());
        }
        let plan = plan.unwrap();
        let sets: Vec<BTreeSet<&str>> = (0..folds).map(|f| plan.tokens_in(f)).collect();
        let sizes: Vec<usize> = sets.iter().map(BTreeSet::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{:?}", sizes);
        prop_assert_eq!(sizes.iter().sum::<usize>(), unique.len());
        for i in 0..folds {
            for j in i + 1..folds {
                prop_assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        prop_assert_eq!(plan, grouped_kfold(tokens.iter().map(String::as_str), folds, seed).unwrap());
    }

    #[test]
    fn clipping_bounds_the_gradient_norm(seed in any::<u64>(), max_norm in 0.01f64..10.0, scale in 0.0f64..100.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        let mut grads = BTreeMap::new();
        for k in 0..r.gen_range(1..5) {
            let (a, b) = (r.gen_range(1..6), r.gen_range(1..6));
            store.insert(format!("p{k}"), Tensor::zeros(&[a, b]));
            grads.insert(format!("p{k}"), Array2::from_shape_fn((a, b), |_| r.gen_range(-1.0f32..1.0) * scale as f32));
        }
        store.accumulate(grads, 1.0).unwrap();
        let before = store.grad_norm() as f64;
        let reported = clip_gradients(&mut store, max_norm);
        prop_assert!((reported - before).abs() <= 1e-4 * before.max(1.0));
        let after = store.grad_norm() as f64;
        prop_assert!(after <= max_norm * (1.0 + 1e-5) + 1e-12, "{} > {}", after, max_norm);
        if before <= max_norm {
            prop_assert!((after - before).abs() <= 1e-6 * before.max(1.0));
        }
    }

    #[test]
    fn uniform_average_is_the_exact_mean(seed in any::<u64>(), n in 1usize..100) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Prediction> = (0..n).map(|i| Prediction { utterance_id: format!("U{i}"), score: r.gen_range(0.0..100.0) }).collect();
        let mut b: Vec<Prediction> = (0..n).map(|i| Prediction { utterance_id: format!("U{i}"), score: r.gen_range(0.0..100.0) }).collect();
        b.reverse();
        let avg = uniform_score_average(&a, &b).unwrap();
        let b_of: BTreeMap<&str, f64> = b.iter().map(|p| (p.utterance_id.as_str(), p.score)).collect();
        for (x, y) in a.iter().zip(&avg) {
            prop_assert_eq!(&x.utterance_id, &y.utterance_id);
            prop_assert_eq!(y.score, (x.score + b_of[x.utterance_id.as_str()]) / 2.0);
        }
        let same = uniform_score_average(&a, &a).unwrap();
        prop_assert_eq!(&same, &a);
    }
}

fn random_record(r: &mut ChaCha8Rng, i: usize) -> CacheRecord {
    let (t, d) = (r.gen_range(1..12), r.gen_range(1..9));
    CacheRecord {
        utterance_id: format!("utt-{i}-{}", r.gen_range(0..1000)),
        ear: if r.gen_bool(0.5) { Ear::L } else { Ear::R },
        backbone: if r.gen_bool(0.5) { Backbone::Canary } else { Backbone::Wavlm },
        frame_rate_hz: r.gen_range(1.0..100.0),
        values: Array2::from_shape_fn((t, d), |_| r.gen_range(-1e3f32..1e3)),
    }
}

#[test]
fn cache_round_trip_is_bit_exact() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let records: Vec<CacheRecord> = (0..1000).map(|i| random_record(&mut r, i)).collect();
    let bytes = encode_cache(&records).unwrap();
    let back = decode_cache(&bytes).unwrap();
    assert_eq!(back.len(), records.len());
    for (a, b) in records.iter().zip(&back) {
        assert_eq!(a.utterance_id, b.utterance_id);
        assert_eq!((a.ear, a.backbone), (b.ear, b.backbone));
        assert_eq!(a.frame_rate_hz.to_bits(), b.frame_rate_hz.to_bits());
        assert!(a.values.iter().zip(b.values.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.values.dim(), b.values.dim());
    }
    assert_eq!(encode_cache(&back).unwrap(), bytes);
}

proptest! {
    #![proptest_config(config(500))]

    #[test]
    fn any_single_byte_corruption_is_detected(seed in any::<u64>(), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<CacheRecord> = (0..r.gen_range(1..5)).map(|i| random_record(&mut r, i)).collect();
        let mut bytes = encode_cache(&records).unwrap();
        let at = pos.index(bytes.len());
        bytes[at] ^= flip;
        prop_assert!(decode_cache(&bytes).is_err(), "byte {} of {} xor {:#x}", at, bytes.len(), flip);
    }
}

#[test]
fn synthesis_is_a_pure_function_of_its_config() {
    let cfg = SynthConfig { feature_dim: 8, ..SynthConfig::new(40, 5, Profile::Local) };
    let a = synth_generate(&cfg).unwrap();
    assert_eq!(a, synth_generate(&cfg).unwrap());
    assert_ne!(a.dataset, synth_generate(&SynthConfig { seed: 6, ..cfg }).unwrap().dataset);
    assert_ne!(a.dataset, synth_generate(&SynthConfig { profile: Profile::Global, ..cfg }).unwrap().dataset);
}

#[test]
fn synthetic_data_passes_validation_with_plausible_rates() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_generate(&SynthConfig { feature_dim: 4, ..SynthConfig::new(30, 9, Profile::Global) }).unwrap();
    out.dataset.save(dir.path()).unwrap();
    let report = validate_cache(&dir.path().join(fusehead::data::CACHE_FILE), Some(&dir.path().join(fusehead::data::MANIFEST_FILE))).unwrap();
    assert!(report.is_ok(), "{:?}", report.errors);
    assert_eq!(report.records, 4 * 30);
    for item in &out.dataset.items {
        for ear in &item.features.ears {
            let ratio = ear.wavlm.frame_rate_hz() / ear.canary.frame_rate_hz();
            assert!((3.0..=5.0).contains(&ratio));
            let len_ratio = ear.wavlm.len() as f64 / ear.canary.len() as f64;
            assert!((3.0..=5.0).contains(&len_ratio), "{len_ratio}");
        }
    }
}

#[test]
fn fold_training_is_deterministic_and_keeps_the_best_epoch() {
    let out = synth_generate(&SynthConfig { feature_dim: 4, ..SynthConfig::new(60, 2, Profile::Local) }).unwrap();
    let items: Vec<_> = out.dataset.split(Split::Train);
    let plan = grouped_kfold(items.iter().map(|i| i.row.scene_token.as_str()), 3, 1).unwrap();
    let (train, val) = plan.split(&items, 0).unwrap();
    let train_tokens: BTreeSet<&str> = train.iter().map(|i| i.row.scene_token.as_str()).collect();
    assert!(val.iter().all(|i| !train_tokens.contains(i.row.scene_token.as_str())));

    let mut model_cfg = ModelConfig::new(FusionVariant::frame_aligned(Prep::Conv));
    model_cfg.input_dim = 4;
    model_cfg.head = HeadConfig { severity_embed_dim: 2, adapter_rank: 2, ..HeadConfig::with_d(4) };
    let cfg = TrainConfig { epochs: 3, batch_size: 8, lr: 3e-3, ..TrainConfig::default() };
    let a = train_fold(&train, &val, &model_cfg, &cfg, 0).unwrap();
    let b = train_fold(&train, &val, &model_cfg, &cfg, 0).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    let best = a.history.iter().map(|e| e.val_rmse).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val_rmse(), best);
    let first_best = a.history.iter().position(|e| e.val_rmse == best).unwrap();
    assert_eq!(a.best_epoch, a.history[first_best].epoch);
    let other = train_fold(&train, &val, &model_cfg, &cfg, 1).unwrap();
    assert_ne!(other.model, a.model, "fold index keys the streams");
}

#[test]
fn aggregate_uses_the_sample_deviation() {
    let s = aggregate(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(s.mean, 2.5);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(aggregate(&[7.0]).unwrap().std, 0.0);
}

#[test]
fn metrics_report_flags_constant_predictions() {
    let m = MetricsReport::compute(&[50.0, 50.0, 50.0], &[10.0, 20.0, 90.0]).unwrap();
    assert!(m.corr_degenerate);
    assert_eq!(m.corr, 0.0);
}
